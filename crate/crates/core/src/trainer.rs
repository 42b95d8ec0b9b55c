//! Training loop: phased schedule, per-epoch margin and learning rates,
//! seeded mini-batching over a [`DatasetPlan`], and validation after every
//! epoch.
//!
//! Epochs are numbered globally across phases starting at 1, and that number
//! drives both the margin schedule and the cosine learning-rate schedule
//! (unless the schedule restarts per phase). Each epoch shuffles the train
//! entries expanded by multiplicity and walks them in batches; the last
//! partial batch is kept. Per-sample gradients are accumulated in batch
//! order and averaged, so a run is bit-reproducible from its seed.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use crate::dataset::{DatasetPlan, FeatureStore};
use crate::encoder::{EmbeddingProvider, EncoderConfig, EncoderGrads, EncoderState, Mode};
use crate::error::{Error, Result};
use crate::margin::{margin_at_epoch, ArcFaceHead, MarginSchedule, DEFAULT_SCALE};
use crate::metrics::{mp_at_5, truth_from_labels, MetricReport};
use crate::optim::{adamw_step, cosine_lr_over, AdamWState, ParamGroup, StratifiedLrConfig};
use crate::retrieval::{top_k, EmbeddingStore};
use crate::rng::SeededRng;

const SHUFFLE_STREAM: u64 = 0x7368_7566;
const DROPOUT_STREAM: u64 = 0x6472_6f70;
const HEAD_STREAM: u64 = 0x6865_6164;

pub const REPORT_HEADER: &str = "epoch,loss,margin,lr_head,lr_backbone,val_mp5,seconds";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Phase {
    pub epochs: u32,
    pub frozen_backbone: bool,
}

/// Ordered training phases, written as comma-separated tokens such as
/// `2u,1f` (two unfrozen epochs, then one with the backbone frozen).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePlan {
    pub phases: Vec<Phase>,
}

impl PhasePlan {
    pub fn new(phases: Vec<Phase>) -> Result<Self> {
        if phases.is_empty() || phases.iter().any(|p| p.epochs == 0) {
            return Err(Error::Config(
                "phase plan needs at least one phase of >= 1 epoch".into(),
            ));
        }
        Ok(Self { phases })
    }

    pub fn total_epochs(&self) -> u32 {
        self.phases.iter().map(|p| p.epochs).sum()
    }

    /// `(phase, epoch within phase)` for every global epoch, in order.
    pub fn epochs(&self) -> impl Iterator<Item = (Phase, u32)> + '_ {
        self.phases
            .iter()
            .flat_map(|p| (1..=p.epochs).map(move |local| (*p, local)))
    }
}

impl FromStr for PhasePlan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut phases = Vec::new();
        for token in s.split(',') {
            let token = token.trim();
            let bad =
                || Error::Argument(format!("bad phase token {token:?}, expected e.g. 2u or 1f"));
            let (count, kind) = token.split_at(token.len().saturating_sub(1));
            let frozen_backbone = match kind {
                "u" => false,
                "f" => true,
                _ => return Err(bad()),
            };
            let epochs: u32 = count.parse().map_err(|_| bad())?;
            phases.push(Phase {
                epochs,
                frozen_backbone,
            });
        }
        PhasePlan::new(phases)
    }
}

impl fmt::Display for PhasePlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tokens: Vec<String> = self
            .phases
            .iter()
            .map(|p| format!("{}{}", p.epochs, if p.frozen_backbone { 'f' } else { 'u' }))
            .collect();
        f.write_str(&tokens.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub encoder: EncoderConfig,
    pub scale: f64,
    pub margin: MarginSchedule,
    /// When off, every epoch uses `margin.m_max`.
    pub dynamic_margin: bool,
    pub optimizer: StratifiedLrConfig,
    /// When off, the backbone trains at the full rate (`c = 1`).
    pub stratified_lr: bool,
    pub phases: PhasePlan,
    pub batch_size: usize,
    pub max_epochs: u32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            scale: DEFAULT_SCALE,
            margin: MarginSchedule::default(),
            dynamic_margin: true,
            optimizer: StratifiedLrConfig::default(),
            stratified_lr: true,
            phases: PhasePlan {
                phases: vec![
                    Phase {
                        epochs: 2,
                        frozen_backbone: false,
                    },
                    Phase {
                        epochs: 1,
                        frozen_backbone: true,
                    },
                ],
            },
            batch_size: 64,
            max_epochs: 15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.margin.validate()?;
        self.optimizer.validate()?;
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return Err(Error::Config(format!(
                "scale must be positive, got {}",
                self.scale
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        let total = self.phases.total_epochs();
        if total == 0 || total > self.max_epochs {
            return Err(Error::Config(format!(
                "phase plan has {total} epochs, allowed 1..={}",
                self.max_epochs
            )));
        }
        Ok(())
    }

    pub fn margin_for(&self, epoch: u32) -> Result<f64> {
        if self.dynamic_margin {
            margin_at_epoch(&self.margin, epoch)
        } else {
            Ok(self.margin.m_max)
        }
    }

    /// Effective optimizer settings: stratification off forces `c = 1`, and
    /// the schedule length is the plan's epoch count.
    pub fn effective_optimizer(&self) -> StratifiedLrConfig {
        StratifiedLrConfig {
            c: if self.stratified_lr {
                self.optimizer.c
            } else {
                1.0
            },
            total_epochs: self.phases.total_epochs(),
            ..self.optimizer
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: u32,
    pub loss: f64,
    pub margin: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
    pub val_mp5: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

impl TrainReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let ctx = || path.display().to_string();
        let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
        let mut out = BufWriter::new(file);
        writeln!(out, "{REPORT_HEADER}").map_err(|e| Error::io(ctx(), e))?;
        for r in &self.epochs {
            let val = r.val_mp5.map(|v| format!("{v:.6}")).unwrap_or_default();
            writeln!(
                out,
                "{},{:.9},{},{:e},{:e},{},{:.3}",
                r.epoch, r.loss, r.margin, r.lr_head, r.lr_backbone, val, r.seconds
            )
            .map_err(|e| Error::io(ctx(), e))?;
        }
        out.flush().map_err(|e| Error::io(ctx(), e))
    }

    pub fn final_mp5(&self) -> Option<f64> {
        self.epochs.last().and_then(|r| r.val_mp5)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub encoder: EncoderState,
    pub head: ArcFaceHead,
    /// Encoder blocks in canonical order followed by the head weights.
    pub optimizer: AdamWState,
    pub report: TrainReport,
}

fn feature(features: &FeatureStore, id: u64) -> Result<&[f64]> {
    features
        .get(id)
        .ok_or_else(|| Error::Validation(format!("no features for sample_id {id}")))
}

pub fn run(plan: &DatasetPlan, features: &FeatureStore, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    if features.dim() != cfg.encoder.dim_in {
        return Err(Error::Config(format!(
            "feature dim {} does not match encoder dim_in {}",
            features.dim(),
            cfg.encoder.dim_in
        )));
    }
    let class_count = plan.class_count;
    if class_count < 2 {
        return Err(Error::Config(format!(
            "need at least 2 classes, plan has {class_count}"
        )));
    }
    for e in &plan.entries {
        feature(features, e.sample_id)?;
        if e.class_index as usize >= class_count {
            return Err(Error::Config(format!(
                "sample_id {} has class_index {} but plan has {class_count} classes",
                e.sample_id, e.class_index
            )));
        }
    }
    let train: Vec<(u64, usize)> = plan
        .train_entries()
        .flat_map(|e| {
            std::iter::repeat_n(
                (e.sample_id, e.class_index as usize),
                e.multiplicity as usize,
            )
        })
        .collect();
    if train.is_empty() {
        return Err(Error::Validation("plan has no train entries".into()));
    }
    let has_validation = plan.validation_entries().next().is_some();

    let mut encoder = EncoderState::init(&cfg.encoder)?;
    let head_seed = SeededRng::derive(cfg.seed, &[HEAD_STREAM]).next_u64();
    let mut head = ArcFaceHead::init(class_count, cfg.encoder.embed_dim, cfg.scale, head_seed)?;
    let infos = encoder.block_infos();
    let mut optimizer = AdamWState::new(
        encoder
            .blocks()
            .iter()
            .map(|b| b.len())
            .chain(std::iter::once(head.weights.len())),
    );
    let head_block = infos.len();
    let opt = cfg.effective_optimizer();
    let total = cfg.phases.total_epochs();

    let mut report = TrainReport::default();
    let mut order = train;
    for (epoch, (phase, local)) in (1u32..).zip(cfg.phases.epochs()) {
        let started = Instant::now();
        let margin = cfg.margin_for(epoch)?;
        let lr_head = if opt.restart_per_phase {
            cosine_lr_over(&opt, local, phase.epochs)?
        } else {
            cosine_lr_over(&opt, epoch, total)?
        };
        let lr_backbone = lr_head * opt.c;
        encoder.frozen_backbone = phase.frozen_backbone;

        let mut rng = SeededRng::derive(cfg.seed, &[SHUFFLE_STREAM, epoch as u64]);
        rng.shuffle(&mut order);

        let mut loss_sum = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let prepared = head.prepare()?;
            let mut enc_grads = EncoderGrads::zeros_like(&encoder);
            let mut head_grads = vec![0.0; head.weights.len()];
            let mut batch_loss = 0.0;
            for (slot, &(id, class)) in batch.iter().enumerate() {
                let position = (batch_no * cfg.batch_size + slot) as u64;
                let dropout_seed =
                    SeededRng::derive(cfg.seed, &[DROPOUT_STREAM, epoch as u64, position])
                        .next_u64();
                let cache = encoder.forward(feature(features, id)?, Mode::Train, dropout_seed)?;
                let (loss, d_emb) =
                    prepared.backward_into(&cache.embedding, class, margin, &mut head_grads)?;
                encoder.backward_into(&cache, &d_emb, &mut enc_grads)?;
                batch_loss += loss;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss in epoch {epoch}, batch {}",
                    batch_no + 1
                )));
            }
            loss_sum += batch_loss;

            let inv = 1.0 / batch.len() as f64;
            enc_grads.scale(inv);
            head_grads.iter_mut().for_each(|g| *g *= inv);
            let context = |e: Error| match e {
                Error::Numeric(msg) => {
                    Error::Numeric(format!("epoch {epoch}, batch {}: {msg}", batch_no + 1))
                }
                other => other,
            };
            let grad_blocks = enc_grads.blocks();
            for (i, params) in encoder.blocks_mut().into_iter().enumerate() {
                let info = &infos[i];
                let group_lr = match info.group {
                    ParamGroup::Backbone if phase.frozen_backbone => continue,
                    ParamGroup::Backbone => lr_backbone,
                    ParamGroup::Head => lr_head,
                };
                adamw_step(
                    params,
                    grad_blocks[i],
                    &mut optimizer,
                    i,
                    group_lr,
                    !info.is_bias,
                    &opt,
                )
                .map_err(context)?;
            }
            adamw_step(
                &mut head.weights,
                &head_grads,
                &mut optimizer,
                head_block,
                lr_head,
                true,
                &opt,
            )
            .map_err(context)?;
        }

        let val_mp5 = if has_validation {
            Some(validate(&encoder, plan, features)?.mp_at_5)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            loss: loss_sum / order.len() as f64,
            margin,
            lr_head,
            lr_backbone,
            val_mp5,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.6} margin {margin} lr {lr_head:e}/{lr_backbone:e} val mP@5 {}",
            record.loss,
            val_mp5
                .map(|v| format!("{v:.4}"))
                .unwrap_or_else(|| "-".into())
        );
        report.epochs.push(record);
    }

    Ok(TrainOutput {
        encoder,
        head,
        optimizer,
        report,
    })
}

/// Leave-one-out mP@5 over the validation split: every validation sample
/// queries all the others, relevance is a shared class index.
pub fn validate(
    encoder: &impl EmbeddingProvider,
    plan: &DatasetPlan,
    features: &FeatureStore,
) -> Result<MetricReport> {
    let entries: Vec<_> = plan.validation_entries().collect();
    if entries.is_empty() {
        return Err(Error::Validation("plan has no validation entries".into()));
    }
    let mut store = EmbeddingStore::with_capacity(encoder.embed_dim(), entries.len())?;
    let mut labels = Vec::with_capacity(entries.len());
    for e in entries {
        store.push_f64(
            e.sample_id,
            &encoder.embed(feature(features, e.sample_id)?)?,
        )?;
        labels.push((e.sample_id, e.class_index));
    }
    score_embeddings(&store, &labels)
}

/// Leave-one-out mP@5 of a labelled store against itself.
pub fn score_embeddings<L: Eq + std::hash::Hash>(
    store: &EmbeddingStore,
    labels: &[(u64, L)],
) -> Result<MetricReport> {
    let distinct: std::collections::HashSet<&L> = labels.iter().map(|(_, l)| l).collect();
    if distinct.len() < 2 {
        return Err(Error::Validation(format!(
            "validation needs at least 2 classes, found {}",
            distinct.len()
        )));
    }
    let results = top_k(store, store, 5, true)?;
    let report = mp_at_5(&results, &truth_from_labels(labels, labels))?;
    if report.skipped > 0 {
        log::warn!(
            "{} validation queries have no same-class neighbour and were skipped",
            report.skipped
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::synth::{synthesize, SyntheticSpec};
    use crate::dataset::{assign_folds, plan_classes, PlanConfig};

    fn small_setup(seed: u64) -> (DatasetPlan, FeatureStore, TrainConfig) {
        let spec = SyntheticSpec {
            class_count: 12,
            dim_in: 8,
            samples_per_class: (8, 14),
            cluster_std: 0.2,
            seed,
        };
        let (records, features) = synthesize(&spec).unwrap();
        let plan = plan_classes(&records, PlanConfig::default(), seed).unwrap();
        let plan = assign_folds(&plan, 4, 0, seed).unwrap();
        let cfg = TrainConfig {
            encoder: EncoderConfig {
                dim_in: 8,
                backbone_widths: vec![16],
                embed_dim: 8,
                seed,
                ..Default::default()
            },
            optimizer: StratifiedLrConfig {
                lr: 1e-2,
                c: 0.1,
                ..Default::default()
            },
            batch_size: 16,
            seed,
            ..Default::default()
        };
        (plan, features, cfg)
    }

    fn strip_time(r: &TrainReport) -> Vec<EpochRecord> {
        r.epochs
            .iter()
            .map(|e| EpochRecord { seconds: 0.0, ..*e })
            .collect()
    }

    #[test]
    fn phase_tokens() {
        let p: PhasePlan = "2u,1f".parse().unwrap();
        assert_eq!(p.total_epochs(), 3);
        assert!(p.phases[1].frozen_backbone);
        assert_eq!(p.to_string(), "2u,1f");
        for bad in ["", "2x", "u", "0u", "2u,,1f", "-1u"] {
            assert!(bad.parse::<PhasePlan>().is_err(), "{bad}");
        }
    }

    #[test]
    fn same_seed_same_report() {
        let (plan, features, cfg) = small_setup(5);
        let a = run(&plan, &features, &cfg).unwrap();
        let b = run(&plan, &features, &cfg).unwrap();
        assert_eq!(strip_time(&a.report), strip_time(&b.report));
        assert_eq!(a.encoder, b.encoder);
        assert_eq!(a.report.epochs.len(), 3);
    }

    #[test]
    fn report_follows_schedules() {
        let (plan, features, cfg) = small_setup(6);
        let out = run(&plan, &features, &cfg).unwrap();
        let opt = cfg.effective_optimizer();
        for r in &out.report.epochs {
            assert_eq!(r.margin, margin_at_epoch(&cfg.margin, r.epoch).unwrap());
            assert_eq!(r.lr_head, cosine_lr_over(&opt, r.epoch, 3).unwrap());
            assert_eq!(r.lr_backbone, r.lr_head * 0.1);
            assert!(r.val_mp5.is_some());
        }
        let fixed = TrainConfig {
            dynamic_margin: false,
            ..cfg
        };
        let out = run(&plan, &features, &fixed).unwrap();
        assert!(out
            .report
            .epochs
            .iter()
            .all(|r| r.margin == fixed.margin.m_max));
    }

    #[test]
    fn frozen_epoch_keeps_backbone_bits() {
        let (plan, features, cfg) = small_setup(7);
        let two = TrainConfig {
            phases: "2u".parse().unwrap(),
            optimizer: StratifiedLrConfig {
                restart_per_phase: true,
                ..cfg.optimizer
            },
            ..cfg.clone()
        };
        let three = TrainConfig {
            phases: "2u,1f".parse().unwrap(),
            optimizer: StratifiedLrConfig {
                restart_per_phase: true,
                ..cfg.optimizer
            },
            ..cfg
        };
        let a = run(&plan, &features, &two).unwrap();
        let b = run(&plan, &features, &three).unwrap();
        let backbone = |enc: &EncoderState| -> Vec<u64> {
            enc.blocks()
                .iter()
                .zip(enc.block_infos())
                .filter(|(_, i)| i.group == ParamGroup::Backbone)
                .flat_map(|(b, _)| b.iter().map(|x| x.to_bits()).collect::<Vec<_>>())
                .collect()
        };
        assert_eq!(backbone(&a.encoder), backbone(&b.encoder));
        // The neck keeps training in the frozen phase.
        assert_ne!(
            a.encoder.blocks().last().unwrap(),
            b.encoder.blocks().last().unwrap()
        );
    }

    #[test]
    fn first_epoch_matches_fixed_initial_margin() {
        let (plan, features, cfg) = small_setup(8);
        let one = TrainConfig {
            phases: "1u".parse().unwrap(),
            ..cfg
        };
        let dynamic = run(&plan, &features, &one).unwrap();
        let fixed = TrainConfig {
            dynamic_margin: false,
            margin: MarginSchedule::constant(one.margin.m_init),
            ..one.clone()
        };
        let fixed = run(&plan, &features, &fixed).unwrap();
        assert_eq!(dynamic.report.epochs[0].loss, fixed.report.epochs[0].loss);
        assert_eq!(dynamic.encoder, fixed.encoder);
    }

    #[test]
    fn rejects_mismatches() {
        let (plan, features, cfg) = small_setup(9);
        let wrong_dim = TrainConfig {
            encoder: EncoderConfig {
                dim_in: 9,
                ..cfg.encoder.clone()
            },
            ..cfg.clone()
        };
        assert!(matches!(
            run(&plan, &features, &wrong_dim),
            Err(Error::Config(_))
        ));
        let too_long = TrainConfig {
            phases: "16u".parse().unwrap(),
            ..cfg.clone()
        };
        assert!(run(&plan, &features, &too_long).is_err());
        let mut missing = FeatureStore::new(8);
        missing.push(0, &[0.0; 8]).unwrap();
        assert!(run(&plan, &missing, &cfg).is_err());
    }

    struct Fixed(Vec<(u64, Vec<f64>)>);

    impl EmbeddingProvider for Fixed {
        fn input_dim(&self) -> usize {
            1
        }
        fn embed_dim(&self) -> usize {
            2
        }
        fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
            Ok(self
                .0
                .iter()
                .find(|(id, _)| *id as f64 == x[0])
                .unwrap()
                .1
                .clone())
        }
    }

    fn validation_plan(classes: &[u32]) -> (DatasetPlan, FeatureStore) {
        use crate::dataset::{PlanEntry, Split};
        let mut features = FeatureStore::new(1);
        let entries = classes
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                features.push(i as u64, &[i as f64]).unwrap();
                PlanEntry {
                    sample_id: i as u64,
                    class_index: c,
                    fold: 0,
                    split: Split::Validation,
                    multiplicity: 1,
                }
            })
            .collect();
        let class_count = *classes.iter().max().unwrap() as usize + 1;
        (
            DatasetPlan {
                entries,
                class_count,
            },
            features,
        )
    }

    #[test]
    fn separated_classes_score_one() {
        let classes = [0, 0, 0, 1, 1, 1, 2, 2];
        let (plan, features) = validation_plan(&classes);
        let dirs = [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]];
        let provider = Fixed(
            classes
                .iter()
                .enumerate()
                .map(|(i, &c)| (i as u64, dirs[c as usize].to_vec()))
                .collect(),
        );
        let report = validate(&provider, &plan, &features).unwrap();
        assert_eq!(report.mp_at_5, 1.0);
        assert_eq!(report.q(), 8);
    }

    #[test]
    fn single_validation_class_is_an_error() {
        let (plan, features) = validation_plan(&[0, 0, 0]);
        let provider = Fixed((0..3).map(|i| (i, vec![1.0, 0.0])).collect());
        assert!(matches!(
            validate(&provider, &plan, &features),
            Err(Error::Validation(_))
        ));
    }
}
