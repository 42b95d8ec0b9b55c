//! Dataset planning: manifest loading, class capping/filtering/resampling,
//! stratified fold assignment, and the plan CSV format.
//!
//! A plan never duplicates rows. Resampling is recorded as a per-entry
//! `multiplicity`, and the trainer expands entries by multiplicity when it
//! builds an epoch.

mod features;
pub mod synth;

pub use features::FeatureStore;
pub use synth::{synthesize, SyntheticSpec};

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const MANIFEST_HEADER: [&str; 3] = ["sample_id", "class_label", "payload_ref"];
pub const PLAN_HEADER: [&str; 5] = ["sample_id", "class_index", "fold", "split", "multiplicity"];

const PLAN_STREAM: u64 = 0x706c_616e;
const FOLD_STREAM: u64 = 0x666f_6c64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub sample_id: u64,
    pub class_label: String,
    pub payload_ref: String,
}

/// Labels are restricted to `[A-Za-z0-9_-]` so CSV fields never need quoting.
pub fn is_valid_label(label: &str) -> bool {
    !label.is_empty()
        && label
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            other => Err(format!("unknown split token {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub sample_id: u64,
    pub class_index: u32,
    pub fold: u32,
    pub split: Split,
    pub multiplicity: u32,
}

/// Per-sample training plan. Entries are sorted by `(class_index, sample_id)`
/// and class indices are dense in `0..class_count`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetPlan {
    pub entries: Vec<PlanEntry>,
    pub class_count: usize,
}

impl DatasetPlan {
    pub fn train_entries(&self) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(|e| e.split == Split::Train)
    }

    pub fn validation_entries(&self) -> impl Iterator<Item = &PlanEntry> {
        self.entries.iter().filter(|e| e.split == Split::Validation)
    }

    /// Sum of multiplicities over all entries.
    pub fn total_multiplicity(&self) -> u64 {
        self.entries.iter().map(|e| e.multiplicity as u64).sum()
    }

    /// Multiplicity totals per class index.
    pub fn class_totals(&self) -> Vec<u64> {
        let mut totals = vec![0u64; self.class_count];
        for e in &self.entries {
            totals[e.class_index as usize] += e.multiplicity as u64;
        }
        totals
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanConfig {
    /// Classes larger than this are subsampled to exactly `cap` ids.
    pub cap: usize,
    /// Classes smaller than this are dropped.
    pub min_keep: usize,
    /// Classes smaller than this are resampled with replacement up to it.
    pub resample_floor: usize,
}

impl Default for PlanConfig {
    fn default() -> Self {
        Self {
            cap: 100,
            min_keep: 3,
            resample_floor: 20,
        }
    }
}

impl PlanConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cap >= self.resample_floor
            && self.resample_floor >= self.min_keep
            && self.min_keep >= 1)
        {
            return Err(Error::Argument(format!(
                "need cap >= resample_floor >= min_keep >= 1, got cap={} floor={} min_keep={}",
                self.cap, self.resample_floor, self.min_keep
            )));
        }
        Ok(())
    }
}

fn csv_line(pos: Option<&csv::Position>) -> u64 {
    pos.map(|p| p.line()).unwrap_or(0)
}

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let line = csv_line(err.position());
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path.display().to_string(), e),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

pub(crate) fn open_csv(path: &Path, expected_header: &[&str]) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(file);
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(expected_header.iter().copied()) {
        return Err(parse_err(
            path,
            1,
            format!(
                "expected header `{}`, found `{}`",
                expected_header.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            ),
        ));
    }
    Ok(reader)
}

/// Iterates data rows, yielding each record with its 1-based line number.
pub(crate) fn for_each_row(
    path: &Path,
    reader: &mut csv::Reader<File>,
    mut f: impl FnMut(u64, &csv::StringRecord) -> Result<()>,
) -> Result<()> {
    let mut record = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut record) {
            Ok(true) => f(csv_line(record.position()), &record)?,
            Ok(false) => return Ok(()),
            Err(e) => return Err(csv_error(path, e)),
        }
    }
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    path: &Path,
    line: u64,
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
) -> Result<T>
where
    T::Err: fmt::Display,
{
    let raw = record.get(idx).unwrap_or("");
    raw.parse::<T>()
        .map_err(|e| parse_err(path, line, format!("bad {name} {raw:?}: {e}")))
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let mut reader = open_csv(path, &MANIFEST_HEADER)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for_each_row(path, &mut reader, |line, row| {
        let sample_id: u64 = parse_field(path, line, row, 0, "sample_id")?;
        let class_label = row.get(1).unwrap_or("").to_string();
        if !is_valid_label(&class_label) {
            return Err(parse_err(
                path,
                line,
                format!("class_label {class_label:?} must match [A-Za-z0-9_-]+"),
            ));
        }
        if !seen.insert(sample_id) {
            return Err(Error::Validation(format!(
                "{}: line {line}: duplicate sample_id {sample_id}",
                path.display()
            )));
        }
        records.push(ManifestRecord {
            sample_id,
            class_label,
            payload_ref: row.get(2).unwrap_or("").to_string(),
        });
        Ok(())
    })?;
    Ok(records)
}

pub fn write_manifest(records: &[ManifestRecord], path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", MANIFEST_HEADER.join(",")).map_err(|e| Error::io(ctx(), e))?;
    for r in records {
        writeln!(out, "{},{},{}", r.sample_id, r.class_label, r.payload_ref)
            .map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Caps, filters and resamples classes.
///
/// Per class of raw size `n`: `n > cap` keeps `cap` ids drawn uniformly
/// without replacement; `n < min_keep` drops the class; `n < resample_floor`
/// keeps every id once and then draws ids with replacement until the
/// multiplicity total reaches `resample_floor`; anything else is kept as is.
/// Classes are visited in lexicographic label order, which also fixes the
/// dense class index. All entries come out as `train`, fold 0.
pub fn plan_classes(records: &[ManifestRecord], cfg: PlanConfig, seed: u64) -> Result<DatasetPlan> {
    cfg.validate()?;
    let mut by_class: BTreeMap<&str, Vec<u64>> = BTreeMap::new();
    for r in records {
        by_class
            .entry(r.class_label.as_str())
            .or_default()
            .push(r.sample_id);
    }

    let mut rng = SeededRng::derive(seed, &[PLAN_STREAM]);
    let mut entries = Vec::new();
    let mut class_index = 0u32;
    for ids in by_class.into_values() {
        let n = ids.len();
        if n < cfg.min_keep {
            continue;
        }
        let mut kept: Vec<(u64, u32)> = if n > cfg.cap {
            let mut pool = ids;
            for i in 0..cfg.cap {
                let j = i + rng.below((n - i) as u64) as usize;
                pool.swap(i, j);
            }
            pool.truncate(cfg.cap);
            pool.sort_unstable();
            pool.into_iter().map(|id| (id, 1)).collect()
        } else {
            let mut sorted = ids;
            sorted.sort_unstable();
            let mut kept: Vec<(u64, u32)> = sorted.into_iter().map(|id| (id, 1)).collect();
            for _ in n..cfg.resample_floor {
                kept[rng.below(n as u64) as usize].1 += 1;
            }
            kept
        };
        entries.extend(kept.drain(..).map(|(sample_id, multiplicity)| PlanEntry {
            sample_id,
            class_index,
            fold: 0,
            split: Split::Train,
            multiplicity,
        }));
        class_index += 1;
    }
    if class_index == 0 {
        return Err(Error::EmptyPlan {
            min_keep: cfg.min_keep,
        });
    }
    Ok(DatasetPlan {
        entries,
        class_count: class_index as usize,
    })
}

/// Stratified fold assignment with a held-out validation fold.
///
/// Within each class the distinct ids are shuffled and dealt round-robin into
/// `k` folds. The dealing position carries over from one class to the next
/// (starting at a seeded offset), so every class gets `floor(n/k)` or
/// `ceil(n/k)` validation ids while the global validation share also stays
/// within one id of `N/k`. Validation entries have their multiplicity
/// collapsed to 1; the removed copies are redrawn uniformly onto the class's
/// train entries so per-class totals are preserved. A class whose only id
/// would land in validation stays in train.
pub fn assign_folds(
    plan: &DatasetPlan,
    k: u32,
    validation_fold: u32,
    seed: u64,
) -> Result<DatasetPlan> {
    if k < 2 {
        return Err(Error::Argument(format!(
            "fold count K must be >= 2, got {k}"
        )));
    }
    if validation_fold >= k {
        return Err(Error::Argument(format!(
            "validation fold {validation_fold} outside [0, {k})"
        )));
    }
    let mut rng = SeededRng::derive(seed, &[FOLD_STREAM]);
    let mut cursor = rng.below(k as u64);

    let mut entries = plan.entries.clone();
    entries.sort_by_key(|e| (e.class_index, e.sample_id));
    let mut out = Vec::with_capacity(entries.len());
    for class in entries.chunk_by_mut(|a, b| a.class_index == b.class_index) {
        // Ids are distinct within a plan; merge any duplicates defensively.
        let mut ids: Vec<u64> = class.iter().map(|e| e.sample_id).collect();
        ids.dedup();
        rng.shuffle(&mut ids);
        let folds: BTreeMap<u64, u32> = ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| (id, ((cursor + pos as u64) % k as u64) as u32))
            .collect();
        cursor += ids.len() as u64;

        let all_validation = folds.values().all(|&f| f == validation_fold);
        let mut displaced = 0u32;
        for e in class.iter_mut() {
            e.fold = folds[&e.sample_id];
            if e.fold == validation_fold && !all_validation {
                e.split = Split::Validation;
                displaced += e.multiplicity - 1;
                e.multiplicity = 1;
            } else {
                e.split = Split::Train;
            }
        }
        let train_slots: Vec<usize> = (0..class.len())
            .filter(|&i| class[i].split == Split::Train)
            .collect();
        for _ in 0..displaced {
            let slot = train_slots[rng.below(train_slots.len() as u64) as usize];
            class[slot].multiplicity += 1;
        }
        out.extend_from_slice(class);
    }
    Ok(DatasetPlan {
        entries: out,
        class_count: plan.class_count,
    })
}

pub fn write_plan(plan: &DatasetPlan, path: &Path) -> Result<()> {
    let ctx = || path.display().to_string();
    let file = File::create(path).map_err(|e| Error::io(ctx(), e))?;
    let mut out = BufWriter::new(file);
    writeln!(out, "{}", PLAN_HEADER.join(",")).map_err(|e| Error::io(ctx(), e))?;
    for e in &plan.entries {
        writeln!(
            out,
            "{},{},{},{},{}",
            e.sample_id, e.class_index, e.fold, e.split, e.multiplicity
        )
        .map_err(|e| Error::io(ctx(), e))?;
    }
    out.flush().map_err(|e| Error::io(ctx(), e))
}

/// Reads a plan written by [`write_plan`]. `class_count` is recovered as
/// `max(class_index) + 1`, and class indices must be dense.
pub fn read_plan(path: &Path) -> Result<DatasetPlan> {
    let mut reader = open_csv(path, &PLAN_HEADER)?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for_each_row(path, &mut reader, |line, row| {
        let entry = PlanEntry {
            sample_id: parse_field(path, line, row, 0, "sample_id")?,
            class_index: parse_field(path, line, row, 1, "class_index")?,
            fold: parse_field(path, line, row, 2, "fold")?,
            split: parse_field(path, line, row, 3, "split")?,
            multiplicity: parse_field(path, line, row, 4, "multiplicity")?,
        };
        if entry.multiplicity == 0 {
            return Err(parse_err(path, line, "multiplicity must be >= 1"));
        }
        if entry.split == Split::Validation && entry.multiplicity != 1 {
            return Err(parse_err(
                path,
                line,
                "validation entries must have multiplicity 1",
            ));
        }
        if !seen.insert(entry.sample_id) {
            return Err(parse_err(
                path,
                line,
                format!("duplicate sample_id {}", entry.sample_id),
            ));
        }
        entries.push(entry);
        Ok(())
    })?;
    let class_count = entries
        .iter()
        .map(|e| e.class_index as usize + 1)
        .max()
        .unwrap_or(0);
    let present: HashSet<u32> = entries.iter().map(|e| e.class_index).collect();
    if present.len() != class_count {
        return Err(parse_err(
            path,
            0,
            format!(
                "class indices are not dense: {} distinct values for class_count {class_count}",
                present.len()
            ),
        ));
    }
    Ok(DatasetPlan {
        entries,
        class_count,
    })
}
