//! ArcFace classification head with an epoch-dependent additive angular margin.
//!
//! For an embedding `e` and class weight rows `w_j`, both are L2-normalized at
//! use and `cos_j = <w_j/|w_j|, e/|e|>`. Logits are
//!
//! ```text
//! z_j = scale * cos_j                      (j != target)
//! z_y = scale * cos(theta_y + m)           (target, theta_y + m <= pi)
//!     = scale * (cos_y cos m - sin_y sin m)
//! z_y = scale * (cos_y - m sin m)          (target, theta_y + m > pi)
//! ```
//!
//! with `sin_y = sqrt(max(0, 1 - cos_y^2))`, and the loss is softmax
//! cross-entropy against the target. The second target branch keeps the
//! logit monotone in `cos_y` once the shifted angle would wrap past pi.
//!
//! All margins are in radians.

use crate::error::{Error, Result};
use crate::rng::SeededRng;

pub const DEFAULT_SCALE: f64 = 30.0;

/// `m_e = min(m_init + stride * (e - 1), m_max)` for epochs `e >= 1`.
///
/// The sum is rounded to 15 significant digits, so decimal settings give
/// decimal margins (`0.1 + 0.1 * 2` is `0.3`, not `0.30000000000000004`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarginSchedule {
    pub m_init: f64,
    pub stride: f64,
    pub m_max: f64,
}

impl Default for MarginSchedule {
    fn default() -> Self {
        Self {
            m_init: 0.1,
            stride: 0.1,
            m_max: 0.5,
        }
    }
}

impl MarginSchedule {
    pub fn new(m_init: f64, stride: f64, m_max: f64) -> Result<Self> {
        let s = Self {
            m_init,
            stride,
            m_max,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.m_init.is_finite()
            && self.stride.is_finite()
            && self.m_max.is_finite()
            && self.m_init >= 0.0
            && self.stride >= 0.0
            && self.m_max >= self.m_init
            && self.m_max <= std::f64::consts::FRAC_PI_2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "margin schedule needs 0 <= m_init <= m_max <= pi/2 and finite stride >= 0, got ({}, {}, {})",
                self.m_init, self.stride, self.m_max
            )))
        }
    }

    /// A schedule that holds `m` for every epoch.
    pub fn constant(m: f64) -> Self {
        Self {
            m_init: m,
            stride: 0.0,
            m_max: m,
        }
    }

    pub fn at_epoch(&self, epoch: u32) -> Result<f64> {
        margin_at_epoch(self, epoch)
    }
}

pub fn margin_at_epoch(sched: &MarginSchedule, epoch: u32) -> Result<f64> {
    if epoch < 1 {
        return Err(Error::Argument("epochs are numbered from 1".into()));
    }
    let raw = sched.m_init + sched.stride * (epoch - 1) as f64;
    Ok(round_significant(raw).min(sched.m_max))
}

fn round_significant(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.14e}").parse().unwrap_or(x)
}

/// Class prototype matrix (`class_count x embed_dim`, row-major) and logit scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceHead {
    class_count: usize,
    embed_dim: usize,
    pub scale: f64,
    pub weights: Vec<f64>,
}

impl ArcFaceHead {
    pub fn new(
        class_count: usize,
        embed_dim: usize,
        scale: f64,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if class_count < 2 {
            return Err(Error::Config(format!(
                "ArcFace head needs >= 2 classes, got {class_count}"
            )));
        }
        if embed_dim == 0 {
            return Err(Error::Config("ArcFace head needs embed_dim >= 1".into()));
        }
        if !(scale.is_finite() && scale > 0.0) {
            return Err(Error::Config(format!(
                "ArcFace scale must be positive, got {scale}"
            )));
        }
        if weights.len() != class_count * embed_dim {
            return Err(Error::Config(format!(
                "weight buffer has {} values, expected {class_count} x {embed_dim}",
                weights.len()
            )));
        }
        Ok(Self {
            class_count,
            embed_dim,
            scale,
            weights,
        })
    }

    /// Uniform `+-sqrt(6 / (class_count + embed_dim))` initialization.
    pub fn init(class_count: usize, embed_dim: usize, scale: f64, seed: u64) -> Result<Self> {
        let bound = (6.0 / (class_count + embed_dim) as f64).sqrt();
        let mut rng = SeededRng::derive(seed, &[0x6865_6164]);
        let weights = (0..class_count * embed_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self::new(class_count, embed_dim, scale, weights)
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.embed_dim..(class + 1) * self.embed_dim]
    }

    /// Normalizes the weight rows once so many samples can share them.
    pub fn prepare(&self) -> Result<PreparedHead<'_>> {
        let mut unit_rows = Vec::with_capacity(self.weights.len());
        let mut norms = Vec::with_capacity(self.class_count);
        for j in 0..self.class_count {
            let row = self.row(j);
            let norm = row.iter().map(|w| w * w).sum::<f64>().sqrt();
            if !(norm > 0.0 && norm.is_finite()) {
                return Err(Error::Numeric(format!(
                    "ArcFace weight row {j} has norm {norm}"
                )));
            }
            unit_rows.extend(row.iter().map(|w| w / norm));
            norms.push(norm);
        }
        Ok(PreparedHead {
            head: self,
            unit_rows,
            norms,
        })
    }
}

pub struct PreparedHead<'a> {
    head: &'a ArcFaceHead,
    unit_rows: Vec<f64>,
    norms: Vec<f64>,
}

/// Result of one forward/backward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcFaceGrad {
    pub loss: f64,
    pub d_embedding: Vec<f64>,
    pub d_weights: Vec<f64>,
}

struct Forward {
    unit_embedding: Vec<f64>,
    embedding_norm: f64,
    cosines: Vec<f64>,
    logits: Vec<f64>,
    /// d z_target / d cos_target, divided by scale.
    target_slope: f64,
}

fn target_logit_parts(cos: f64, m: f64) -> (f64, f64) {
    let (sin_m, cos_m) = m.sin_cos();
    // theta + m > pi  <=>  cos < cos(pi - m) = -cos m
    if cos < -cos_m {
        (cos - m * sin_m, 1.0)
    } else {
        let sin = (1.0 - cos * cos).max(0.0).sqrt();
        let slope = if sin > 0.0 {
            cos_m + cos * sin_m / sin
        } else {
            cos_m
        };
        (cos * cos_m - sin * sin_m, slope)
    }
}

impl PreparedHead<'_> {
    fn check(&self, embedding: &[f64], target: usize) -> Result<()> {
        if embedding.len() != self.head.embed_dim {
            return Err(Error::Argument(format!(
                "embedding has dim {}, head expects {}",
                embedding.len(),
                self.head.embed_dim
            )));
        }
        if target >= self.head.class_count {
            return Err(Error::Argument(format!(
                "target {target} outside [0, {})",
                self.head.class_count
            )));
        }
        Ok(())
    }

    fn forward(&self, embedding: &[f64], target: usize, m: f64) -> Result<Forward> {
        self.check(embedding, target)?;
        let d = self.head.embed_dim;
        let norm = embedding.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!("embedding norm is {norm}")));
        }
        let unit: Vec<f64> = embedding.iter().map(|x| x / norm).collect();
        let cosines: Vec<f64> = self
            .unit_rows
            .chunks_exact(d)
            .map(|row| row.iter().zip(&unit).map(|(w, x)| w * x).sum())
            .collect();
        let scale = self.head.scale;
        let mut logits: Vec<f64> = cosines.iter().map(|c| scale * c).collect();
        let (phi, slope) = target_logit_parts(cosines[target], m);
        logits[target] = scale * phi;
        if let Some(bad) = logits.iter().position(|z| !z.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit for class {bad}")));
        }
        Ok(Forward {
            unit_embedding: unit,
            embedding_norm: norm,
            cosines,
            logits,
            target_slope: slope,
        })
    }

    pub fn logits(&self, embedding: &[f64], target: usize, m: f64) -> Result<Vec<f64>> {
        Ok(self.forward(embedding, target, m)?.logits)
    }

    pub fn loss(&self, embedding: &[f64], target: usize, m: f64) -> Result<f64> {
        let fwd = self.forward(embedding, target, m)?;
        Ok(cross_entropy(&fwd.logits, target).0)
    }

    /// Loss and gradients; weight gradients are added into `d_weights`
    /// (row-major, same layout as the head weights).
    pub fn backward_into(
        &self,
        embedding: &[f64],
        target: usize,
        m: f64,
        d_weights: &mut [f64],
    ) -> Result<(f64, Vec<f64>)> {
        let d = self.head.embed_dim;
        assert_eq!(d_weights.len(), self.head.weights.len());
        let fwd = self.forward(embedding, target, m)?;
        let (loss, probs) = cross_entropy(&fwd.logits, target);
        if !loss.is_finite() {
            return Err(Error::Numeric("non-finite loss".into()));
        }
        let scale = self.head.scale;
        let x = &fwd.unit_embedding;
        let mut d_unit_dir = vec![0.0; d];
        for j in 0..self.head.class_count {
            let mut dz = probs[j];
            if j == target {
                dz -= 1.0;
            }
            let mut d_cos = scale * dz;
            if j == target {
                d_cos *= fwd.target_slope;
            }
            if d_cos == 0.0 {
                continue;
            }
            let c = fwd.cosines[j];
            let w = &self.unit_rows[j * d..(j + 1) * d];
            let inv_norm = 1.0 / self.norms[j];
            let grad_row = &mut d_weights[j * d..(j + 1) * d];
            for k in 0..d {
                d_unit_dir[k] += d_cos * (w[k] - c * x[k]);
                grad_row[k] += d_cos * (x[k] - c * w[k]) * inv_norm;
            }
        }
        let inv = 1.0 / fwd.embedding_norm;
        d_unit_dir.iter_mut().for_each(|g| *g *= inv);
        Ok((loss, d_unit_dir))
    }
}

/// `(loss, softmax)` with the log-sum-exp max shift.
fn cross_entropy(logits: &[f64], target: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() + max - logits[target];
    (loss.max(0.0), exps.into_iter().map(|e| e / sum).collect())
}

pub fn arcface_logits(
    head: &ArcFaceHead,
    embedding: &[f64],
    target: usize,
    m: f64,
) -> Result<Vec<f64>> {
    head.prepare()?.logits(embedding, target, m)
}

pub fn arcface_loss(head: &ArcFaceHead, embedding: &[f64], target: usize, m: f64) -> Result<f64> {
    head.prepare()?.loss(embedding, target, m)
}

/// Exact gradients of [`arcface_loss`] with respect to the raw embedding and
/// the raw weight rows (normalization Jacobians included).
pub fn arcface_grad(
    head: &ArcFaceHead,
    embedding: &[f64],
    target: usize,
    m: f64,
) -> Result<ArcFaceGrad> {
    let mut d_weights = vec![0.0; head.weights.len()];
    let (loss, d_embedding) =
        head.prepare()?
            .backward_into(embedding, target, m, &mut d_weights)?;
    Ok(ArcFaceGrad {
        loss,
        d_embedding,
        d_weights,
    })
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6, PI};

    fn unit_head() -> ArcFaceHead {
        ArcFaceHead::new(2, 2, 1.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    fn random_instance(seed: u64) -> (ArcFaceHead, Vec<f64>, usize, f64) {
        let mut rng = SeededRng::new(seed);
        let classes = 2 + rng.below(15) as usize;
        let dim = 2 + rng.below(7) as usize;
        let weights = (0..classes * dim).map(|_| rng.normal()).collect();
        let scale = rng.uniform_range(1.0, 8.0);
        let head = ArcFaceHead::new(classes, dim, scale, weights).unwrap();
        let e: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let target = rng.below(classes as u64) as usize;
        let m = rng.uniform_range(0.0, 0.5);
        (head, e, target, m)
    }

    /// Plain cosine-softmax cross-entropy, written without the head code.
    fn cosine_softmax_oracle(head: &ArcFaceHead, e: &[f64], target: usize) -> (f64, Vec<f64>) {
        let d = head.embed_dim();
        let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut z = Vec::new();
        for j in 0..head.class_count() {
            let w = head.row(j);
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let dot: f64 = (0..d).map(|k| w[k] * e[k]).sum();
            z.push(head.scale * dot / (wn * en));
        }
        let zmax = z.iter().cloned().fold(f64::MIN, f64::max);
        let denom: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
        let loss = -((z[target] - zmax).exp() / denom).ln();
        // d loss / d e for unit e: sum_j s (p_j - y_j) (w_j/|w_j| - cos_j e)
        let mut g = vec![0.0; d];
        for j in 0..head.class_count() {
            let p = (z[j] - zmax).exp() / denom - if j == target { 1.0 } else { 0.0 };
            let w = head.row(j);
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos = z[j] / head.scale;
            for k in 0..d {
                g[k] += head.scale * p * (w[k] / wn - cos * e[k]);
            }
        }
        (loss, g)
    }

    #[test]
    fn schedule_table() {
        let s = MarginSchedule::new(0.1, 0.1, 0.5).unwrap();
        assert_eq!(margin_at_epoch(&s, 1).unwrap(), 0.1);
        assert_eq!(margin_at_epoch(&s, 3).unwrap(), 0.3);
        let unit_stride = MarginSchedule::new(0.0, 1.0, 0.5).unwrap();
        assert_eq!(margin_at_epoch(&unit_stride, 2).unwrap(), 0.5);
        assert!(matches!(margin_at_epoch(&s, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn schedule_validation() {
        assert!(MarginSchedule::new(0.3, 0.1, 0.2).is_err());
        assert!(MarginSchedule::new(0.1, 0.1, 2.0).is_err());
        assert!(MarginSchedule::new(-0.1, 0.1, 0.5).is_err());
        assert!(MarginSchedule::new(0.1, f64::NAN, 0.5).is_err());
    }

    #[test]
    fn zero_margin_logits_are_scaled_cosines() {
        let (head, e, target, _) = random_instance(5);
        let z = arcface_logits(&head, &e, target, 0.0).unwrap();
        let en = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (j, zj) in z.iter().enumerate() {
            let w = head.row(j);
            let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let cos: f64 = w.iter().zip(&e).map(|(a, b)| a * b).sum::<f64>() / (wn * en);
            assert!((zj - head.scale * cos).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_evaluated_logits_and_loss() {
        let head = unit_head();
        let z = arcface_logits(&head, &[1.0, 0.0], 0, FRAC_PI_6).unwrap();
        assert!((z[0] - (FRAC_PI_6).cos()).abs() < 1e-12);
        assert!((z[0] - 0.866_025_403_784_438_6).abs() < 1e-12);
        assert_eq!(z[1], 0.0);

        let loss = arcface_loss(&head, &[1.0, 0.0], 0, 0.0).unwrap();
        assert!((loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-12);
        assert!((loss - 0.31326).abs() < 1e-5);

        let orth = arcface_logits(&head, &[0.0, 1.0], 0, 0.0).unwrap();
        assert!(orth[0].abs() < 1e-15);
    }

    #[test]
    fn saturating_scale_drives_loss_to_zero() {
        let head = ArcFaceHead::new(2, 2, 100.0, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(arcface_loss(&head, &[1.0, 0.0], 0, 0.0).unwrap() < 1e-3);
    }

    #[test]
    fn fallback_branch_past_pi() {
        // theta_target = pi - 0.05, m = 0.2 pushes past pi.
        let theta: f64 = PI - 0.05;
        let head = unit_head();
        let e = [theta.cos(), theta.sin()];
        let m = 0.2;
        let z = arcface_logits(&head, &e, 0, m).unwrap();
        let expected = theta.cos() - m * m.sin();
        assert!((z[0] - expected).abs() < 1e-12, "{} vs {expected}", z[0]);
        // Just inside the monotone regime the angular form is used.
        let theta: f64 = PI - 0.25;
        let e = [theta.cos(), theta.sin()];
        let z = arcface_logits(&head, &e, 0, m).unwrap();
        assert!((z[0] - (theta + m).cos()).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_row_is_named() {
        let head = ArcFaceHead::new(3, 2, 1.0, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let err = arcface_loss(&head, &[1.0, 0.0], 0, 0.1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 1"), "{err}");
    }

    #[test]
    fn zero_margin_matches_cosine_softmax() {
        for seed in 0..50 {
            let (head, mut e, target, _) = random_instance(seed);
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            e.iter_mut().for_each(|x| *x /= n);
            let (loss_o, grad_o) = cosine_softmax_oracle(&head, &e, target);
            let g = arcface_grad(&head, &e, target, 0.0).unwrap();
            assert!((g.loss - loss_o).abs() <= 1e-12, "seed {seed}");
            for (a, b) in g.d_embedding.iter().zip(&grad_o) {
                assert!((a - b).abs() < 1e-12, "seed {seed}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn unit_embedding_gradient_is_tangent() {
        for seed in 0..20 {
            let (head, mut e, target, m) = random_instance(seed);
            let n = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            e.iter_mut().for_each(|x| *x /= n);
            let g = arcface_grad(&head, &e, target, m).unwrap();
            let dot: f64 = g.d_embedding.iter().zip(&e).map(|(a, b)| a * b).sum();
            assert!(dot.abs() < 1e-12, "seed {seed}: {dot}");
        }
    }

    #[test]
    fn finite_differences_agree() {
        let h = 1e-6;
        for seed in 100..120 {
            let (head, e, target, m) = random_instance(seed);
            let g = arcface_grad(&head, &e, target, m).unwrap();
            let mut num = Vec::new();
            for k in 0..e.len() {
                let mut p = e.clone();
                p[k] += h;
                let mut q = e.clone();
                q[k] -= h;
                num.push(
                    (arcface_loss(&head, &p, target, m).unwrap()
                        - arcface_loss(&head, &q, target, m).unwrap())
                        / (2.0 * h),
                );
            }
            for k in 0..head.weights.len() {
                let mut hp = head.clone();
                hp.weights[k] += h;
                let mut hq = head.clone();
                hq.weights[k] -= h;
                num.push(
                    (arcface_loss(&hp, &e, target, m).unwrap()
                        - arcface_loss(&hq, &e, target, m).unwrap())
                        / (2.0 * h),
                );
            }
            let ana: Vec<f64> = g.d_embedding.iter().chain(&g.d_weights).copied().collect();
            let diff = ana
                .iter()
                .zip(&num)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = ana
                .iter()
                .map(|a| a * a)
                .sum::<f64>()
                .sqrt()
                .max(num.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(diff / scale < 1e-5, "seed {seed}: rel {}", diff / scale);
        }
    }

    #[test]
    fn gradient_at_exact_alignment_is_finite() {
        let head = unit_head();
        let g = arcface_grad(&head, &[1.0, 0.0], 0, 0.3).unwrap();
        assert!(g
            .d_embedding
            .iter()
            .chain(&g.d_weights)
            .all(|v| v.is_finite()));
    }

    #[test]
    fn larger_margin_never_lowers_loss() {
        for seed in 0..200 {
            let (head, e, target, m) = random_instance(seed);
            let prepared = head.prepare().unwrap();
            let z = prepared.logits(&e, target, 0.0).unwrap();
            let theta = (z[target] / head.scale).clamp(-1.0, 1.0).acos();
            let m2 = (m + 0.2).min(FRAC_PI_2);
            if theta + m2 > PI {
                continue;
            }
            let l1 = prepared.loss(&e, target, m).unwrap();
            let l2 = prepared.loss(&e, target, m2).unwrap();
            assert!(l2 >= l1, "seed {seed}: {l2} < {l1}");
        }
    }
}
