//! Trainable MLP encoder: backbone -> optional projection -> dropout neck ->
//! L2 normalization.
//!
//! The backbone is a stack of affine layers each followed by the configured
//! activation (tanh by default). The projection layer is a plain affine map
//! owned by the backbone, so it shares the backbone's learning rate and
//! freeze state. The neck is an affine map to `embed_dim` followed by
//! inverted dropout in train mode. Every output is unit length.
//!
//! Weights are initialized uniform in `+-sqrt(6 / (fan_in + fan_out))`,
//! biases at zero, layer by layer in forward order from one seeded stream.

use crate::error::{Error, Result};
use crate::optim::ParamGroup;
use crate::rng::SeededRng;

/// Hard upper bound on embedding width.
pub const MAX_EMBED_DIM: usize = 64;

const INIT_STREAM: u64 = 0x696e_6974;
const DROPOUT_STREAM: u64 = 0x6472_6f70;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    fn slope_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(format!(
                "unknown activation {other:?} (expected tanh or relu)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub dim_in: usize,
    pub backbone_widths: Vec<usize>,
    pub with_projection: bool,
    pub projection_width: usize,
    pub embed_dim: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim_in: 32,
            backbone_widths: vec![128, 128],
            with_projection: false,
            projection_width: 128,
            embed_dim: 64,
            dropout_rate: 0.2,
            activation: Activation::Tanh,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim > MAX_EMBED_DIM {
            return Err(Error::Config(format!(
                "embed_dim must be in [1, {MAX_EMBED_DIM}], got {}",
                self.embed_dim
            )));
        }
        if self.dim_in == 0 {
            return Err(Error::Config("dim_in must be >= 1".into()));
        }
        if self.backbone_widths.is_empty() || self.backbone_widths.contains(&0) {
            return Err(Error::Config(format!(
                "backbone needs at least one layer and all widths >= 1, got {:?}",
                self.backbone_widths
            )));
        }
        if self.with_projection && self.projection_width == 0 {
            return Err(Error::Config("projection_width must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn last_backbone_width(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.dim_in)
    }

    pub fn neck_input_width(&self) -> usize {
        if self.with_projection {
            self.projection_width
        } else {
            self.last_backbone_width()
        }
    }

    /// Total number of scalar parameters implied by the configuration.
    pub fn parameter_count(&self) -> usize {
        let mut fan_in = self.dim_in;
        let mut total = 0;
        for &w in &self.backbone_widths {
            total += w * fan_in + w;
            fan_in = w;
        }
        if self.with_projection {
            total += self.projection_width * fan_in + self.projection_width;
        }
        total + self.embed_dim * self.neck_input_width() + self.embed_dim
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major (`out x in`).
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weights: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weights = (0..fan_in * fan_out)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self {
            fan_in,
            fan_out,
            weights,
            bias: vec![0.0; fan_out],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.fan_in)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    /// Accumulates `dW += dy x^T`, `db += dy` into `grad` and returns `W^T dy`
    /// when `want_input` is set.
    fn backprop(&self, x: &[f64], dy: &[f64], grad: &mut Dense, want_input: bool) -> Vec<f64> {
        let mut dx = if want_input {
            vec![0.0; self.fan_in]
        } else {
            Vec::new()
        };
        for (o, &g) in dy.iter().enumerate() {
            grad.bias[o] += g;
            if g == 0.0 {
                continue;
            }
            let row = o * self.fan_in;
            let grow = &mut grad.weights[row..row + self.fan_in];
            for (gw, xv) in grow.iter_mut().zip(x) {
                *gw += g * xv;
            }
            if want_input {
                for (d, w) in dx.iter_mut().zip(&self.weights[row..row + self.fan_in]) {
                    *d += g * w;
                }
            }
        }
        dx
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn scale(&mut self, factor: f64) {
        self.weights.iter_mut().for_each(|w| *w *= factor);
        self.bias.iter_mut().for_each(|b| *b *= factor);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Identifies one parameter tensor for optimizers and serializers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockInfo {
    pub name: String,
    pub group: ParamGroup,
    pub is_bias: bool,
}

#[derive(Debug, Clone)]
pub struct EncoderState {
    config: EncoderConfig,
    pub(crate) backbone: Vec<Dense>,
    pub(crate) projection: Option<Dense>,
    pub(crate) neck: Dense,
    pub frozen_backbone: bool,
    generation: u64,
}

/// Intermediate values recorded by [`EncoderState::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    /// Input to each backbone layer followed by the last backbone output.
    backbone_io: Vec<Vec<f64>>,
    projection_out: Option<Vec<f64>>,
    /// Neck output before dropout.
    pub pre_dropout: Vec<f64>,
    /// Per-unit dropout factor (0 or 1/(1-rate)); empty in eval mode.
    mask: Vec<f64>,
    /// Neck output after dropout, before normalization.
    pub pre_norm: Vec<f64>,
    norm: f64,
    pub embedding: Vec<f64>,
}

/// Parameter gradients with the same layout as [`EncoderState`].
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub backbone: Vec<Dense>,
    pub projection: Option<Dense>,
    pub neck: Dense,
}

impl EncoderGrads {
    pub fn zeros_like(state: &EncoderState) -> Self {
        Self {
            backbone: state
                .backbone
                .iter()
                .map(|l| Dense::zeros(l.fan_in, l.fan_out))
                .collect(),
            projection: state
                .projection
                .as_ref()
                .map(|l| Dense::zeros(l.fan_in, l.fan_out)),
            neck: Dense::zeros(state.neck.fan_in, state.neck.fan_out),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.backbone.iter_mut().for_each(|l| l.scale(factor));
        if let Some(p) = self.projection.as_mut() {
            p.scale(factor);
        }
        self.neck.scale(factor);
    }

    /// Gradient tensors in canonical block order (see [`EncoderState::blocks`]).
    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self
            .backbone
            .iter()
            .chain(&self.projection)
            .chain(std::iter::once(&self.neck))
        {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Equality over configuration and parameters; the cache generation is
/// bookkeeping and does not participate.
impl PartialEq for EncoderState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.backbone == other.backbone
            && self.projection == other.projection
            && self.neck == other.neck
            && self.frozen_backbone == other.frozen_backbone
    }
}

impl EncoderState {
    pub fn init(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = SeededRng::derive(config.seed, &[INIT_STREAM]);
        let mut fan_in = config.dim_in;
        let mut backbone = Vec::with_capacity(config.backbone_widths.len());
        for &w in &config.backbone_widths {
            backbone.push(Dense::init(fan_in, w, &mut rng));
            fan_in = w;
        }
        let projection = config
            .with_projection
            .then(|| Dense::init(fan_in, config.projection_width, &mut rng));
        let neck = Dense::init(config.neck_input_width(), config.embed_dim, &mut rng);
        Ok(Self {
            config: config.clone(),
            backbone,
            projection,
            neck,
            frozen_backbone: false,
            generation: 0,
        })
    }

    /// Rebuilds a state from explicit layers, checking shapes against `config`.
    pub fn from_parts(
        config: EncoderConfig,
        backbone: Vec<Dense>,
        projection: Option<Dense>,
        neck: Dense,
        frozen_backbone: bool,
    ) -> Result<Self> {
        config.validate()?;
        let shapes_ok = {
            let mut fan_in = config.dim_in;
            let mut ok = backbone.len() == config.backbone_widths.len();
            for (l, &w) in backbone.iter().zip(&config.backbone_widths) {
                ok &= l.fan_in == fan_in && l.fan_out == w;
                fan_in = w;
            }
            ok &= match (&projection, config.with_projection) {
                (Some(p), true) => p.fan_in == fan_in && p.fan_out == config.projection_width,
                (None, false) => true,
                _ => false,
            };
            ok && neck.fan_in == config.neck_input_width() && neck.fan_out == config.embed_dim
        };
        let buffers_ok = backbone
            .iter()
            .chain(&projection)
            .chain(std::iter::once(&neck))
            .all(|l| l.weights.len() == l.fan_in * l.fan_out && l.bias.len() == l.fan_out);
        if !(shapes_ok && buffers_ok) {
            return Err(Error::Config(
                "layer shapes do not match encoder config".into(),
            ));
        }
        Ok(Self {
            config,
            backbone,
            projection,
            neck,
            frozen_backbone,
            generation: 0,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn has_projection(&self) -> bool {
        self.projection.is_some()
    }

    pub fn parameter_count(&self) -> usize {
        self.backbone
            .iter()
            .chain(&self.projection)
            .map(Dense::len)
            .sum::<usize>()
            + self.neck.len()
    }

    fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone
            .iter()
            .chain(&self.projection)
            .chain(std::iter::once(&self.neck))
    }

    /// Block descriptors in canonical order: each backbone layer (weights,
    /// bias), then the projection if present, then the neck.
    pub fn block_infos(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        let mut push = |name: String, group| {
            out.push(BlockInfo {
                name: format!("{name}.weight"),
                group,
                is_bias: false,
            });
            out.push(BlockInfo {
                name: format!("{name}.bias"),
                group,
                is_bias: true,
            });
        };
        for i in 0..self.backbone.len() {
            push(format!("backbone.{i}"), ParamGroup::Backbone);
        }
        if self.projection.is_some() {
            push("projection".into(), ParamGroup::Backbone);
        }
        push("neck".into(), ParamGroup::Head);
        out
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in self.layers() {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    /// Mutable parameter blocks in canonical order. Invalidates outstanding
    /// forward caches.
    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        self.generation += 1;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in self
            .backbone
            .iter_mut()
            .chain(self.projection.as_mut())
            .chain(std::iter::once(&mut self.neck))
        {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }

    pub fn forward(&self, x: &[f64], mode: Mode, dropout_seed: u64) -> Result<ForwardCache> {
        if x.len() != self.config.dim_in {
            return Err(Error::Argument(format!(
                "input has dim {}, encoder expects {}",
                x.len(),
                self.config.dim_in
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite encoder input".into()));
        }
        let act = self.config.activation;
        let mut backbone_io = Vec::with_capacity(self.backbone.len() + 1);
        backbone_io.push(x.to_vec());
        for layer in &self.backbone {
            let mut h = layer.apply(backbone_io.last().unwrap());
            h.iter_mut().for_each(|v| *v = act.apply(*v));
            backbone_io.push(h);
        }
        let projection_out = self
            .projection
            .as_ref()
            .map(|p| p.apply(backbone_io.last().unwrap()));
        let neck_in = projection_out
            .as_ref()
            .unwrap_or_else(|| backbone_io.last().unwrap());
        let pre_dropout = self.neck.apply(neck_in);

        let rate = self.config.dropout_rate;
        let (mask, pre_norm) = if mode == Mode::Train && rate > 0.0 {
            let mut rng = SeededRng::derive(dropout_seed, &[DROPOUT_STREAM]);
            let keep = 1.0 / (1.0 - rate);
            let mask: Vec<f64> = (0..pre_dropout.len())
                .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                .collect();
            let dropped = pre_dropout.iter().zip(&mask).map(|(z, m)| z * m).collect();
            (mask, dropped)
        } else {
            (Vec::new(), pre_dropout.clone())
        };

        let norm = l2_norm(&pre_norm);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(Error::Numeric(format!(
                "pre-normalization embedding has norm {norm}"
            )));
        }
        let embedding = pre_norm.iter().map(|v| v / norm).collect();
        Ok(ForwardCache {
            generation: self.generation,
            backbone_io,
            projection_out,
            pre_dropout,
            mask,
            pre_norm,
            norm,
            embedding,
        })
    }

    /// Eval-mode unit embedding.
    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(x, Mode::Eval, 0)?.embedding)
    }

    pub fn backward(&self, cache: &ForwardCache, d_embedding: &[f64]) -> Result<EncoderGrads> {
        let mut grads = EncoderGrads::zeros_like(self);
        self.backward_into(cache, d_embedding, &mut grads)?;
        Ok(grads)
    }

    /// Adds the parameter gradients for one sample into `grads`. Backbone
    /// (and projection) gradients stay untouched while the backbone is frozen.
    pub fn backward_into(
        &self,
        cache: &ForwardCache,
        d_embedding: &[f64],
        grads: &mut EncoderGrads,
    ) -> Result<()> {
        if cache.generation != self.generation {
            return Err(Error::Contract(format!(
                "forward cache from parameter generation {} used after update to {}",
                cache.generation, self.generation
            )));
        }
        if d_embedding.len() != self.config.embed_dim {
            return Err(Error::Argument(format!(
                "d_embedding has dim {}, expected {}",
                d_embedding.len(),
                self.config.embed_dim
            )));
        }
        // Through the normalization: (I - e e^T) g / |z|
        let e = &cache.embedding;
        let radial: f64 = e.iter().zip(d_embedding).map(|(a, b)| a * b).sum();
        let mut dz: Vec<f64> = d_embedding
            .iter()
            .zip(e)
            .map(|(g, ev)| (g - ev * radial) / cache.norm)
            .collect();
        if !cache.mask.is_empty() {
            dz.iter_mut().zip(&cache.mask).for_each(|(g, m)| *g *= m);
        }

        let last = cache.backbone_io.last().unwrap();
        let neck_in = cache.projection_out.as_ref().unwrap_or(last);
        let frozen = self.frozen_backbone;
        let mut dh = self.neck.backprop(neck_in, &dz, &mut grads.neck, !frozen);
        if frozen {
            return Ok(());
        }
        if let (Some(p), Some(gp)) = (self.projection.as_ref(), grads.projection.as_mut()) {
            dh = p.backprop(last, &dh, gp, true);
        }
        let act = self.config.activation;
        for (i, layer) in self.backbone.iter().enumerate().rev() {
            let out = &cache.backbone_io[i + 1];
            dh.iter_mut()
                .zip(out)
                .for_each(|(g, y)| *g *= act.slope_from_output(*y));
            dh = layer.backprop(&cache.backbone_io[i], &dh, &mut grads.backbone[i], i > 0);
        }
        Ok(())
    }
}

/// Anything that maps raw feature vectors to unit embeddings.
pub trait EmbeddingProvider: Sync {
    fn input_dim(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn embed(&self, x: &[f64]) -> Result<Vec<f64>>;
}

impl EmbeddingProvider for EncoderState {
    fn input_dim(&self) -> usize {
        self.config.dim_in
    }

    fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    fn embed(&self, x: &[f64]) -> Result<Vec<f64>> {
        EncoderState::embed(self, x)
    }
}

#[cfg(test)]
#[allow(clippy::needless_range_loop)]
mod tests {
    use super::*;

    fn small_config(with_projection: bool) -> EncoderConfig {
        EncoderConfig {
            dim_in: 6,
            backbone_widths: vec![7, 5],
            with_projection,
            projection_width: 4,
            embed_dim: 3,
            dropout_rate: 0.2,
            activation: Activation::Tanh,
            seed: 21,
        }
    }

    fn input(seed: u64, n: usize) -> Vec<f64> {
        let mut rng = SeededRng::new(seed);
        (0..n).map(|_| rng.normal()).collect()
    }

    #[test]
    fn init_is_deterministic_and_respects_projection_flag() {
        let a = EncoderState::init(&small_config(true)).unwrap();
        let b = EncoderState::init(&small_config(true)).unwrap();
        assert_eq!(a, b);
        assert!(a.has_projection());
        let c = EncoderState::init(&small_config(false)).unwrap();
        assert!(!c.has_projection());
        assert_eq!(c.neck.fan_in, 5);
        assert_eq!(a.neck.fan_in, 4);
    }

    #[test]
    fn embed_dim_over_limit_rejected() {
        let cfg = EncoderConfig {
            embed_dim: 65,
            ..small_config(false)
        };
        assert!(matches!(EncoderState::init(&cfg), Err(Error::Config(_))));
        let cfg = EncoderConfig {
            embed_dim: 64,
            ..small_config(false)
        };
        assert!(EncoderState::init(&cfg).is_ok());
    }

    #[test]
    fn parameter_count_bookkeeping() {
        let with = small_config(true);
        let without = small_config(false);
        let (a, b) = (
            EncoderState::init(&with).unwrap(),
            EncoderState::init(&without).unwrap(),
        );
        assert_eq!(a.parameter_count(), with.parameter_count());
        assert_eq!(b.parameter_count(), without.parameter_count());
        // projection W + b, and the neck's fan-in changes from 4 to 5
        let last = 5;
        let pw = with.projection_width;
        let expected_delta =
            (pw * last + pw) as i64 + (with.embed_dim * pw) as i64 - (with.embed_dim * last) as i64;
        assert_eq!(
            a.parameter_count() as i64 - b.parameter_count() as i64,
            expected_delta
        );
        assert_eq!(a.flatten().len(), a.parameter_count());
    }

    #[test]
    fn outputs_are_unit_length() {
        let s = EncoderState::init(&small_config(true)).unwrap();
        for seed in 0..20 {
            let x = input(seed, 6);
            for mode in [Mode::Eval, Mode::Train] {
                let c = s.forward(&x, mode, seed).unwrap();
                assert!((l2_norm(&c.embedding) - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_rate_dropout_matches_eval() {
        let cfg = EncoderConfig {
            dropout_rate: 0.0,
            ..small_config(false)
        };
        let s = EncoderState::init(&cfg).unwrap();
        let x = input(3, 6);
        let t = s.forward(&x, Mode::Train, 99).unwrap();
        let e = s.forward(&x, Mode::Eval, 0).unwrap();
        assert_eq!(t.embedding, e.embedding);
    }

    #[test]
    fn forward_is_deterministic() {
        let s = EncoderState::init(&small_config(true)).unwrap();
        let x = input(4, 6);
        let a = s.forward(&x, Mode::Train, 5).unwrap();
        let b = s.forward(&x, Mode::Train, 5).unwrap();
        assert_eq!(a.embedding, b.embedding);
    }

    #[test]
    fn inverted_dropout_preserves_expectation() {
        let cfg = EncoderConfig {
            embed_dim: 8,
            ..small_config(false)
        };
        let s = EncoderState::init(&cfg).unwrap();
        let x = input(8, 6);
        let clean = s.forward(&x, Mode::Eval, 0).unwrap().pre_norm;
        let trials = 20_000;
        let mut mean = vec![0.0; clean.len()];
        for seed in 0..trials {
            let c = s.forward(&x, Mode::Train, seed).unwrap();
            mean.iter_mut()
                .zip(&c.pre_norm)
                .for_each(|(m, v)| *m += v / trials as f64);
        }
        for (m, c) in mean.iter().zip(&clean) {
            assert!((m - c).abs() <= 0.02 * c.abs(), "{m} vs {c}");
        }
    }

    fn fd_check(cfg: &EncoderConfig, frozen: bool) {
        let mut s = EncoderState::init(cfg).unwrap();
        s.frozen_backbone = frozen;
        let x = input(31, cfg.dim_in);
        let g_out = input(32, cfg.embed_dim);
        let objective = |s: &EncoderState| -> f64 {
            let c = s.forward(&x, Mode::Train, 77).unwrap();
            c.embedding.iter().zip(&g_out).map(|(a, b)| a * b).sum()
        };
        let cache = s.forward(&x, Mode::Train, 77).unwrap();
        let analytic = s.backward(&cache, &g_out).unwrap().flatten();
        let infos = s.block_infos();
        let h = 1e-6;
        let mut numeric = Vec::new();
        let n_blocks = s.blocks().len();
        for b in 0..n_blocks {
            let len = s.blocks()[b].len();
            for k in 0..len {
                let mut p = s.clone();
                p.blocks_mut()[b][k] += h;
                let mut q = s.clone();
                q.blocks_mut()[b][k] -= h;
                let fd = (objective(&p) - objective(&q)) / (2.0 * h);
                numeric.push(if frozen && infos[b].group == ParamGroup::Backbone {
                    0.0
                } else {
                    fd
                });
            }
        }
        let diff = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = l2_norm(&analytic).max(l2_norm(&numeric));
        assert!(diff / scale < 1e-5, "relative error {}", diff / scale);
    }

    #[test]
    fn finite_differences_agree() {
        fd_check(&small_config(true), false);
        fd_check(&small_config(false), false);
        fd_check(
            &EncoderConfig {
                dropout_rate: 0.0,
                ..small_config(true)
            },
            false,
        );
    }

    #[test]
    fn frozen_backbone_grads_are_zero() {
        let mut s = EncoderState::init(&small_config(true)).unwrap();
        s.frozen_backbone = true;
        let cache = s.forward(&input(1, 6), Mode::Train, 1).unwrap();
        let g = s.backward(&cache, &input(2, 3)).unwrap();
        for (info, block) in s.block_infos().iter().zip(g.blocks()) {
            if info.group == ParamGroup::Backbone {
                assert!(block.iter().all(|v| *v == 0.0), "{}", info.name);
            }
        }
        assert!(g.neck.weights.iter().any(|v| *v != 0.0));
        fd_check(&small_config(true), true);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_grads() {
        let s = EncoderState::init(&small_config(true)).unwrap();
        let cache = s.forward(&input(1, 6), Mode::Train, 1).unwrap();
        let g = s.backward(&cache, &[0.0; 3]).unwrap();
        assert!(g.flatten().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut s = EncoderState::init(&small_config(false)).unwrap();
        let cache = s.forward(&input(1, 6), Mode::Eval, 0).unwrap();
        s.blocks_mut()[0][0] += 0.1;
        assert!(matches!(
            s.backward(&cache, &[1.0, 0.0, 0.0]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn zero_embedding_is_numeric_error() {
        let mut s = EncoderState::init(&small_config(false)).unwrap();
        for b in s.blocks_mut().into_iter().rev().take(2) {
            b.iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(matches!(s.embed(&input(1, 6)), Err(Error::Numeric(_))));
    }
}
