//! The cascaded interaction network.
//!
//! ```text
//! image -> encoder (5 levels, strides 2..32) -> 1x1 unifiers -> E_1..E_5
//!       -> q interaction stages -> D_1..D_5
//!       -> top-down decoder -> final head (input resolution)
//!                           -> side heads (decoder levels 2..M+1)
//! ```
//!
//! Each interaction stage owns one [`Gaa`] that is shared by every target
//! level and every source level inside that stage.

use std::collections::BTreeSet;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{gaa_apply, AttentionKind, Gaa, DEFAULT_REDUCTION, DEFAULT_SPATIAL_KERNEL};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::params::{scaled_kaiming_uniform, ParamId, ParamStore};
use crate::resample::ResizeSpec;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Number of pyramid levels.
pub const LEVELS: usize = 5;
/// Channel plan of the tiny encoder, finest level first.
pub const TINY_ENCODER_CHANNELS: [usize; LEVELS] = [16, 32, 64, 64, 64];

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum EncoderKind {
    #[default]
    Tiny,
    /// Tiny-encoder layout with weights read from a checkpoint file's
    /// `encoder.*` entries.
    ExternalWeights(PathBuf),
}

/// For each target level `j` (1-based), the contiguous range `k..=m` of
/// source levels that feed it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionWiring {
    ranges: Vec<(usize, usize)>,
}

impl InteractionWiring {
    pub fn new(ranges: Vec<(usize, usize)>) -> Result<Self> {
        let w = InteractionWiring { ranges };
        w.validate()?;
        Ok(w)
    }

    /// Each level fuses itself and every coarser level (`k = j`, `m = 5`).
    pub fn coarser() -> Self {
        InteractionWiring {
            ranges: (1..=LEVELS).map(|j| (j, LEVELS)).collect(),
        }
    }

    /// Each level only sees itself (`k = m = j`).
    pub fn self_only() -> Self {
        InteractionWiring {
            ranges: (1..=LEVELS).map(|j| (j, j)).collect(),
        }
    }

    /// Every level sees every level.
    pub fn all() -> Self {
        InteractionWiring {
            ranges: vec![(1, LEVELS); LEVELS],
        }
    }

    pub fn ranges(&self) -> &[(usize, usize)] {
        &self.ranges
    }

    pub fn validate(&self) -> Result<()> {
        if self.ranges.len() != LEVELS {
            return Err(Error::Config(format!(
                "wiring must list {LEVELS} target levels, got {}",
                self.ranges.len()
            )));
        }
        for (j, &(k, m)) in self.ranges.iter().enumerate() {
            if !(1 <= k && k <= m && m <= LEVELS) {
                return Err(Error::Config(format!(
                    "wiring for level {} is {k}..{m}; need 1 <= k <= m <= {LEVELS}",
                    j + 1
                )));
            }
        }
        Ok(())
    }

    /// `coarser`, `self`, `all`, or five `k-m` ranges separated by commas.
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "coarser" => Ok(Self::coarser()),
            "self" => Ok(Self::self_only()),
            "all" => Ok(Self::all()),
            custom => {
                let ranges = custom
                    .split(',')
                    .map(|r| {
                        let (k, m) = r
                            .trim()
                            .split_once('-')
                            .ok_or_else(|| Error::Config(format!("bad wiring range {r:?}")))?;
                        let parse = |v: &str| {
                            v.trim()
                                .parse::<usize>()
                                .map_err(|_| Error::Config(format!("bad wiring range {r:?}")))
                        };
                        Ok((parse(k)?, parse(m)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                Self::new(ranges)
            }
        }
    }

    pub fn describe(&self) -> String {
        if *self == Self::coarser() {
            "coarser".into()
        } else if *self == Self::self_only() {
            "self".into()
        } else if *self == Self::all() {
            "all".into()
        } else {
            self.ranges
                .iter()
                .map(|(k, m)| format!("{k}-{m}"))
                .collect::<Vec<_>>()
                .join(",")
        }
    }
}

impl Default for InteractionWiring {
    fn default() -> Self {
        Self::coarser()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub unified_channels: usize,
    pub cascade_depth: usize,
    pub encoder: EncoderKind,
    pub side_output_count: usize,
    pub input_size: usize,
    pub attention: AttentionKind,
    pub attention_reduction: usize,
    pub spatial_kernel: usize,
    pub wiring: InteractionWiring,
    /// Seed for weight initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            unified_channels: 64,
            cascade_depth: 2,
            encoder: EncoderKind::Tiny,
            side_output_count: 4,
            input_size: 64,
            attention: AttentionKind::Gaa,
            attention_reduction: DEFAULT_REDUCTION,
            spatial_kernel: DEFAULT_SPATIAL_KERNEL,
            wiring: InteractionWiring::coarser(),
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unified_channels == 0 {
            return Err(Error::Config("unified_channels must be positive".into()));
        }
        if self.side_output_count > LEVELS - 1 {
            return Err(Error::Config(format!(
                "side_output_count {} exceeds {}",
                self.side_output_count,
                LEVELS - 1
            )));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be a positive multiple of 32",
                self.input_size
            )));
        }
        self.wiring.validate()
    }
}

/// A convolution layer: weight, optional bias, stride, padding.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl ConvLayer {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_gain(store, name, shape, stride, 1.0, rng)
    }

    fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        shape: [usize; 4],
        stride: usize,
        gain: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.register(format!("{name}.weight"), scaled_kaiming_uniform(shape, gain, rng));
        let bias = store.register(format!("{name}.bias"), Tensor::zeros([shape[0]]));
        ConvLayer {
            weight,
            bias: Some(bias),
            stride,
            padding: shape[2] / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    conv: ConvLayer,
    down: ConvLayer,
}

/// One cascaded interaction stage.
#[derive(Clone, Debug)]
pub struct InteractionStage {
    pub gaa: Gaa,
    /// 3x3 fusion convolution per target level.
    pub fusion: Vec<ConvLayer>,
}

/// One application of a stage's attention block, as seen by
/// [`Cinet::interaction_stage_traced`]. Levels are 1-based.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GaaUse {
    pub target: usize,
    pub source: usize,
    /// Spatial size the block ran at.
    pub size: (usize, usize),
    /// Parameters read during this application.
    pub params: BTreeSet<ParamId>,
}

/// Ordered pyramid of per-level features, finest first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeaturePyramid {
    pub levels: Vec<Var>,
}

/// Logits produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[N, 1, H, W]` at input resolution.
    pub final_logits: Var,
    /// `[N, 1, H/2^(m+1), W/2^(m+1)]` for side output `m = 1..M`.
    pub side_logits: Vec<Var>,
}

/// The network: structure plus its parameters.
#[derive(Clone, Debug)]
pub struct Cinet<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    encoder: Vec<EncoderLevel>,
    unifiers: Vec<ConvLayer>,
    stages: Vec<InteractionStage>,
    decoder: Vec<ConvLayer>,
    final_head: ConvLayer,
    side_heads: Vec<ConvLayer>,
}

impl<T: Scalar> Cinet<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let cu = config.unified_channels;

        let mut encoder = Vec::with_capacity(LEVELS);
        let mut cin = 3;
        for (i, &c) in TINY_ENCODER_CHANNELS.iter().enumerate() {
            let conv = ConvLayer::new(&mut store, &format!("encoder.{}.conv", i + 1), [c, cin, 3, 3], 1, &mut rng);
            let down = ConvLayer::new(&mut store, &format!("encoder.{}.down", i + 1), [c, c, 3, 3], 2, &mut rng);
            encoder.push(EncoderLevel { conv, down });
            cin = c;
        }

        let unifiers = TINY_ENCODER_CHANNELS
            .iter()
            .enumerate()
            .map(|(i, &c)| ConvLayer::new(&mut store, &format!("unify.{}", i + 1), [cu, c, 1, 1], 1, &mut rng))
            .collect();

        let mut stages = Vec::with_capacity(config.cascade_depth);
        for s in 1..=config.cascade_depth {
            let gaa = Gaa::with_hyperparams(
                &mut store,
                &format!("stage.{s}.gaa"),
                cu,
                config.attention,
                config.attention_reduction,
                config.spatial_kernel,
                &mut rng,
            )?;
            // The fused input sums `m - k + 1` attended sources, each about
            // twice its input at init; scale the conv down so stacked stages
            // keep activations (and the logits) bounded.
            let fusion = config
                .wiring
                .ranges()
                .iter()
                .enumerate()
                .map(|(j, &(k, m))| {
                    let gain = 1.0 / (2 * (m - k + 1)) as f64;
                    let name = format!("stage.{s}.fuse.{}", j + 1);
                    ConvLayer::with_gain(&mut store, &name, [cu, cu, 3, 3], 1, gain, &mut rng)
                })
                .collect();
            stages.push(InteractionStage { gaa, fusion });
        }

        let decoder = (1..=LEVELS)
            .map(|i| ConvLayer::new(&mut store, &format!("decoder.{i}"), [cu, cu, 3, 3], 1, &mut rng))
            .collect();
        let final_head = ConvLayer::new(&mut store, "head.final", [1, cu, 1, 1], 1, &mut rng);
        let side_heads = (1..=config.side_output_count)
            .map(|m| ConvLayer::new(&mut store, &format!("head.side.{m}"), [1, cu, 1, 1], 1, &mut rng))
            .collect();

        let mut model = Cinet {
            config,
            store,
            encoder,
            unifiers,
            stages,
            decoder,
            final_head,
            side_heads,
        };
        if let EncoderKind::ExternalWeights(path) = &model.config.encoder {
            let entries = checkpoint::read_file(path)?;
            checkpoint::load_matching(&mut model.store, &entries, "encoder.")?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn stages(&self) -> &[InteractionStage] {
        &self.stages
    }

    /// Fresh graph with this model's parameters bound.
    pub fn graph(&self) -> Graph<T> {
        self.store.graph()
    }

    /// Scalar count of the weights in the 1x1 unifier convolutions.
    pub fn unifier_param_count(&self) -> usize {
        self.store.scalar_count_with_prefix("unify.")
    }

    /// Scalar count of one interaction stage (shared attention + fusion convs).
    pub fn stage_param_count(&self, stage: usize) -> usize {
        self.store.scalar_count_with_prefix(&format!("stage.{stage}."))
    }

    /// Bottom-up features at strides 2, 4, 8, 16, 32 with native channel counts.
    pub fn encode(&self, g: &mut Graph<T>, image: Var) -> Result<FeaturePyramid> {
        let [_, c, h, w] = g.value(image).dims4()?;
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 image channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::InvalidInput(format!(
                "image size {h}x{w} must be divisible by 32"
            )));
        }
        let mut levels = Vec::with_capacity(LEVELS);
        let mut x = image;
        for level in &self.encoder {
            let y = level.conv.forward(g, x)?;
            let y = g.relu(y);
            let y = level.down.forward(g, y)?;
            x = g.relu(y);
            levels.push(x);
        }
        Ok(FeaturePyramid { levels })
    }

    /// Map every level to `unified_channels` with its own 1x1 convolution.
    pub fn unify_channels(&self, g: &mut Graph<T>, raw: &FeaturePyramid) -> Result<FeaturePyramid> {
        if raw.levels.len() != LEVELS {
            return Err(Error::shape(format!("pyramid must have {LEVELS} levels")));
        }
        let levels = raw
            .levels
            .iter()
            .zip(&self.unifiers)
            .map(|(&x, u)| u.forward(g, x))
            .collect::<Result<_>>()?;
        Ok(FeaturePyramid { levels })
    }

    /// One stage of cross-scale fusion. Each target level sums its resized,
    /// attention-refined sources, then applies its 3x3 fusion conv and ReLU.
    pub fn interaction_stage(
        &self,
        g: &mut Graph<T>,
        pyramid: &FeaturePyramid,
        stage: &InteractionStage,
    ) -> Result<FeaturePyramid> {
        self.interaction_stage_traced(g, pyramid, stage, &mut Vec::new())
    }

    /// [`Cinet::interaction_stage`], also recording which parameters every
    /// attention application read.
    pub fn interaction_stage_traced(
        &self,
        g: &mut Graph<T>,
        pyramid: &FeaturePyramid,
        stage: &InteractionStage,
        trace: &mut Vec<GaaUse>,
    ) -> Result<FeaturePyramid> {
        self.config.wiring.validate()?;
        let mut out = Vec::with_capacity(LEVELS);
        for (j, &(k, m)) in self.config.wiring.ranges().iter().enumerate() {
            let [_, _, h, w] = g.value(pyramid.levels[j]).dims4()?;
            let spec = ResizeSpec::new(h, w)?;
            let mut refined = Vec::with_capacity(m - k + 1);
            for l in k..=m {
                let src = g.resize(pyramid.levels[l - 1], spec)?;
                let before = g.param_log().len();
                refined.push(gaa_apply(g, src, &stage.gaa)?);
                trace.push(GaaUse {
                    target: j + 1,
                    source: l,
                    size: (h, w),
                    params: g.param_log()[before..].iter().copied().collect(),
                });
            }
            let fused = g.add_all(&refined)?;
            let fused = stage.fusion[j].forward(g, fused)?;
            out.push(g.relu(fused));
        }
        Ok(FeaturePyramid { levels: out })
    }

    pub fn forward(&self, g: &mut Graph<T>, image: Var) -> Result<ModelOutput> {
        let [_, _, h, w] = g.value(image).dims4()?;
        let raw = self.encode(g, image)?;
        let mut pyramid = self.unify_channels(g, &raw)?;
        for stage in &self.stages {
            pyramid = self.interaction_stage(g, &pyramid, stage)?;
        }

        // Top-down: level i = conv(relu(D_i + up(level i+1))).
        let mut decoded = vec![None; LEVELS];
        let mut above: Option<Var> = None;
        for i in (0..LEVELS).rev() {
            let d = pyramid.levels[i];
            let merged = match above {
                Some(prev) => {
                    let [_, _, dh, dw] = g.value(d).dims4()?;
                    let up = g.resize(prev, ResizeSpec::new(dh, dw)?)?;
                    g.add(d, up)?
                }
                None => d,
            };
            let act = g.relu(merged);
            let y = self.decoder[i].forward(g, act)?;
            decoded[i] = Some(y);
            above = Some(y);
        }
        let decoded: Vec<Var> = decoded.into_iter().map(|d| d.expect("decoded")).collect();

        let head = self.final_head.forward(g, decoded[0])?;
        let final_logits = g.resize(head, ResizeSpec::new(h, w)?)?;
        let side_logits = self
            .side_heads
            .iter()
            .enumerate()
            .map(|(m, head)| head.forward(g, decoded[m + 1]))
            .collect::<Result<_>>()?;
        Ok(ModelOutput {
            final_logits,
            side_logits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(q: usize) -> ModelConfig {
        ModelConfig {
            unified_channels: 8,
            cascade_depth: q,
            input_size: 32,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn encoder_rejects_non_multiple_of_32() {
        let model = Cinet::<f32>::new(small(1)).unwrap();
        let mut g = model.graph();
        let x = g.constant(Tensor::zeros([1, 3, 60, 60]));
        assert!(matches!(model.encode(&mut g, x), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn encoder_strides() {
        let model = Cinet::<f32>::new(small(0)).unwrap();
        let mut g = model.graph();
        let x = g.constant(Tensor::zeros([1, 3, 64, 64]));
        let raw = model.encode(&mut g, x).unwrap();
        let sizes: Vec<_> = raw.levels.iter().map(|&v| g.shape(v)[2]).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4, 2]);
        let chans: Vec<_> = raw.levels.iter().map(|&v| g.shape(v)[1]).collect();
        assert_eq!(chans, TINY_ENCODER_CHANNELS.to_vec());
        let unified = model.unify_channels(&mut g, &raw).unwrap();
        for (&u, &r) in unified.levels.iter().zip(&raw.levels) {
            assert_eq!(g.shape(u)[1], 8);
            assert_eq!(g.shape(u)[2..], g.shape(r)[2..]);
        }
    }

    #[test]
    fn unifier_param_audit() {
        let model = Cinet::<f32>::new(ModelConfig::default()).unwrap();
        let expected: usize = TINY_ENCODER_CHANNELS.iter().map(|&c| c * 64 + 64).sum();
        assert_eq!(model.unifier_param_count(), expected);
    }

    #[test]
    fn wiring_validation() {
        assert!(InteractionWiring::new(vec![(2, 1); 5]).is_err());
        assert!(InteractionWiring::new(vec![(0, 1); 5]).is_err());
        assert!(InteractionWiring::new(vec![(1, 6); 5]).is_err());
        assert!(InteractionWiring::new(vec![(1, 5); 4]).is_err());
        let w = InteractionWiring::parse("1-5,2-5,3-5,4-5,5-5").unwrap();
        assert_eq!(w, InteractionWiring::coarser());
        assert_eq!(InteractionWiring::parse("self").unwrap().describe(), "self");
        assert!(InteractionWiring::parse("1-2,x").is_err());
    }

    #[test]
    fn stage_params_do_not_depend_on_wiring() {
        let a = Cinet::<f32>::new(small(1)).unwrap();
        let b = Cinet::<f32>::new(ModelConfig {
            wiring: InteractionWiring::self_only(),
            ..small(1)
        })
        .unwrap();
        assert_eq!(a.stage_param_count(1), b.stage_param_count(1));
    }

    #[test]
    fn self_wiring_keeps_shapes() {
        let model = Cinet::<f64>::new(ModelConfig {
            wiring: InteractionWiring::self_only(),
            ..small(1)
        })
        .unwrap();
        let mut g = model.graph();
        let x = g.constant(crate::tensor::random_tensor(&[1, 3, 64, 64], 0.0, 1.0, 3));
        let raw = model.encode(&mut g, x).unwrap();
        let p = model.unify_channels(&mut g, &raw).unwrap();
        let out = model.interaction_stage(&mut g, &p, &model.stages()[0]).unwrap();
        for (&a, &b) in p.levels.iter().zip(&out.levels) {
            assert_eq!(g.shape(a), g.shape(b));
        }
    }

    #[test]
    fn invalid_side_count() {
        let cfg = ModelConfig {
            side_output_count: 5,
            ..ModelConfig::default()
        };
        assert!(matches!(Cinet::<f32>::new(cfg), Err(Error::Config(_))));
    }
}
