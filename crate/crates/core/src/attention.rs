//! Spatial, channel, and global-local aligned attention (GAA).
//!
//! Both gates end in a softmax, so each one is a distribution over its domain
//! (positions for the spatial gate, channels for the channel gate). Before
//! multiplying, a gate is rescaled by its domain size, which makes the uniform
//! gate act as the identity. GAA applies the spatial gate, then the channel
//! gate, and adds the input back.
//!
//! One [`Gaa`] holds no shape-dependent parameters, so the same instance can
//! refine features of any resolution.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, scaled_kaiming_uniform, ParamId, ParamStore};
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Channel reduction ratio of the channel-attention MLP.
pub const DEFAULT_REDUCTION: usize = 4;
/// Kernel size of the spatial-attention convolution.
/// Init gain of the layers that produce gate logits. Small logits start the
/// gates near uniform, so an untrained block is close to `2x` and stacking
/// blocks does not blow activations up.
pub const GATE_INIT_GAIN: f64 = 0.1;
pub const DEFAULT_SPATIAL_KERNEL: usize = 7;

/// Which gates an attention block applies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttentionKind {
    Spatial,
    Channel,
    #[default]
    Gaa,
}

impl AttentionKind {
    pub fn uses_spatial(self) -> bool {
        matches!(self, AttentionKind::Spatial | AttentionKind::Gaa)
    }

    pub fn uses_channel(self) -> bool {
        matches!(self, AttentionKind::Channel | AttentionKind::Gaa)
    }
}

impl AttentionKind {
    pub const ALL: [AttentionKind; 3] = [AttentionKind::Spatial, AttentionKind::Channel, AttentionKind::Gaa];
}

impl FromStr for AttentionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(AttentionKind::Spatial),
            "channel" => Ok(AttentionKind::Channel),
            "gaa" => Ok(AttentionKind::Gaa),
            other => Err(Error::Config(format!(
                "unknown attention kind {other:?} (expected spatial, channel or gaa)"
            ))),
        }
    }
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionKind::Spatial => "spatial",
            AttentionKind::Channel => "channel",
            AttentionKind::Gaa => "gaa",
        })
    }
}

/// Shared two-layer MLP `C -> C/reduction -> C`, realised as 1x1 convolutions
/// over pooled `[N, C, 1, 1]` descriptors.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub channels: usize,
    pub reduction: usize,
    pub fc1_weight: ParamId,
    pub fc1_bias: ParamId,
    pub fc2_weight: ParamId,
    pub fc2_bias: ParamId,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        reduction: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::Config(format!(
                "channel attention reduction {reduction} must divide {channels} channels"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelAttention {
            channels,
            reduction,
            fc1_weight: store.register(
                format!("{prefix}.fc1.weight"),
                kaiming_uniform([hidden, channels, 1, 1], rng),
            ),
            fc1_bias: store.register(format!("{prefix}.fc1.bias"), Tensor::zeros([hidden])),
            fc2_weight: store.register(
                format!("{prefix}.fc2.weight"),
                scaled_kaiming_uniform([channels, hidden, 1, 1], GATE_INIT_GAIN, rng),
            ),
            fc2_bias: store.register(format!("{prefix}.fc2.bias"), Tensor::zeros([channels])),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.fc1_weight, self.fc1_bias, self.fc2_weight, self.fc2_bias]
    }

    fn mlp<T: Scalar>(&self, g: &mut Graph<T>, v: Var) -> Result<Var> {
        let (w1, b1) = (g.param(self.fc1_weight), g.param(self.fc1_bias));
        let (w2, b2) = (g.param(self.fc2_weight), g.param(self.fc2_bias));
        let h = g.conv2d(v, w1, Some(b1), 1, 0)?;
        let h = g.relu(h);
        g.conv2d(h, w2, Some(b2), 1, 0)
    }
}

/// `k x k` convolution over the `[mean over C; max over C]` map. The map is
/// padded by edge replication, so a spatially constant input gives a
/// spatially constant response.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub kernel: usize,
    pub weight: ParamId,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("spatial attention kernel {kernel} must be odd")));
        }
        Ok(SpatialAttention {
            kernel,
            weight: store.register(
                format!("{prefix}.weight"),
                scaled_kaiming_uniform([1, 2, kernel, kernel], GATE_INIT_GAIN, rng),
            ),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight]
    }
}

/// Spatial gate `[N, 1, H, W]`; sums to one over the `H*W` positions of each sample.
pub fn spatial_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &SpatialAttention,
) -> Result<Var> {
    let [n, _, h, w] = g.value(x).dims4()?;
    let avg = g.mean(x, &[1])?;
    let max = g.max(x, &[1])?;
    let pooled = g.concat(&[avg, max], 1)?;
    let padded = g.pad_replicate(pooled, p.kernel / 2)?;
    let weight = g.param(p.weight);
    let logits = g.conv2d(padded, weight, None, 1, 0)?;
    let flat = g.reshape(logits, [n, h * w])?;
    let gate = g.softmax(flat, 1)?;
    g.reshape(gate, [n, 1, h, w])
}

/// Channel gate `[N, C, 1, 1]`; sums to one over the channels of each sample.
pub fn channel_attention<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    p: &ChannelAttention,
) -> Result<Var> {
    let [_, c, _, _] = g.value(x).dims4()?;
    if c != p.channels {
        return Err(Error::shape(format!(
            "channel attention built for {} channels, input has {c}",
            p.channels
        )));
    }
    let avg = g.mean(x, &[2, 3])?;
    let max = g.max(x, &[2, 3])?;
    let a = p.mlp(g, avg)?;
    let m = p.mlp(g, max)?;
    let logits = g.add(a, m)?;
    g.softmax(logits, 1)
}

/// Attention block shared across scales. Holds the gates selected by `kind`.
#[derive(Clone, Debug)]
pub struct Gaa {
    pub kind: AttentionKind,
    pub channels: usize,
    pub spatial: Option<SpatialAttention>,
    pub channel: Option<ChannelAttention>,
}

impl Gaa {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        kind: AttentionKind,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Self::with_hyperparams(
            store,
            prefix,
            channels,
            kind,
            DEFAULT_REDUCTION,
            DEFAULT_SPATIAL_KERNEL,
            rng,
        )
    }

    pub fn with_hyperparams<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        kind: AttentionKind,
        reduction: usize,
        kernel: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let spatial = kind
            .uses_spatial()
            .then(|| SpatialAttention::new(store, &format!("{prefix}.spatial"), kernel, rng))
            .transpose()?;
        let channel = kind
            .uses_channel()
            .then(|| ChannelAttention::new(store, &format!("{prefix}.channel"), channels, reduction, rng))
            .transpose()?;
        Ok(Gaa {
            kind,
            channels,
            spatial,
            channel,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(s) = &self.spatial {
            ids.extend(s.param_ids());
        }
        if let Some(c) = &self.channel {
            ids.extend(c.param_ids());
        }
        ids
    }
}

/// Refine `x` with the selected gates and add the input back.
///
/// `y1 = x * (H*W * spatial_gate(x))`, `y2 = y1 * (C * channel_gate(y1))`,
/// output `y2 + x`.
pub fn gaa_apply<T: Scalar>(g: &mut Graph<T>, x: Var, p: &Gaa) -> Result<Var> {
    let [_, c, h, w] = g.value(x).dims4()?;
    if c != p.channels {
        return Err(Error::shape(format!(
            "attention block built for {} channels, input has {c}",
            p.channels
        )));
    }
    let mut y = x;
    if let Some(sp) = &p.spatial {
        let gate = spatial_attention(g, y, sp)?;
        let gate = g.scale(gate, (h * w) as f64);
        y = g.mul(y, gate)?;
    }
    if let Some(ch) = &p.channel {
        let gate = channel_attention(g, y, ch)?;
        let gate = g.scale(gate, c as f64);
        y = g.mul(y, gate)?;
    }
    g.add(y, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn randn(shape: [usize; 4], seed: u64) -> Tensor<f64> {
        crate::tensor::random_tensor(&shape, -1.0, 1.0, seed)
    }

    /// Channel-attention params whose output does not depend on channel
    /// identity: every weight and bias is the same constant.
    fn symmetric(store: &mut ParamStore<f64>, ch: &ChannelAttention) {
        for id in ch.param_ids() {
            let t = store.value(id).map(|_| 0.3);
            store.set(id, t).unwrap();
        }
    }

    #[test]
    fn singleton_spatial_gate_is_one() {
        let mut store = ParamStore::<f64>::new();
        let sp = SpatialAttention::new(&mut store, "s", 7, &mut rng()).unwrap();
        let mut g = store.graph();
        let x = g.constant(randn([2, 3, 1, 1], 1));
        let gate = spatial_attention(&mut g, x, &sp).unwrap();
        assert_eq!(g.value(gate).data(), &[1.0, 1.0]);
    }

    #[test]
    fn constant_input_gives_uniform_spatial_gate() {
        let mut store = ParamStore::<f64>::new();
        let sp = SpatialAttention::new(&mut store, "s", 7, &mut rng()).unwrap();
        let mut g = store.graph();
        let x = g.constant(Tensor::from_fn([1, 3, 5, 4], |i| [0.2, -1.0, 3.0][i / 20]));
        let gate = spatial_attention(&mut g, x, &sp).unwrap();
        for &v in g.value(gate).data() {
            assert!((v - 1.0 / 20.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gates_are_distributions() {
        let mut store = ParamStore::<f64>::new();
        let gaa = Gaa::new(&mut store, "g", 8, AttentionKind::Gaa, &mut rng()).unwrap();
        let mut g = store.graph();
        let x = g.constant(randn([3, 8, 6, 5], 2));
        let sg = spatial_attention(&mut g, x, gaa.spatial.as_ref().unwrap()).unwrap();
        let cg = channel_attention(&mut g, x, gaa.channel.as_ref().unwrap()).unwrap();
        for n in 0..3 {
            let s: f64 = g.value(sg).data()[n * 30..(n + 1) * 30].iter().sum();
            let c: f64 = g.value(cg).data()[n * 8..(n + 1) * 8].iter().sum();
            assert!((s - 1.0).abs() < 1e-6 && (c - 1.0).abs() < 1e-6);
        }
        assert!(g.value(sg).data().iter().chain(g.value(cg).data()).all(|&v| v >= 0.0));
    }

    #[test]
    fn single_channel_gate_is_one() {
        let mut store = ParamStore::<f64>::new();
        let ch = ChannelAttention::new(&mut store, "c", 1, 1, &mut rng()).unwrap();
        let mut g = store.graph();
        let x = g.constant(randn([2, 1, 3, 3], 3));
        let gate = channel_attention(&mut g, x, &ch).unwrap();
        assert_eq!(g.value(gate).data(), &[1.0, 1.0]);
    }

    #[test]
    fn identical_channels_give_uniform_gate_with_symmetric_params() {
        let mut store = ParamStore::<f64>::new();
        let ch = ChannelAttention::new(&mut store, "c", 4, 2, &mut rng()).unwrap();
        symmetric(&mut store, &ch);
        let mut g = store.graph();
        let x = g.constant(Tensor::from_fn([1, 4, 3, 3], |i| (i % 9) as f64 * 0.1));
        let gate = channel_attention(&mut g, x, &ch).unwrap();
        assert!(g.value(gate).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_input_maps_to_zero() {
        let mut store = ParamStore::<f64>::new();
        let gaa = Gaa::new(&mut store, "g", 8, AttentionKind::Gaa, &mut rng()).unwrap();
        let mut g = store.graph();
        let x = g.constant(Tensor::zeros([1, 8, 4, 4]));
        let y = gaa_apply(&mut g, x, &gaa).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_input_doubles() {
        let mut store = ParamStore::<f64>::new();
        let gaa = Gaa::new(&mut store, "g", 4, AttentionKind::Gaa, &mut rng()).unwrap();
        symmetric(&mut store, gaa.channel.as_ref().unwrap());
        let mut g = store.graph();
        let x = g.constant(Tensor::full([1, 4, 6, 6], 0.7));
        let y = gaa_apply(&mut g, x, &gaa).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.4).abs() < 1e-12));
    }

    #[test]
    fn one_instance_serves_every_resolution() {
        let mut store = ParamStore::<f64>::new();
        let gaa = Gaa::new(&mut store, "g", 8, AttentionKind::Gaa, &mut rng()).unwrap();
        let before = store.scalar_count();
        let mut g = store.graph();
        let mut seen = Vec::new();
        for (i, size) in [16usize, 8].into_iter().enumerate() {
            let start = g.param_log().len();
            let x = g.constant(randn([1, 8, size, size], i as u64));
            let y = gaa_apply(&mut g, x, &gaa).unwrap();
            assert_eq!(g.shape(y), &[1, 8, size, size]);
            let mut ids = g.param_log()[start..].to_vec();
            ids.sort();
            ids.dedup();
            seen.push(ids);
        }
        assert_eq!(seen[0], seen[1]);
        assert_eq!(store.scalar_count(), before);
    }

    #[test]
    fn channel_mismatch_rejected() {
        let mut store = ParamStore::<f64>::new();
        let gaa = Gaa::new(&mut store, "g", 8, AttentionKind::Gaa, &mut rng()).unwrap();
        let mut g = store.graph();
        let x = g.constant(Tensor::zeros([1, 4, 4, 4]));
        assert!(matches!(gaa_apply(&mut g, x, &gaa), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn reduction_must_divide_channels() {
        let mut store = ParamStore::<f64>::new();
        assert!(ChannelAttention::new(&mut store, "c", 6, 4, &mut rng()).is_err());
    }

    #[test]
    fn channel_permutation_equivariance() {
        let c = 8;
        let perm = [3usize, 0, 7, 1, 6, 2, 5, 4];
        let mut store = ParamStore::<f64>::new();
        let gaa = Gaa::new(&mut store, "g", c, AttentionKind::Gaa, &mut rng()).unwrap();
        let ch = gaa.channel.clone().unwrap();
        let input = randn([2, c, 5, 5], 11);
        let plane = 25;

        let permute_input = |t: &Tensor<f64>| {
            Tensor::from_fn(t.shape().to_vec(), |i| {
                let (n, rest) = (i / (c * plane), i % (c * plane));
                let (k, p) = (rest / plane, rest % plane);
                t.data()[n * c * plane + perm[k] * plane + p]
            })
        };

        let mut permuted = store.clone();
        let hidden = c / ch.reduction;
        let w1 = store.value(ch.fc1_weight).clone();
        permuted
            .set(ch.fc1_weight, Tensor::from_fn([hidden, c, 1, 1], |i| w1.data()[(i / c) * c + perm[i % c]]))
            .unwrap();
        let w2 = store.value(ch.fc2_weight).clone();
        permuted
            .set(ch.fc2_weight, Tensor::from_fn([c, hidden, 1, 1], |i| w2.data()[perm[i / hidden] * hidden + i % hidden]))
            .unwrap();
        let b2 = store.value(ch.fc2_bias).map(|v| v + 0.0);
        let b2 = Tensor::from_fn([c], |i| b2.data()[perm[i]] + 0.01 * perm[i] as f64);
        let b2_orig = Tensor::from_fn([c], |i| store.value(ch.fc2_bias).data()[i] + 0.01 * i as f64);
        store.set(ch.fc2_bias, b2_orig).unwrap();
        permuted.set(ch.fc2_bias, b2).unwrap();

        let run = |s: &ParamStore<f64>, t: Tensor<f64>| {
            let mut g = s.graph();
            let x = g.constant(t);
            let y = gaa_apply(&mut g, x, &gaa).unwrap();
            g.value(y).clone()
        };
        let expected = permute_input(&run(&store, input.clone()));
        let got = run(&permuted, permute_input(&input));
        for (a, b) in expected.data().iter().zip(got.data()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
