//! Finite-difference check of every differentiable building block.
//!
//! Each case draws fresh inputs (and, for the attention blocks, fresh
//! parameters) from a seed and runs [`gradcheck`] / [`gradcheck_with_params`]
//! in `f64`. Inputs are drawn away from kinks (ReLU at zero, clamp bounds,
//! ties in max) so central differences are meaningful.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_attention, gaa_apply, spatial_attention, AttentionKind, ChannelAttention, Gaa, SpatialAttention,
};
use crate::error::Result;
use crate::loss::{bce_loss, eroded_bce_loss, eroded_iou_loss, iou_loss};
use crate::params::ParamStore;
use crate::resample::ResizeSpec;
use crate::tensor::{gradcheck, gradcheck_with_params, random_tensor, GradReport, Graph, Tensor, Var};

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-5;
/// Seeds per case.
pub const SEEDS: u64 = 10;

/// Worst result of one case over all seeds.
#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    pub seeds: u64,
    pub max_rel_err: f64,
    pub elements_checked: usize,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passes(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passes(&self) -> bool {
        self.cases.iter().all(CaseResult::passes)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for c in &self.cases {
            let _ = writeln!(
                s,
                "{:<5} {:<22} seeds={:<3} elements={:<7} max_rel_err={:.3e} ({:.2?})",
                if c.passes() { "ok" } else { "FAIL" },
                c.name,
                c.seeds,
                c.elements_checked,
                c.max_rel_err,
                c.elapsed
            );
        }
        s
    }
}

type Case = fn(u64) -> Result<GradReport>;

/// Names of all cases, in run order.
pub fn case_names() -> Vec<&'static str> {
    cases().iter().map(|(n, _)| *n).collect()
}

fn cases() -> Vec<(&'static str, Case)> {
    vec![
        ("conv2d", conv2d_case),
        ("conv2d_strided", conv2d_strided_case),
        ("sigmoid", sigmoid_case),
        ("relu", relu_case),
        ("log", log_case),
        ("clamp", clamp_case),
        ("softmax", softmax_case),
        ("broadcast_mul_div", broadcast_case),
        ("div_or_zero", div_or_zero_case),
        ("sum_mean", reduce_case),
        ("max", max_case),
        ("concat_pad", concat_pad_case),
        ("bilinear_resize_down", resize_down_case),
        ("bilinear_resize_up", resize_up_case),
        ("spatial_attention", spatial_case),
        ("channel_attention", channel_case),
        ("gaa_spatial", |s| gaa_case(AttentionKind::Spatial, s)),
        ("gaa_channel", |s| gaa_case(AttentionKind::Channel, s)),
        ("gaa", |s| gaa_case(AttentionKind::Gaa, s)),
        ("bce_loss", bce_case),
        ("iou_loss", iou_case),
        ("eroded_bce_loss", eroded_bce_case),
        ("eroded_iou_loss", eroded_iou_case),
    ]
}

/// Run every case for `seeds` seeds.
pub fn run(seeds: u64) -> Result<SuiteReport> {
    run_filtered(seeds, |_| true)
}

pub fn run_filtered(seeds: u64, keep: impl Fn(&str) -> bool) -> Result<SuiteReport> {
    let mut out = Vec::new();
    for (name, case) in cases() {
        if !keep(name) {
            continue;
        }
        let start = Instant::now();
        let mut worst = 0.0f64;
        let mut elements = 0;
        for seed in 0..seeds {
            let r = case(seed)?;
            // NaN must not pass as "no error".
            worst = if r.max_rel_err.is_nan() { f64::NAN } else { worst.max(r.max_rel_err) };
            elements += r.elements_checked;
        }
        out.push(CaseResult {
            name,
            seeds,
            max_rel_err: worst,
            elements_checked: elements,
            elapsed: start.elapsed(),
        });
    }
    Ok(SuiteReport { cases: out })
}

fn rt(shape: &[usize], lo: f64, hi: f64, seed: u64, salt: u64) -> Tensor<f64> {
    random_tensor(shape, lo, hi, seed.wrapping_mul(1_000_003).wrapping_add(salt))
}

/// Uniform values in `[lo, hi]` with magnitude at least `gap`, random sign.
fn away_from_zero(shape: &[usize], gap: f64, hi: f64, seed: u64, salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt));
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.gen_range(gap..hi);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Distinct values (a shuffled grid plus jitter), so max has no ties.
fn distinct(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt));
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.1 - n as f64 * 0.05).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    let vals = vals.into_iter().map(|v| v + rng.gen_range(-0.02..0.02)).collect();
    Tensor::new(shape.to_vec(), vals).expect("shape matches")
}

fn binary_labels(shape: &[usize], seed: u64, salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(salt));
    Tensor::from_fn(shape.to_vec(), |_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
}

fn conv2d_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[2, 3, 5, 6], -1.0, 1.0, seed, 1);
    let w = rt(&[4, 3, 3, 3], -1.0, 1.0, seed, 2);
    let b = rt(&[4], -1.0, 1.0, seed, 3);
    gradcheck(|g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1), &[x, w, b], seed)
}

fn conv2d_strided_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[1, 2, 7, 8], -1.0, 1.0, seed, 1);
    let w = rt(&[3, 2, 3, 5], -1.0, 1.0, seed, 2);
    gradcheck(|g, v| g.conv2d(v[0], v[1], None, 2, 2), &[x, w], seed)
}

fn sigmoid_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[2, 3, 4], -6.0, 6.0, seed, 1);
    gradcheck(|g, v| Ok(g.sigmoid(v[0])), &[x], seed)
}

fn relu_case(seed: u64) -> Result<GradReport> {
    let x = away_from_zero(&[3, 5], 0.01, 2.0, seed, 1);
    gradcheck(|g, v| Ok(g.relu(v[0])), &[x], seed)
}

fn log_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[4, 4], 0.2, 3.0, seed, 1);
    gradcheck(|g, v| g.log(v[0]), &[x], seed)
}

fn clamp_case(seed: u64) -> Result<GradReport> {
    // Keep every element at least 0.01 from either bound.
    let mut x = rt(&[30], -2.0, 2.0, seed, 1);
    for v in x.data_mut() {
        for bound in [-0.5, 0.75] {
            if (*v - bound).abs() < 0.01 {
                *v = bound + 0.02;
            }
        }
    }
    gradcheck(|g, v| Ok(g.clamp(v[0], -0.5, 0.75)), &[x], seed)
}

fn softmax_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[2, 5, 3], -3.0, 3.0, seed, 1);
    gradcheck(
        |g, v| {
            let a = g.softmax(v[0], 1)?;
            let b = g.softmax(v[0], 2)?;
            g.add(a, b)
        },
        &[x],
        seed,
    )
}

fn broadcast_case(seed: u64) -> Result<GradReport> {
    let a = rt(&[2, 3, 4, 5], -1.0, 1.0, seed, 1);
    let b = rt(&[2, 1, 4, 1], -1.0, 1.0, seed, 2);
    let c = rt(&[1, 3, 1, 1], 0.5, 2.0, seed, 3);
    gradcheck(
        |g, v| {
            let ab = g.mul(v[0], v[1])?;
            let s = g.add(ab, v[1])?;
            let d = g.sub(s, v[2])?;
            g.div_or_zero(d, v[2])
        },
        &[a, b, c],
        seed,
    )
}

fn div_or_zero_case(seed: u64) -> Result<GradReport> {
    let a = rt(&[6], -1.0, 1.0, seed, 1);
    let b = rt(&[6], 0.5, 2.0, seed, 2);
    gradcheck(|g, v| g.div_or_zero(v[0], v[1]), &[a, b], seed)
}

fn reduce_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[2, 3, 4, 2], -1.0, 1.0, seed, 1);
    gradcheck(
        |g, v| {
            let s = g.sum(v[0], &[1, 3])?;
            let m = g.mean(v[0], &[1, 3])?;
            let m = g.affine(m, 3.0, 0.5);
            g.mul(s, m)
        },
        &[x],
        seed,
    )
}

fn max_case(seed: u64) -> Result<GradReport> {
    let x = distinct(&[2, 3, 3, 4], seed, 1);
    gradcheck(
        |g, v| {
            let a = g.max(v[0], &[1])?;
            let b = g.max(v[0], &[2, 3])?;
            let a = g.sum(a, &[1, 2, 3])?;
            let b = g.sum(b, &[1, 2, 3])?;
            g.mul(a, b)
        },
        &[x],
        seed,
    )
}

fn concat_pad_case(seed: u64) -> Result<GradReport> {
    let a = rt(&[1, 2, 3, 4], -1.0, 1.0, seed, 1);
    let b = rt(&[1, 1, 3, 4], -1.0, 1.0, seed, 2);
    gradcheck(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let c = g.reshape(c, [1, 3, 3, 4])?;
            g.pad_replicate(c, 2)
        },
        &[a, b],
        seed,
    )
}

fn resize_down_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[2, 2, 9, 7], -1.0, 1.0, seed, 1);
    gradcheck(|g, v| g.resize(v[0], ResizeSpec::new(4, 3)?), &[x], seed)
}

fn resize_up_case(seed: u64) -> Result<GradReport> {
    let x = rt(&[1, 3, 3, 4], -1.0, 1.0, seed, 1);
    gradcheck(|g, v| g.resize(v[0], ResizeSpec::new(8, 7)?), &[x], seed)
}

fn spatial_case(seed: u64) -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sp = SpatialAttention::new(&mut store, "sa", 5, &mut rng)?;
    // Larger weights than the initialiser so the gate is far from uniform.
    perturb(&mut store, seed, 0.5);
    let x = distinct(&[2, 3, 5, 6], seed, 1);
    gradcheck_with_params(|g, v| spatial_attention(g, v[0], &sp), &store, &[x], seed)
}

fn channel_case(seed: u64) -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ca = ChannelAttention::new(&mut store, "ca", 4, 2, &mut rng)?;
    perturb(&mut store, seed, 0.5);
    let x = distinct(&[2, 4, 3, 3], seed, 1);
    gradcheck_with_params(|g, v| channel_attention(g, v[0], &ca), &store, &[x], seed)
}

fn gaa_case(kind: AttentionKind, seed: u64) -> Result<GradReport> {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaa = Gaa::with_hyperparams(&mut store, "gaa", 4, kind, 2, 3, &mut rng)?;
    perturb(&mut store, seed, 0.3);
    let x = distinct(&[1, 4, 4, 5], seed, 1);
    gradcheck_with_params(|g, v| gaa_apply(g, v[0], &gaa), &store, &[x], seed)
}

/// Add uniform noise in `[-amp, amp)` to every parameter (biases start at zero).
fn perturb(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-amp..amp);
        }
    }
}

fn probs(shape: &[usize], seed: u64) -> Tensor<f64> {
    rt(shape, 0.05, 0.95, seed, 1)
}

const LOSS_SHAPE: [usize; 4] = [3, 1, 4, 5];

fn with_labels(
    seed: u64,
    f: impl Fn(&mut Graph<f64>, Var, Var) -> Result<Var>,
) -> Result<GradReport> {
    let y = binary_labels(&LOSS_SHAPE, seed, 2);
    gradcheck(
        |g, v| {
            let y = g.constant(y.clone());
            f(g, v[0], y)
        },
        &[probs(&LOSS_SHAPE, seed)],
        seed,
    )
}

fn bce_case(seed: u64) -> Result<GradReport> {
    with_labels(seed, bce_loss)
}

fn iou_case(seed: u64) -> Result<GradReport> {
    with_labels(seed, iou_loss)
}

fn keep_mask(seed: u64) -> Tensor<f64> {
    let mut k = binary_labels(&LOSS_SHAPE, seed, 3);
    // One image keeps nothing, to exercise the empty-set path.
    let per = LOSS_SHAPE[2] * LOSS_SHAPE[3];
    for v in &mut k.data_mut()[..per] {
        *v = 0.0;
    }
    k
}

fn eroded_bce_case(seed: u64) -> Result<GradReport> {
    let keep = keep_mask(seed);
    with_labels(seed, |g, x, y| {
        let k = g.constant(keep.clone());
        eroded_bce_loss(g, x, y, k)
    })
}

fn eroded_iou_case(seed: u64) -> Result<GradReport> {
    let keep = keep_mask(seed);
    with_labels(seed, |g, x, y| {
        let k = g.constant(keep.clone());
        eroded_iou_loss(g, x, y, k)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_two_seeds() {
        let r = run(2).unwrap();
        assert_eq!(r.cases.len(), case_names().len());
        assert!(r.passes(), "{}", r.to_text());
    }

    #[test]
    fn a_detached_gradient_is_caught() {
        // Re-entering the input as a constant hides it from backward while the
        // forward value still moves, so numeric and analytic gradients differ.
        let x = rt(&[6], 0.5, 1.0, 0, 0);
        let r = gradcheck(
            |g, v| {
                let c = g.constant(g.value(v[0]).clone());
                g.mul(c, c)
            },
            &[x],
            0,
        )
        .unwrap();
        assert!(!r.passes(TOLERANCE));
        assert!(r.max_abs_err > 0.9);
    }

    #[test]
    fn nan_never_passes() {
        let nan = CaseResult {
            name: "x",
            seeds: 1,
            max_rel_err: f64::NAN,
            elements_checked: 0,
            elapsed: Duration::ZERO,
        };
        assert!(!nan.passes());
    }
}
