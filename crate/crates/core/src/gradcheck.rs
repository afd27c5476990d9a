//! Finite-difference verification of the analytic gradients, in `f64`.
//!
//! A function under test maps input leaves (and the parameters of a store)
//! to a tensor; it is reduced to a scalar by a dot product with fixed random
//! weights. Every input coordinate and every parameter coordinate (or a
//! seeded sample of them) is perturbed by `±step` and the central difference
//! compared with the backward pass.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Ctx, Graph, Var};
use crate::blocks::{MsSsmConfig, ScanBlock};
use crate::error::Result;
use crate::fusion::{Aral, Argfm, ArgfmConfig, FusSsm};
use crate::layers::{Conv2d, CrossAttention};
use crate::network::{Model, ModelConfig};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::scan_geometry::{cached_window_order, WindowMode};
use crate::selective_scan::{scan_var, ss2d_var, DirectionReduce, SsmLayer};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Options {
    pub step: f64,
    /// Lower bound of the relative-error denominator, so coordinates whose
    /// true gradient is ~0 are judged on absolute error.
    pub floor: f64,
    pub tolerance: f64,
    /// Check only this many parameter coordinates, sampled without
    /// replacement. `None` checks all of them.
    pub param_samples: Option<usize>,
    pub seed: u64,
}

impl Default for Options {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-3,
            tolerance: 1e-6,
            param_samples: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub name: String,
    pub coordinates: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Copy)]
enum Coord {
    Input(usize, usize),
    Param(ParamId, usize),
}

fn scalar<'g>(out: Var<'g, f64>, weights: &Tensor<f64>) -> Result<f64> {
    Ok(out.dot_const(weights)?.value().item())
}

/// Compares analytic and numeric gradients of `f`.
pub fn check<F>(name: &str, store: &ParamStore<f64>, inputs: &[Tensor<f64>], opts: &Options, f: F) -> Result<CheckReport>
where
    F: for<'g> Fn(&Ctx<'g, f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let g = Graph::new();
    let cx = Ctx::new(&g, store);
    let leaves: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&cx, &leaves)?;
    let shape = out.shape();
    let weights = Tensor::from_fn(&shape, |_| rng.random_range(-1.0..=1.0));
    let grads = g.backward(out.dot_const(&weights)?)?;

    let mut coords: Vec<Coord> = Vec::new();
    for (i, t) in inputs.iter().enumerate() {
        coords.extend((0..t.len()).map(|j| Coord::Input(i, j)));
    }
    let mut pcoords: Vec<Coord> = store
        .ids()
        .flat_map(|id| (0..store.value(id).len()).map(move |j| Coord::Param(id, j)))
        .collect();
    if let Some(n) = opts.param_samples {
        pcoords = rand::seq::index::sample(&mut rng, pcoords.len(), n.min(pcoords.len()))
            .into_iter()
            .map(|k| pcoords[k])
            .collect();
    }
    coords.extend(pcoords);

    let analytic = |c: Coord| -> f64 {
        match c {
            Coord::Input(i, j) => grads.get(leaves[i]).map_or(0.0, |t| t.data()[j]),
            Coord::Param(id, j) => grads
                .param_grads()
                .find(|(p, _)| *p == id)
                .map_or(0.0, |(_, t)| t.data()[j]),
        }
    };
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let g = Graph::inference();
        let cx = Ctx::new(&g, store);
        let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        scalar(f(&cx, &vars)?, &weights)
    };

    let mut work_store = store.clone();
    let mut work_inputs = inputs.to_vec();
    let (mut max_rel, mut max_abs) = (0.0f64, 0.0f64);
    for &c in &coords {
        let at = |delta: f64, st: &mut ParamStore<f64>, inp: &mut Vec<Tensor<f64>>| -> Result<f64> {
            let slot = match c {
                Coord::Input(i, j) => &mut inp[i].data_mut()[j],
                Coord::Param(id, j) => &mut st.value_mut(id).data_mut()[j],
            };
            let orig = *slot;
            *slot = orig + delta;
            let v = eval(st, inp);
            let slot = match c {
                Coord::Input(i, j) => &mut inp[i].data_mut()[j],
                Coord::Param(id, j) => &mut st.value_mut(id).data_mut()[j],
            };
            *slot = orig;
            v
        };
        let plus = at(opts.step, &mut work_store, &mut work_inputs)?;
        let minus = at(-opts.step, &mut work_store, &mut work_inputs)?;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let a = analytic(c);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        max_abs = max_abs.max(abs);
        max_rel = max_rel.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    Ok(CheckReport {
        name: name.to_string(),
        coordinates: coords.len(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
        tolerance: opts.tolerance,
        passed: max_rel < opts.tolerance,
    })
}

/// Adds uniform noise in `±amp` to every parameter, so zero-initialised
/// projections do not hide the gradients behind them.
pub fn jitter(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.random_range(-amp..=amp);
        }
    }
}

/// Uniform `[-1,1]` tensor.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..=1.0))
}

fn build<M>(seed: u64, f: impl FnOnce(&mut ParamBuilder<'_, f64>) -> Result<M>) -> Result<(M, ParamStore<f64>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ParamBuilder::new(&mut store, &mut rng))?;
    jitter(&mut store, seed ^ 0x5eed, 0.2);
    Ok((m, store))
}

/// Tolerances of the suite, by level.
pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODULE_TOLERANCE: f64 = 1e-5;
pub const NETWORK_TOLERANCE: f64 = 1e-4;

fn op_opts(seed: u64) -> Options {
    Options {
        seed,
        ..Options::default()
    }
}

/// Every primitive operation on small random inputs.
pub fn op_checks(seed: u64) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |shape: &[usize]| random_tensor(&mut rng, shape);
    let empty = ParamStore::<f64>::new();
    let o = op_opts(seed);
    let mut out = Vec::new();

    out.push(check("silu", &empty, &[r(&[3, 5])], &o, |_, x| Ok(x[0].silu()))?);
    out.push(check("softplus", &empty, &[r(&[3, 5])], &o, |_, x| Ok(x[0].softplus()))?);
    out.push(check("exp", &empty, &[r(&[4])], &o, |_, x| Ok(x[0].exp()))?);
    out.push(check("mul", &empty, &[r(&[3, 4]), r(&[1, 4])], &o, |_, x| x[0].mul(x[1]))?);
    out.push(check("softmax_rows", &empty, &[r(&[3, 6])], &o, |_, x| x[0].softmax(1))?);
    out.push(check("softmax_cols", &empty, &[r(&[5, 2])], &o, |_, x| x[0].softmax(0))?);
    out.push(check("layer_norm", &empty, &[r(&[4, 6]), r(&[6]), r(&[6])], &o, |_, x| {
        x[0].layer_norm(x[1], x[2], 1e-5)
    })?);
    out.push(check("linear", &empty, &[r(&[5, 3]), r(&[3, 4]), r(&[4])], &o, |_, x| {
        x[0].linear(x[1], Some(x[2]))
    })?);
    out.push(check("matmul", &empty, &[r(&[3, 4]), r(&[4, 2])], &o, |_, x| x[0].matmul(x[1]))?);
    out.push(check("depthwise_conv2d", &empty, &[r(&[2, 5, 4]), r(&[2, 3, 3])], &o, |_, x| {
        x[0].depthwise_conv2d(x[1])
    })?);
    out.push(check("conv2d_stride2", &empty, &[r(&[2, 6, 6]), r(&[3, 2, 2, 2]), r(&[3])], &o, |_, x| {
        x[0].conv2d(x[1], Some(x[2]), 2, 0)
    })?);
    out.push(check("upsample_nearest", &empty, &[r(&[2, 2, 3])], &o, |_, x| x[0].upsample_nearest(2))?);
    out.push(check("upsample_bilinear", &empty, &[r(&[2, 3, 3])], &o, |_, x| x[0].upsample_bilinear(2))?);
    let labels = [0u8, 2, 1, 255, 2, 0];
    out.push(check("cross_entropy", &empty, &[r(&[3, 2, 3])], &o, move |_, x| {
        Ok(x[0].cross_entropy(&labels)?.0)
    })?);

    let (attn, store) = build(seed, |pb| CrossAttention::new(&mut pb.sub("attn"), 4, 2))?;
    out.push(check("cross_attention", &store, &[r(&[5, 4]), r(&[6, 4])], &o, |cx, x| {
        attn.forward(cx, x[0], x[1])
    })?);

    let (conv, store) = build(seed, |pb| Conv2d::new(&mut pb.sub("conv"), 2, 3, 3, 1, 1))?;
    out.push(check("conv2d_params", &store, &[r(&[2, 4, 4])], &o, |cx, x| conv.forward(cx, x[0]))?);

    // Selective scan: x, delta > 0, A < 0, B, C, D; two segments of 4.
    let (l, c, n) = (8, 2, 3);
    let delta = r(&[l, c]).map(|v| 0.3 + 0.25 * v);
    let a = r(&[c, n]).map(|v| -1.0 - v.abs());
    out.push(check(
        "selective_scan",
        &empty,
        &[r(&[l, c]), delta, a, r(&[l, n]), r(&[l, n]), r(&[c])],
        &o,
        |_, x| scan_var(x[0], x[1], x[2], x[3], x[4], x[5], 4),
    )?);

    let (ssm, store) = build(seed, |pb| SsmLayer::new(&mut pb.sub("ssm"), 2, 3))?;
    let order = cached_window_order(4, 4, 2, WindowMode::Divide)?;
    let rev = order.reversed();
    out.push(check("ss2d", &store, &[r(&[2, 4, 4])], &o, |cx, x| {
        ss2d_var(cx, &ssm, x[0], (&order, &rev), DirectionReduce::Sum)
    })?);
    Ok(out)
}

fn module_opts(seed: u64) -> Options {
    Options {
        tolerance: MODULE_TOLERANCE,
        seed,
        ..Options::default()
    }
}

/// MS-SSM block on `[2,4,4]`.
pub fn ms_ssm_check(seed: u64) -> Result<CheckReport> {
    let cfg = MsSsmConfig {
        scales: vec![1, 2],
        ..MsSsmConfig::default()
    };
    let (block, store) = build(seed, |pb| ScanBlock::new(&mut pb.sub("block"), 2, 2, 3, &cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let x = random_tensor(&mut rng, &[2, 4, 4]);
    check("ms_ssm_block", &store, &[x], &module_opts(seed), |cx, x| block.forward(cx, x[0]))
}

/// ARAL gates on `C=2`, `H=W=4` token pairs.
pub fn aral_check(seed: u64) -> Result<CheckReport> {
    let (aral, store) = build(seed, |pb| Aral::new(&mut pb.sub("aral"), 3, 5))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
    let inputs = [random_tensor(&mut rng, &[16, 2]), random_tensor(&mut rng, &[16, 2])];
    check("aral", &store, &inputs, &module_opts(seed), |cx, x| {
        let (o, e) = aral.forward(cx, x[0], x[1])?;
        crate::ops::concat(&[o, e], 0)
    })
}

/// Fus-SSM on `C=2`, `H=W=4` streams.
pub fn fus_ssm_check(seed: u64) -> Result<CheckReport> {
    let (fus, store) = build(seed, |pb| FusSsm::new(&mut pb.sub("fus"), 2, 3, DirectionReduce::Sum))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 3);
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| random_tensor(&mut rng, &[16, 2])).collect();
    check("fus_ssm", &store, &inputs, &module_opts(seed), |cx, x| {
        let (zo, ze) = fus.forward(cx, x[0], x[1], x[2], x[3])?;
        crate::ops::concat(&[zo, ze], 0)
    })
}

/// Whole ARGFM on `C=4`, `H=W=4`. With two channels its layer norms output
/// only +-1 and their slope is large wherever the channels nearly agree,
/// too curved for central differences.
pub fn argfm_check(seed: u64) -> Result<CheckReport> {
    let cfg = ArgfmConfig {
        state_dim: 3,
        ..ArgfmConfig::default()
    };
    let (m, store) = build(seed, |pb| Argfm::new(&mut pb.sub("argfm"), 4, &cfg))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 4);
    let inputs = [random_tensor(&mut rng, &[4, 4, 4]), random_tensor(&mut rng, &[4, 4, 4])];
    check("argfm", &store, &inputs, &module_opts(seed), |cx, x| {
        let out = m.forward(cx, x[0], x[1])?;
        crate::ops::concat(&[out.f_o, out.f_e, out.fused], 0)
    })
}

/// The micro network used by the end-to-end check.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        state_dim: 2,
        ..ModelConfig::default()
    }
}

/// Loss gradient of the micro network (`32x32` input) on `samples`
/// sampled parameters.
pub fn network_check(seed: u64, samples: usize) -> Result<CheckReport> {
    let cfg = micro_config();
    let (model, mut store) = Model::new::<f64>(&cfg, seed)?;
    jitter(&mut store, seed ^ 0x5eed, 0.05);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 5);
    let optical = random_tensor(&mut rng, &[3, 32, 32]);
    let dsm = random_tensor(&mut rng, &[1, 32, 32]);
    let labels: Rc<Vec<u8>> = Rc::new((0..32 * 32).map(|_| rng.random_range(0..6u8)).collect());
    let opts = Options {
        tolerance: NETWORK_TOLERANCE,
        param_samples: Some(samples),
        seed,
        ..Options::default()
    };
    // Inputs are passed as constants: only parameters are checked.
    check("network", &store, &[], &opts, |cx, _| {
        let out = model.forward(cx, cx.constant(optical.clone()), cx.constant(dsm.clone()))?;
        Ok(model.loss(&out, &labels)?.loss)
    })
}

/// The complete suite: every op, the fusion and scan modules and 20
/// parameters of the micro network.
pub fn run_suite(seed: u64) -> Result<Vec<CheckReport>> {
    let mut out = op_checks(seed)?;
    out.push(ms_ssm_check(seed)?);
    out.push(aral_check(seed)?);
    out.push(fus_ssm_check(seed)?);
    out.push(argfm_check(seed)?);
    out.push(network_check(seed, 20)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_a_wrong_gradient() {
        // x * stop_gradient(x) has true derivative 2x but the tape sees x.
        let empty = ParamStore::<f64>::new();
        let x = Tensor::from_f64(&[3], &[0.5, -0.7, 0.9]).unwrap();
        let rep = check("broken", &empty, &[x], &Options::default(), |cx, x| {
            let frozen = cx.constant(x[0].value().as_ref().clone());
            x[0].mul(frozen)
        })
        .unwrap();
        assert!(!rep.passed, "{rep:?}");
    }

    #[test]
    fn ops_pass() {
        for rep in op_checks(3).unwrap() {
            assert!(rep.passed, "{rep:?}");
        }
    }
}
