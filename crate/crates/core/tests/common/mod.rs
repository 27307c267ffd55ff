//! Test-only oracles shared by the integration targets.
#![allow(dead_code)]

use std::path::PathBuf;

use hpss_core::network::{ForwardCtx, NetworkConfig, ParamStore, ThreeWayMDenseNet};
use hpss_core::tensor::ops::{self, BatchNormMode, Elementwise, RunningStats};
use hpss_core::tensor::{no_grad, Tensor, Var};
use hpss_core::training;
use hpss_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central-difference steps, tried in order until the one-sided slopes agree.
pub const FD_STEPS: [f64; 3] = [1e-5, 1e-6, 1e-7];
pub const OP_TOL: f64 = 1e-4;
pub const NET_TOL: f64 = 1e-3;
/// Gradients smaller than this are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// Uniform magnitude in `[lo, hi)` with a random sign; keeps values away
/// from activation kinks.
pub fn signed_away_from_zero(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.gen_range(lo..hi);
        if rng.gen::<bool>() {
            v
        } else {
            -v
        }
    })
}

/// Distinct values at least 0.01 apart, randomly placed, so 2x2 maxima are unique.
pub fn distinct(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - 0.5).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.gen_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Central difference of `f` at 0. A step whose forward and backward slopes
/// disagree by more than `tol` straddles a ReLU or max-pool kink, so the next
/// smaller step is tried. Returns the estimate and whether a smaller step was used.
pub fn central_difference(mut f: impl FnMut(f64) -> Result<f64>, tol: f64) -> Result<(f64, bool)> {
    let f0 = f(0.0)?;
    let mut estimate = 0.0;
    for (i, &h) in FD_STEPS.iter().enumerate() {
        let (up, down) = (f(h)?, f(-h)?);
        estimate = (up - down) / (2.0 * h);
        if rel_err((up - f0) / h, (f0 - down) / h) < tol {
            return Ok((estimate, i > 0));
        }
    }
    Ok((estimate, true))
}

fn projected(out: &Var, proj: &Tensor) -> Result<Var> {
    ops::sum(&ops::mul(out, &Var::constant(proj.clone()))?)
}

#[derive(Clone, Copy, Debug, Default)]
pub struct FdReport {
    pub worst: f64,
    pub checked: usize,
    /// Entries that needed a smaller step.
    pub refined: usize,
}

impl FdReport {
    fn record(&mut self, analytic: f64, (numeric, refined): (f64, bool)) {
        self.worst = self.worst.max(rel_err(analytic, numeric));
        self.checked += 1;
        self.refined += usize::from(refined);
    }
}

/// Compares reverse-mode gradients of `sum(f(inputs) ⊙ R)`, for a fixed
/// random projection `R`, against central differences.
pub fn fd_check(inputs: &[Tensor], f: &dyn Fn(&[Var]) -> Result<Var>, seed: u64) -> Result<FdReport> {
    let leaves: Vec<Var> = inputs.iter().map(|t| Var::leaf(t.clone(), true)).collect();
    let out = f(&leaves)?;
    let proj = uniform(out.shape(), -1.0, 1.0, seed);
    projected(&out, &proj)?.backward()?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        no_grad(|| {
            let vars: Vec<Var> = xs.iter().map(|t| Var::constant(t.clone())).collect();
            Ok(projected(&f(&vars)?, &proj)?.value().item())
        })
    };
    let mut report = FdReport::default();
    for (i, leaf) in leaves.iter().enumerate() {
        let grad = leaf.grad().unwrap_or_else(|| Tensor::zeros(leaf.shape().to_vec()));
        for j in 0..inputs[i].numel() {
            let numeric = central_difference(
                |d| {
                    let mut xs = inputs.to_vec();
                    xs[i].data_mut()[j] += d;
                    eval(&xs)
                },
                OP_TOL,
            )?;
            report.record(grad.data()[j], numeric);
        }
    }
    Ok(report)
}

pub type OpFn = Box<dyn Fn(&[Var]) -> Result<Var>>;

/// One gradient-check case per differentiable op.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor>, OpFn)> {
    let bn = |mode: BatchNormMode| -> OpFn {
        Box::new(move |v: &[Var]| {
            let mut stats = RunningStats::new(3);
            stats.mean = vec![0.1, -0.2, 0.3];
            stats.var = vec![0.5, 1.5, 2.0];
            ops::batchnorm(&v[0], &v[1], &v[2], &mut stats, mode)
        })
    };
    let act = |e: Elementwise| -> OpFn { Box::new(move |v: &[Var]| ops::elementwise(&v[0], e)) };
    vec![
        (
            "conv2d 3x3",
            vec![uniform(&[1, 6, 6], -1.0, 1.0, 1), uniform(&[2, 1, 3, 3], -1.0, 1.0, 2), uniform(&[2], -1.0, 1.0, 3)],
            Box::new(|v: &[Var]| ops::conv2d(&v[0], &v[1], &v[2])),
        ),
        (
            "conv2d 1x13 batched",
            vec![
                uniform(&[2, 2, 4, 14], -1.0, 1.0, 4),
                uniform(&[3, 2, 1, 13], -1.0, 1.0, 5),
                uniform(&[3], -1.0, 1.0, 6),
            ],
            Box::new(|v: &[Var]| ops::conv2d(&v[0], &v[1], &v[2])),
        ),
        (
            "conv2d 13x1",
            vec![
                uniform(&[1, 14, 4], -1.0, 1.0, 7),
                uniform(&[2, 1, 13, 1], -1.0, 1.0, 8),
                uniform(&[2], -1.0, 1.0, 9),
            ],
            Box::new(|v: &[Var]| ops::conv2d(&v[0], &v[1], &v[2])),
        ),
        ("maxpool2", vec![distinct(&[2, 2, 4, 6], 10)], Box::new(|v: &[Var]| ops::maxpool2(&v[0]))),
        (
            "transposed_conv2",
            vec![
                uniform(&[2, 2, 3, 3], -1.0, 1.0, 11),
                uniform(&[2, 3, 2, 2], -1.0, 1.0, 12),
                uniform(&[3], -1.0, 1.0, 13),
            ],
            Box::new(|v: &[Var]| ops::transposed_conv2(&v[0], &v[1], &v[2])),
        ),
        (
            "batchnorm train",
            vec![uniform(&[2, 3, 3, 4], -2.0, 2.0, 14), uniform(&[3], 0.5, 1.5, 15), uniform(&[3], -1.0, 1.0, 16)],
            bn(BatchNormMode::Train),
        ),
        (
            "batchnorm infer",
            vec![uniform(&[2, 3, 3, 4], -2.0, 2.0, 17), uniform(&[3], 0.5, 1.5, 18), uniform(&[3], -1.0, 1.0, 19)],
            bn(BatchNormMode::Infer),
        ),
        ("relu", vec![signed_away_from_zero(&[2, 4, 4], 0.01, 1.0, 20)], act(Elementwise::Relu)),
        ("leaky_relu", vec![signed_away_from_zero(&[2, 4, 4], 0.01, 1.0, 21)], act(Elementwise::LeakyRelu(0.01))),
        ("sigmoid", vec![uniform(&[2, 4, 4], -4.0, 4.0, 22)], act(Elementwise::Sigmoid)),
        ("log1p", vec![uniform(&[2, 4, 4], 0.0, 3.0, 23)], act(Elementwise::Log1p)),
        (
            "concat_channels",
            vec![uniform(&[1, 3, 3], -1.0, 1.0, 24), uniform(&[2, 3, 3], -1.0, 1.0, 25)],
            Box::new(|v: &[Var]| ops::concat_channels(&[&v[0], &v[1]])),
        ),
        (
            "slice_channels",
            vec![uniform(&[2, 4, 2, 2], -1.0, 1.0, 26)],
            Box::new(|v: &[Var]| ops::slice_channels(&v[0], 1, 2)),
        ),
        (
            "arithmetic",
            vec![uniform(&[2, 3, 3], -1.0, 1.0, 27), uniform(&[2, 3, 3], -1.0, 1.0, 28)],
            Box::new(|v: &[Var]| {
                let a = ops::mul(&ops::add(&v[0], &v[1])?, &ops::sub(&v[0], &v[1])?)?;
                ops::scale(&ops::square(&a)?, 0.7)
            }),
        ),
        ("mean", vec![uniform(&[2, 3, 3], -1.0, 1.0, 29)], Box::new(|v: &[Var]| ops::mean(&v[0]))),
        (
            "masking loss",
            vec![uniform(&[1, 4, 4], 0.05, 0.95, 30), uniform(&[1, 4, 4], 0.05, 0.95, 31)],
            Box::new(|v: &[Var]| {
                let x = uniform(&[1, 4, 4], 0.0, 2.0, 32);
                let p = uniform(&[1, 4, 4], 0.0, 1.0, 33);
                let h = uniform(&[1, 4, 4], 0.0, 1.0, 34);
                training::loss(&v[0], &v[1], &x, &p, &h, 0.5, 0.5)
            }),
        ),
    ]
}

fn network_loss(
    net: &ThreeWayMDenseNet,
    store: &ParamStore,
    bound: Option<&hpss_core::network::BoundParams>,
    data: &[Tensor; 4],
) -> Result<Var> {
    let owned;
    let params = match bound {
        Some(b) => b,
        None => {
            owned = store.bind(false);
            &owned
        }
    };
    let mut ctx = ForwardCtx::new(params, BatchNormMode::Train);
    let masks = net.forward(&mut ctx, &Var::constant(data[0].clone()))?;
    training::loss(&masks.percussive, &masks.harmonic, &data[1], &data[2], &data[3], 0.5, 0.5)
}

/// End-to-end check of every trainable parameter of a small network on a
/// `[2, 1, 16, 16]` batch.
pub fn network_fd_check(seed: u64) -> Result<FdReport> {
    let cfg = NetworkConfig::small();
    let net = ThreeWayMDenseNet::new(cfg)?;
    let mut store = net.init_params(seed);
    let shape = [2, 1, 16, 16];
    let data = [
        uniform(&shape, 0.0, 1.0, seed + 1),
        uniform(&shape, 0.0, 2.0, seed + 2),
        uniform(&shape, 0.0, 1.0, seed + 3),
        uniform(&shape, 0.0, 1.0, seed + 4),
    ];
    let bound = store.bind(true);
    network_loss(&net, &store, Some(&bound), &data)?.backward()?;
    let grads = bound.grads();

    let mut report = FdReport::default();
    for (name, grad) in &grads {
        for j in 0..grad.numel() {
            let original = store.tensor(name)?.data()[j];
            let numeric = central_difference(
                |d| {
                    store.get_mut(name).unwrap().tensor.data_mut()[j] = original + d;
                    no_grad(|| Ok(network_loss(&net, &store, None, &data)?.value().item()))
                },
                NET_TOL,
            );
            store.get_mut(name).unwrap().tensor.data_mut()[j] = original;
            report.record(grad.data()[j], numeric?);
        }
    }
    Ok(report)
}
