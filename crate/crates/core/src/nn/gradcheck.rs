//! Central finite-difference verification of the analytic gradients, in f64.
//!
//! Each check draws random shapes and inputs, projects the operation's output
//! onto a random direction to obtain a scalar, and compares the analytic
//! gradient of every input with `(f(x + h) - f(x - h)) / 2h`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::*;
use super::loss::{bce_loss, segmentation_loss, soft_jaccard, soft_jaccard_grad};
use super::params::ParamStore;
use super::tensor::Tensor4;
use super::unet::{Mode, UNet, UNetConfig};
use crate::parallel::Execution;

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// Largest relative error seen for one operation.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub op: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < TOLERANCE
    }
}

const SEQ: Execution = Execution::Sequential;

fn uniform(rng: &mut ChaCha8Rng, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Magnitudes in `[0.1, 1)`, so a finite-difference step never crosses the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let m: f64 = rng.gen_range(0.1..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn tensor(shape: [usize; 4], data: Vec<f64>) -> Tensor4<f64> {
    Tensor4::from_vec(shape[0], shape[1], shape[2], shape[3], data).expect("shape matches data")
}

pub fn numeric_gradient(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + FD_STEP;
            let up = f(&probe);
            probe[i] = orig - FD_STEP;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `max |a - n| / max(|a|, |n|, 1e-6)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
        .fold(0.0, f64::max)
}

fn project(y: &Tensor4<f64>, r: &[f64]) -> f64 {
    y.data.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn random_shape(rng: &mut ChaCha8Rng, even: bool) -> [usize; 4] {
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (n, c) = (dim(1, 3), dim(1, 3));
    let (mut h, mut w) = (dim(2, 7), dim(2, 7));
    if even {
        h += h % 2;
        w += w % 2;
    }
    [n, c, h, w]
}

struct Tracker {
    op: &'static str,
    cases: usize,
    worst: f64,
}

impl Tracker {
    fn new(op: &'static str, cases: usize) -> Self {
        Tracker { op, cases, worst: 0.0 }
    }

    fn add(&mut self, analytic: &[f64], numeric: &[f64]) {
        self.worst = self.worst.max(max_rel_err(analytic, numeric));
    }

    fn report(self) -> CheckReport {
        CheckReport {
            op: self.op,
            cases: self.cases,
            max_rel_err: self.worst,
        }
    }
}

/// Input, kernel and bias gradients of the convolution; kernel sizes cycle through 1, 2, 3.
pub fn check_convolution(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("convolution", cases);
    for case in 0..cases {
        let shape = if case == 0 { [1, 2, 6, 6] } else { random_shape(&mut r, false) };
        let spec = ConvSpec {
            cin: shape[1],
            cout: r.gen_range(1..=3),
            k: [3, 1, 2][case % 3],
        };
        let x = tensor(shape, uniform(&mut r, shape.iter().product(), -1.0, 1.0));
        let w = uniform(&mut r, spec.weight_len(), -1.0, 1.0);
        let b = uniform(&mut r, spec.cout, -1.0, 1.0);
        let out_shape = [shape[0], spec.cout, shape[2], shape[3]];
        let rr = uniform(&mut r, out_shape.iter().product(), -1.0, 1.0);
        let g = conv2d_backward(&x, spec, &w, &tensor(out_shape, rr.clone()), true, SEQ).expect("valid shapes");
        let loss = |x: &Tensor4<f64>, w: &[f64], b: &[f64]| {
            project(&conv2d_forward(x, spec, w, b, SEQ).expect("valid shapes"), &rr)
        };
        t.add(&g.dx.expect("requested").data, &numeric_gradient(&x.data, |d| loss(&tensor(shape, d.to_vec()), &w, &b)));
        t.add(&g.dw, &numeric_gradient(&w, |d| loss(&x, d, &b)));
        t.add(&g.db, &numeric_gradient(&b, |d| loss(&x, &w, d)));
    }
    t.report()
}

/// Training-mode batch normalization with respect to input, gain and shift.
pub fn check_batch_norm(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("batch_norm", cases);
    for _ in 0..cases {
        let mut shape = random_shape(&mut r, false);
        shape[0] = shape[0].max(2);
        let len = shape.iter().product();
        let x = tensor(shape, uniform(&mut r, len, -2.0, 2.0));
        let gamma = uniform(&mut r, shape[1], 0.5, 1.5);
        let beta = uniform(&mut r, shape[1], -0.5, 0.5);
        let rr = uniform(&mut r, len, -1.0, 1.0);
        let (_, cache) = batch_norm_train(&x, &gamma, &beta, 1e-5).expect("batch of 2+");
        let (dx, dg, db) = batch_norm_backward(&tensor(shape, rr.clone()), &cache, &gamma);
        let loss = |x: &Tensor4<f64>, g: &[f64], b: &[f64]| {
            project(&batch_norm_train(x, g, b, 1e-5).expect("batch of 2+").0, &rr)
        };
        t.add(&dx.data, &numeric_gradient(&x.data, |d| loss(&tensor(shape, d.to_vec()), &gamma, &beta)));
        t.add(&dg, &numeric_gradient(&gamma, |d| loss(&x, d, &beta)));
        t.add(&db, &numeric_gradient(&beta, |d| loss(&x, &gamma, d)));
    }
    t.report()
}

/// ReLU and sigmoid.
pub fn check_activations(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("activations", cases);
    for _ in 0..cases {
        let shape = random_shape(&mut r, false);
        let len = shape.iter().product();
        let x = tensor(shape, away_from_zero(&mut r, len));
        let rr = uniform(&mut r, len, -1.0, 1.0);
        let dy = tensor(shape, rr.clone());
        let n = numeric_gradient(&x.data, |d| project(&relu(&tensor(shape, d.to_vec())), &rr));
        t.add(&relu_backward(&relu(&x), &dy).data, &n);
        let n = numeric_gradient(&x.data, |d| project(&sigmoid(&tensor(shape, d.to_vec())), &rr));
        t.add(&sigmoid_backward(&sigmoid(&x), &dy).data, &n);
    }
    t.report()
}

/// 2x2 max pooling with argmax routing.
pub fn check_pooling(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("maxpool", cases);
    for _ in 0..cases {
        let shape = random_shape(&mut r, true);
        let x = tensor(shape, uniform(&mut r, shape.iter().product(), -1.0, 1.0));
        let (y, arg) = maxpool2(&x).expect("even dims");
        let rr = uniform(&mut r, y.data.len(), -1.0, 1.0);
        let dx = maxpool2_backward(shape, &arg, &tensor(y.shape(), rr.clone()));
        let n = numeric_gradient(&x.data, |d| {
            project(&maxpool2(&tensor(shape, d.to_vec())).expect("even dims").0, &rr)
        });
        t.add(&dx.data, &n);
    }
    t.report()
}

/// Decoder step: nearest 2x upsampling, learned 2x2 convolution, concatenation
/// after a skip tensor.
pub fn check_upsample_path(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("upsample", cases);
    for _ in 0..cases {
        let shape = random_shape(&mut r, false);
        let [n, c, h, w] = shape;
        let cs = r.gen_range(1..=2);
        let spec = ConvSpec {
            cin: c,
            cout: r.gen_range(1..=3),
            k: 2,
        };
        let x = tensor(shape, uniform(&mut r, shape.iter().product(), -1.0, 1.0));
        let skip_shape = [n, cs, 2 * h, 2 * w];
        let skip = tensor(skip_shape, uniform(&mut r, skip_shape.iter().product(), -1.0, 1.0));
        let wt = uniform(&mut r, spec.weight_len(), -1.0, 1.0);
        let b = uniform(&mut r, spec.cout, -1.0, 1.0);
        let rr = uniform(&mut r, n * (cs + spec.cout) * 4 * h * w, -1.0, 1.0);
        let forward = |x: &Tensor4<f64>, skip: &Tensor4<f64>, wt: &[f64]| {
            let z = conv2d_forward(&upsample2(x), spec, wt, &b, SEQ).expect("valid shapes");
            concat_channels(skip, &z).expect("matching sizes")
        };
        let y = forward(&x, &skip, &wt);
        let (dskip, dz) = split_channels(&tensor(y.shape(), rr.clone()), cs);
        let g = conv2d_backward(&upsample2(&x), spec, &wt, &dz, true, SEQ).expect("valid shapes");
        let dx = upsample2_backward(&g.dx.expect("requested"));
        t.add(&dx.data, &numeric_gradient(&x.data, |d| project(&forward(&tensor(shape, d.to_vec()), &skip, &wt), &rr)));
        t.add(&dskip.data, &numeric_gradient(&skip.data, |d| {
            project(&forward(&x, &tensor(skip_shape, d.to_vec()), &wt), &rr)
        }));
        t.add(&g.dw, &numeric_gradient(&wt, |d| project(&forward(&x, &skip, d), &rr)));
    }
    t.report()
}

pub fn check_bce(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("bce", cases);
    for _ in 0..cases {
        let shape = random_shape(&mut r, false);
        let len = shape.iter().product();
        let p = tensor(shape, uniform(&mut r, len, 0.05, 0.95));
        let y = tensor(shape, uniform(&mut r, len, 0.0, 1.0));
        let (_, g) = bce_loss(&p, &y).expect("same shape");
        let n = numeric_gradient(&p.data, |d| bce_loss(&tensor(shape, d.to_vec()), &y).expect("same shape").0);
        t.add(&g.data, &n);
    }
    t.report()
}

/// Soft Jaccard in probability space and the combined loss in logit space.
pub fn check_jaccard(cases: usize, seed: u64) -> CheckReport {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tracker::new("soft_jaccard", cases);
    for _ in 0..cases {
        let shape = random_shape(&mut r, false);
        let len = shape.iter().product();
        let p = tensor(shape, uniform(&mut r, len, 0.05, 0.95));
        let y = tensor(shape, uniform(&mut r, len, 0.0, 1.0));
        let g = soft_jaccard_grad(&p, &y).expect("same shape");
        let n = numeric_gradient(&p.data, |d| soft_jaccard(&tensor(shape, d.to_vec()), &y).expect("same shape"));
        t.add(&g.data, &n);
        let z = tensor(shape, uniform(&mut r, len, -3.0, 3.0));
        let out = segmentation_loss(&z, &y).expect("same shape");
        let n = numeric_gradient(&z.data, |d| segmentation_loss(&tensor(shape, d.to_vec()), &y).expect("same shape").loss);
        t.add(&out.dlogits.data, &n);
    }
    t.report()
}

/// Every trainable tensor and the input of small complete networks under the combined loss.
pub fn check_network(seed: u64) -> CheckReport {
    let configs = [
        (UNetConfig { in_channels: 2, depth: 1, base_channels: 2 }, 2, 4),
        (UNetConfig { in_channels: 3, depth: 2, base_channels: 2 }, 2, 4),
        (UNetConfig { in_channels: 2, depth: 1, base_channels: 3 }, 3, 6),
    ];
    let mut t = Tracker::new("network", configs.len());
    for (k, (config, n, hw)) in configs.into_iter().enumerate() {
        let mut r = ChaCha8Rng::seed_from_u64(seed + k as u64);
        let (net, params) = UNet::init::<f64, _>(config, &mut r).expect("valid config");
        let shape = [n, config.in_channels, hw, hw];
        let x = tensor(shape, uniform(&mut r, shape.iter().product(), -1.0, 1.0));
        let y = tensor([n, 1, hw, hw], uniform(&mut r, n * hw * hw, 0.0, 1.0));
        let loss = |p: &ParamStore<f64>, x: &Tensor4<f64>| {
            let (z, _) = net.forward(p, x, Mode::Train, SEQ).expect("valid input");
            segmentation_loss(&z, &y).expect("same shape").loss
        };
        let (z, cache) = net.forward(&params, &x, Mode::Train, SEQ).expect("valid input");
        let out = segmentation_loss(&z, &y).expect("same shape");
        let (grads, dx) = net
            .backward(&params, cache.expect("train mode"), &out.dlogits, true, SEQ)
            .expect("valid cache");
        t.add(
            &dx.expect("requested").data,
            &numeric_gradient(&x.data, |d| loss(&params, &tensor(shape, d.to_vec()))),
        );
        for (i, p) in params.params.iter().enumerate().filter(|(_, p)| p.trainable) {
            let num = numeric_gradient(&p.data, |d| {
                let mut q = params.clone();
                q.get_mut(i).copy_from_slice(d);
                loss(&q, &x)
            });
            t.add(&grads[i], &num);
        }
    }
    t.report()
}

/// All checks with `cases` random shapes each.
pub fn run_all(cases: usize, seed: u64) -> Vec<CheckReport> {
    vec![
        check_convolution(cases, seed),
        check_batch_norm(cases, seed + 1),
        check_activations(cases, seed + 2),
        check_pooling(cases, seed + 3),
        check_upsample_path(cases, seed + 4),
        check_bce(cases, seed + 5),
        check_jaccard(cases, seed + 6),
        check_network(seed + 7),
    ]
}
