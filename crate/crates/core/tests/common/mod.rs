#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use volseg::net::{Module, Tensor5};
use volseg::volgrid::Dims;

pub const FD_STEP: f64 = 1e-6;
pub const FD_REL_TOL: f64 = 1e-3;
/// Denominator floor. Some gradients are exactly zero (a conv bias feeding a
/// train-mode batch norm), where the central difference is pure round-off of
/// order `eps * |L| / h`; those compare absolutely.
pub const FD_FLOOR: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, b: usize, c: usize, d: Dims) -> Tensor5<f64> {
    let n = b * c * d.len();
    Tensor5::from_vec(b, c, d, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

pub fn weighted_sum(out: &Tensor5<f64>, w: &Tensor5<f64>) -> f64 {
    out.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Worst relative error over sampled coordinates of the input and of every
/// trainable parameter, for the objective `sum(f(x) * w)`.
pub struct FdReport {
    pub worst: f64,
    pub where_: String,
    pub checked: usize,
}

impl FdReport {
    fn note(&mut self, rel: f64, place: String) {
        self.checked += 1;
        if rel > self.worst {
            self.worst = rel;
            self.where_ = place;
        }
    }
}

/// `objective(m, x)` runs a fresh forward pass and returns the scalar loss;
/// `gradients(m, x)` zeroes the parameter gradients, runs forward and
/// backward, and returns the input gradient.
pub fn fd_check<M: Module<f64>>(
    module: &mut M,
    x: &Tensor5<f64>,
    samples: usize,
    seed: u64,
    objective: impl Fn(&mut M, &Tensor5<f64>) -> f64,
    gradients: impl Fn(&mut M, &Tensor5<f64>) -> Tensor5<f64>,
) -> FdReport {
    let mut r = rng(seed);
    let mut report = FdReport {
        worst: 0.0,
        where_: String::new(),
        checked: 0,
    };
    let gx = gradients(module, x);
    let mut param_grads = Vec::new();
    module.visit(&mut |p| param_grads.push((p.name.clone(), p.trainable, p.grad.clone())));

    for _ in 0..samples {
        let i = r.gen_range(0..x.data().len());
        let mut xp = x.clone();
        xp.data_mut()[i] += FD_STEP;
        let up = objective(module, &xp);
        xp.data_mut()[i] -= 2.0 * FD_STEP;
        let down = objective(module, &xp);
        report.note(rel_err(gx.data()[i], (up - down) / (2.0 * FD_STEP)), format!("input[{i}]"));
    }

    for (k, (name, trainable, grad)) in param_grads.iter().enumerate() {
        if !trainable {
            continue;
        }
        for _ in 0..samples.min(grad.len()) {
            let j = r.gen_range(0..grad.len());
            let bump = |m: &mut M, delta: f64| {
                let mut idx = 0;
                m.visit_mut(&mut |p| {
                    if idx == k {
                        p.value[j] += delta;
                    }
                    idx += 1;
                });
            };
            bump(module, FD_STEP);
            let up = objective(module, x);
            bump(module, -2.0 * FD_STEP);
            let down = objective(module, x);
            bump(module, FD_STEP);
            report.note(rel_err(grad[j], (up - down) / (2.0 * FD_STEP)), format!("{name}[{j}]"));
        }
    }
    report
}

pub mod oracle;
