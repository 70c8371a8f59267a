//! Central finite-difference checks of the analytic loss gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::losses::{self, LossKind, NoSquareGradient};

/// Finite-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Relative tolerance between analytic and numeric gradients.
pub const FD_REL_TOL: f64 = 1e-4;
/// Voxels per trial (a 4x4x4 grid).
pub const TRIAL_VOXELS: usize = 64;

/// `|a - b| / max(|a|, |b|)`, with a tiny floor so two zeros compare equal.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs()).max(1e-12);
    (a - b).abs() / scale
}

/// Central differences of `f` at `x` along every coordinate.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// A random prediction in [0.1, 0.9] and a binary truth. Near 0 the log in
/// cross entropy makes the step-1e-3 truncation error `h^2 / (3 p^2)` exceed
/// the tolerance, so predictions stay clear of it.
pub fn random_pair(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<f64>) {
    let pred = (0..n).map(|_| rng.gen_range(0.1..0.9)).collect();
    let mut truth: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() < 0.3) as u8 as f64).collect();
    if truth.iter().all(|&t| t == 0.0) {
        truth[rng.gen_range(0..n)] = 1.0;
    }
    (pred, truth)
}

#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub trial: usize,
    pub voxel: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

/// Evidence that the no-square Dice gradient ignores the prediction values.
#[derive(Debug, Clone, Serialize)]
pub struct DefectReport {
    /// True when every trial showed a class-wise constant gradient.
    pub defect: bool,
    pub classwise_constant_trials: usize,
    /// Trials where the squared-denominator Dice gradient varied within a class.
    pub dsc_counterexample_trials: usize,
    /// Largest relative gap between the printed formula and finite differences.
    pub printed_formula_max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub loss: String,
    pub trials: usize,
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub failures: usize,
    pub max_rel_error: f64,
    pub vacuous: bool,
    pub worst: Option<Witness>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nosquare: Option<DefectReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// True when `grad` takes a single value over each class of `truth`.
pub fn classwise_constant(grad: &[f64], truth: &[f64]) -> bool {
    let mut seen: [Option<f64>; 2] = [None, None];
    for (&d, &t) in grad.iter().zip(truth) {
        let slot = &mut seen[(t != 0.0) as usize];
        match *slot {
            None => *slot = Some(d),
            Some(v) if v != d => return false,
            Some(_) => {}
        }
    }
    true
}

/// Run the finite-difference suite for one loss family.
///
/// The no-square Dice variant is checked through its exact derivative (the
/// printed formula is not the derivative of its own loss); the report then
/// records how far the printed formula deviates and whether the class-wise
/// constant gradient defect shows up.
pub fn run_loss_gradcheck(kind: LossKind, trials: usize, seed: u64) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let checked = match kind {
        LossKind::DscNoSquare(_) => LossKind::DscNoSquare(NoSquareGradient::Exact),
        k => k,
    };
    let mut failures = 0;
    let mut worst: Option<Witness> = None;
    let mut defect = matches!(kind, LossKind::DscNoSquare(_)).then_some(DefectReport {
        defect: true,
        classwise_constant_trials: 0,
        dsc_counterexample_trials: 0,
        printed_formula_max_rel_error: 0.0,
    });

    for trial in 0..trials {
        let (pred, truth) = random_pair(&mut rng, TRIAL_VOXELS);
        let analytic = checked.evaluate(&pred, &truth).expect("equal lengths").grad;
        let f = |p: &[f64]| checked.evaluate(p, &truth).expect("equal lengths").value;
        let numeric = central_difference(f, &pred, FD_STEP);
        let mut trial_failed = false;
        for (voxel, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let e = rel_error(a, n);
            if e > FD_REL_TOL {
                trial_failed = true;
            }
            if worst.as_ref().is_none_or(|w| e > w.rel_error) {
                worst = Some(Witness {
                    trial,
                    voxel,
                    analytic: a,
                    numeric: n,
                    rel_error: e,
                });
            }
        }
        failures += trial_failed as usize;

        if let Some(d) = defect.as_mut() {
            let printed = losses::dsc_nosquare(&pred, &truth, NoSquareGradient::Printed)
                .expect("equal lengths")
                .grad;
            let constant = classwise_constant(&printed, &truth) && classwise_constant(&analytic, &truth);
            d.classwise_constant_trials += constant as usize;
            let squared = losses::dsc(&pred, &truth).expect("equal lengths").grad;
            d.dsc_counterexample_trials += (!classwise_constant(&squared, &truth)) as usize;
            for (&p, &n) in printed.iter().zip(&numeric) {
                d.printed_formula_max_rel_error = d.printed_formula_max_rel_error.max(rel_error(p, n));
            }
        }
    }
    if let Some(d) = defect.as_mut() {
        d.defect = d.classwise_constant_trials == trials;
    }

    GradcheckReport {
        loss: kind.name().to_string(),
        trials,
        seed,
        step: FD_STEP,
        tolerance: FD_REL_TOL,
        failures,
        max_rel_error: worst.as_ref().map_or(0.0, |w| w.rel_error),
        vacuous: trials == 0,
        worst,
        nosquare: defect,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_difference_of_a_quadratic_is_exact() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-3);
        assert!((g[0] - 4.0).abs() < 1e-9);
        assert!((g[1] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn zero_trials_is_vacuous() {
        let r = run_loss_gradcheck(LossKind::Dsc, 0, 1);
        assert!(r.vacuous && r.passed());
        assert!(r.worst.is_none());
    }

    #[test]
    fn core_losses_pass() {
        for kind in [LossKind::Dsc, LossKind::Jaccard, LossKind::WeightedCe, LossKind::Ce] {
            let r = run_loss_gradcheck(kind, 20, 7);
            assert!(r.passed(), "{kind}: {:?}", r.worst);
        }
    }

    #[test]
    fn nosquare_reports_defect() {
        let r = run_loss_gradcheck(LossKind::DscNoSquare(NoSquareGradient::Printed), 10, 3);
        assert!(r.passed());
        let d = r.nosquare.unwrap();
        assert!(d.defect);
        assert_eq!(d.dsc_counterexample_trials, 10);
        assert!(d.printed_formula_max_rel_error > FD_REL_TOL);
    }
}
