//! Overlap losses (soft Dice, Jaccard), the no-square Dice variant, re-weighted
//! cross entropy, and the weighted multi-head composite.
//!
//! Every loss works on flat `f64` slices so the same code serves training,
//! gradient checks, and the FFI. The `Volume`-level wrappers add dimension and
//! domain checks.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::volgrid::{BinaryMask, Dims, ProbabilityMap, Spacing, Volume};

/// Probability clamp used before taking logarithms.
pub const CE_EPSILON: f64 = 1e-7;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("length mismatch: prediction has {pred} voxels, truth has {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("dims mismatch: {pred} vs {truth}")]
    DimsMismatch { pred: Dims, truth: Dims },
    #[error("supervision weights must be non-negative and sum to 1, got {0:?}")]
    InvalidWeights([f64; 3]),
    #[error("composite heads have different lengths")]
    HeadMismatch,
}

/// A loss value with its gradient with respect to every prediction voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Set when the loss hit its degenerate empty-input case.
    pub degenerate: bool,
}

impl LossEval {
    pub fn grad_volume(&self, dims: Dims, spacing: Spacing) -> Volume {
        Volume::new(dims, spacing, self.grad.iter().map(|&g| g as f32).collect())
            .expect("gradient length equals prediction length")
    }
}

/// Which derivative to attach to the no-square Dice variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoSquareGradient {
    /// `-2 (g_i L - 2K) / L^2`, the formula as usually printed.
    Printed,
    /// `-2 (g_i L - K) / L^2`, the exact derivative of `1 - 2K/L`.
    Exact,
}

/// Per-class weights for cross entropy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ClassWeights {
    pub foreground: f64,
    pub background: f64,
}

impl ClassWeights {
    pub const UNIT: ClassWeights = ClassWeights {
        foreground: 1.0,
        background: 1.0,
    };

    /// Inverse class frequency normalised to mean 1 over the voxels:
    /// `w_fg = N / (2 N_fg)`, `w_bg = N / (2 N_bg)`. Falls back to unit
    /// weights when either class is absent.
    pub fn inverse_frequency(truth: &[f64]) -> Self {
        let n = truth.len() as f64;
        let n_fg: f64 = truth.iter().sum();
        let n_bg = n - n_fg;
        if n_fg <= 0.0 || n_bg <= 0.0 {
            return Self::UNIT;
        }
        Self {
            foreground: n / (2.0 * n_fg),
            background: n / (2.0 * n_bg),
        }
    }
}

/// The loss families a network head can be trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Dsc,
    Jaccard,
    DscNoSquare(NoSquareGradient),
    /// Cross entropy re-weighted by inverse class frequency of each sample.
    WeightedCe,
    /// Plain cross entropy, both weights 1.
    Ce,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Dsc => "dsc",
            LossKind::Jaccard => "jaccard",
            LossKind::DscNoSquare(NoSquareGradient::Printed) => "dsc-nosquare",
            LossKind::DscNoSquare(NoSquareGradient::Exact) => "dsc-nosquare-exact",
            LossKind::WeightedCe => "wce",
            LossKind::Ce => "ce",
        }
    }

    pub fn evaluate(&self, pred: &[f64], truth: &[f64]) -> Result<LossEval, LossError> {
        match *self {
            LossKind::Dsc => dsc(pred, truth),
            LossKind::Jaccard => jaccard(pred, truth),
            LossKind::DscNoSquare(g) => dsc_nosquare(pred, truth, g),
            LossKind::WeightedCe => reweighted_ce(pred, truth, None),
            LossKind::Ce => reweighted_ce(pred, truth, Some(ClassWeights::UNIT)),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "dsc" => LossKind::Dsc,
            "jaccard" => LossKind::Jaccard,
            "dsc-nosquare" => LossKind::DscNoSquare(NoSquareGradient::Printed),
            "dsc-nosquare-exact" => LossKind::DscNoSquare(NoSquareGradient::Exact),
            "wce" | "reweight-ce" => LossKind::WeightedCe,
            "ce" => LossKind::Ce,
            other => return Err(format!("unknown loss {other:?}")),
        })
    }
}

fn check_len(pred: &[f64], truth: &[f64]) -> Result<(), LossError> {
    if pred.len() != truth.len() {
        return Err(LossError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    Ok(())
}

/// `K = sum p_i g_i` and `U = sum p_i^2 + sum g_i^2`.
pub fn overlap_terms(pred: &[f64], truth: &[f64]) -> (f64, f64) {
    let mut k = 0.0;
    let mut u = 0.0;
    for (&p, &g) in pred.iter().zip(truth) {
        k += p * g;
        u += p * p + g * g;
    }
    (k, u)
}

fn degenerate(n: usize) -> LossEval {
    LossEval {
        value: 1.0,
        grad: vec![0.0; n],
        degenerate: true,
    }
}

/// Soft Dice loss `1 - 2K/U` with gradient `-2 (g_i U - 2K p_i) / U^2`.
///
/// Both inputs empty (`U = 0`) yields value 1 and a zero gradient.
pub fn dsc(pred: &[f64], truth: &[f64]) -> Result<LossEval, LossError> {
    check_len(pred, truth)?;
    let (k, u) = overlap_terms(pred, truth);
    if u == 0.0 {
        return Ok(degenerate(pred.len()));
    }
    let u2 = u * u;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &g)| -2.0 * (g * u - 2.0 * k * p) / u2)
        .collect();
    Ok(LossEval {
        value: 1.0 - 2.0 * k / u,
        grad,
        degenerate: false,
    })
}

/// Soft Jaccard loss `1 - K/(U - K)` with gradient
/// `-[g_i (U - K) - K (2 p_i - g_i)] / (U - K)^2`.
///
/// For non-negative inputs `U - K = sum p^2 + sum g (g - p)` vanishes only
/// when `U` does, so the empty case is the only guard needed.
pub fn jaccard(pred: &[f64], truth: &[f64]) -> Result<LossEval, LossError> {
    check_len(pred, truth)?;
    let (k, u) = overlap_terms(pred, truth);
    let d = u - k;
    if u == 0.0 || d == 0.0 {
        return Ok(degenerate(pred.len()));
    }
    let d2 = d * d;
    let grad = pred
        .iter()
        .zip(truth)
        .map(|(&p, &g)| -(g * d - k * (2.0 * p - g)) / d2)
        .collect();
    Ok(LossEval {
        value: 1.0 - k / d,
        grad,
        degenerate: false,
    })
}

/// Dice loss with a linear denominator, `1 - 2K/L`, `L = sum p + sum g`.
///
/// Its gradient depends on voxel `i` only through `g_i`, so it is constant
/// within each ground-truth class.
pub fn dsc_nosquare(
    pred: &[f64],
    truth: &[f64],
    gradient: NoSquareGradient,
) -> Result<LossEval, LossError> {
    check_len(pred, truth)?;
    let mut k = 0.0;
    let mut l = 0.0;
    for (&p, &g) in pred.iter().zip(truth) {
        k += p * g;
        l += p + g;
    }
    if l == 0.0 {
        return Ok(degenerate(pred.len()));
    }
    let l2 = l * l;
    let offset = match gradient {
        NoSquareGradient::Printed => 2.0 * k,
        NoSquareGradient::Exact => k,
    };
    let grad = truth.iter().map(|&g| -2.0 * (g * l - offset) / l2).collect();
    Ok(LossEval {
        value: 1.0 - 2.0 * k / l,
        grad,
        degenerate: false,
    })
}

/// Class-weighted binary cross entropy averaged over voxels.
///
/// `weights = None` uses [`ClassWeights::inverse_frequency`] of `truth`.
/// Predictions are clamped to `[eps, 1 - eps]`; the gradient is zero where
/// the clamp is active.
pub fn reweighted_ce(
    pred: &[f64],
    truth: &[f64],
    weights: Option<ClassWeights>,
) -> Result<LossEval, LossError> {
    check_len(pred, truth)?;
    let w = weights.unwrap_or_else(|| ClassWeights::inverse_frequency(truth));
    let n = pred.len().max(1) as f64;
    let lo = CE_EPSILON;
    let hi = 1.0 - CE_EPSILON;
    let mut value = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &g) in pred.iter().zip(truth) {
        let pc = p.clamp(lo, hi);
        let inside = p > lo && p < hi;
        value -= w.foreground * g * pc.ln() + w.background * (1.0 - g) * (1.0 - pc).ln();
        let d = if inside {
            -(w.foreground * g / pc - w.background * (1.0 - g) / (1.0 - pc)) / n
        } else {
            0.0
        };
        grad.push(d);
    }
    Ok(LossEval {
        value: value / n,
        grad,
        degenerate: false,
    })
}

fn volume_pair(pred: &ProbabilityMap, truth: &BinaryMask) -> Result<(Vec<f64>, Vec<f64>), LossError> {
    if pred.dims() != truth.dims() {
        return Err(LossError::DimsMismatch {
            pred: pred.dims(),
            truth: truth.dims(),
        });
    }
    Ok((pred.volume().to_f64(), truth.volume().to_f64()))
}

pub fn dsc_loss(pred: &ProbabilityMap, truth: &BinaryMask) -> Result<LossEval, LossError> {
    let (p, g) = volume_pair(pred, truth)?;
    dsc(&p, &g)
}

pub fn jaccard_loss(pred: &ProbabilityMap, truth: &BinaryMask) -> Result<LossEval, LossError> {
    let (p, g) = volume_pair(pred, truth)?;
    jaccard(&p, &g)
}

pub fn dsc_loss_nosquare(
    pred: &ProbabilityMap,
    truth: &BinaryMask,
    gradient: NoSquareGradient,
) -> Result<LossEval, LossError> {
    let (p, g) = volume_pair(pred, truth)?;
    dsc_nosquare(&p, &g, gradient)
}

pub fn reweighted_ce_loss(
    pred: &ProbabilityMap,
    truth: &BinaryMask,
    weights: Option<ClassWeights>,
) -> Result<LossEval, LossError> {
    let (p, g) = volume_pair(pred, truth)?;
    reweighted_ce(&p, &g, weights)
}

/// Weights of the main, stage-2, and stage-3 supervision heads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupervisionWeights {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl SupervisionWeights {
    pub const BASELINE: SupervisionWeights = SupervisionWeights {
        alpha: 1.0,
        beta: 0.0,
        gamma: 0.0,
    };

    pub fn new(alpha: f64, beta: f64, gamma: f64) -> Result<Self, LossError> {
        let w = [alpha, beta, gamma];
        let valid = w.iter().all(|v| v.is_finite() && *v >= 0.0)
            && (alpha + beta + gamma - 1.0).abs() <= 1e-9;
        if !valid {
            return Err(LossError::InvalidWeights(w));
        }
        Ok(Self { alpha, beta, gamma })
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha, self.beta, self.gamma]
    }
}

impl Default for SupervisionWeights {
    fn default() -> Self {
        Self {
            alpha: 0.8,
            beta: 0.15,
            gamma: 0.05,
        }
    }
}

/// The weighted multi-head loss. `head_grads[k]` is already scaled by the
/// k-th weight and is the gradient to feed back through that head.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeEval {
    pub value: f64,
    pub head_values: [f64; 3],
    pub head_grads: [Vec<f64>; 3],
}

pub fn composite_loss(
    main: &LossEval,
    stage2: &LossEval,
    stage3: &LossEval,
    weights: SupervisionWeights,
) -> Result<CompositeEval, LossError> {
    let n = main.grad.len();
    if stage2.grad.len() != n || stage3.grad.len() != n {
        return Err(LossError::HeadMismatch);
    }
    let w = weights.as_array();
    let heads = [main, stage2, stage3];
    let value = w[0] * main.value + w[1] * stage2.value + w[2] * stage3.value;
    let head_grads = std::array::from_fn(|k| heads[k].grad.iter().map(|&g| w[k] * g).collect());
    Ok(CompositeEval {
        value,
        head_values: [main.value, stage2.value, stage3.value],
        head_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const PRED: [f64; 4] = [0.5, 0.5, 0.0, 0.0];
    const GT: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12
    }

    #[test]
    fn dsc_hand_example() {
        let e = dsc(&PRED, &GT).unwrap();
        assert!(close(e.value, 1.0 / 3.0));
        let expect = [-8.0 / 9.0, 4.0 / 9.0, 0.0, 0.0];
        for (g, x) in e.grad.iter().zip(expect) {
            assert!(close(*g, x), "{g} vs {x}");
        }
    }

    #[test]
    fn jaccard_hand_example() {
        let e = jaccard(&PRED, &GT).unwrap();
        assert!(close(e.value, 0.5));
        let expect = [-1.0, 0.5, 0.0, 0.0];
        for (g, x) in e.grad.iter().zip(expect) {
            assert!(close(*g, x), "{g} vs {x}");
        }
    }

    #[test]
    fn perfect_overlap_is_zero() {
        let m = [1.0, 0.0, 1.0, 1.0, 0.0];
        assert_eq!(dsc(&m, &m).unwrap().value, 0.0);
        assert_eq!(jaccard(&m, &m).unwrap().value, 0.0);
        for g in [NoSquareGradient::Printed, NoSquareGradient::Exact] {
            assert_eq!(dsc_nosquare(&m, &m, g).unwrap().value, 0.0);
        }
    }

    #[test]
    fn disjoint_supports_give_one() {
        let p = [0.0, 0.7, 0.2];
        let g = [1.0, 0.0, 0.0];
        assert_eq!(dsc(&p, &g).unwrap().value, 1.0);
        assert_eq!(jaccard(&p, &g).unwrap().value, 1.0);
    }

    #[test]
    fn empty_inputs_are_degenerate() {
        let z = [0.0; 5];
        for e in [
            dsc(&z, &z).unwrap(),
            jaccard(&z, &z).unwrap(),
            dsc_nosquare(&z, &z, NoSquareGradient::Printed).unwrap(),
        ] {
            assert_eq!(e.value, 1.0);
            assert!(e.degenerate);
            assert!(e.grad.iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(matches!(
            dsc(&[0.0; 3], &[0.0; 4]),
            Err(LossError::LengthMismatch { pred: 3, truth: 4 })
        ));
        assert!(jaccard(&[0.0; 3], &[0.0; 4]).is_err());
        assert!(reweighted_ce(&[0.0; 3], &[0.0; 4], None).is_err());
    }

    #[test]
    fn volume_wrappers_check_dims() {
        let a = ProbabilityMap::new(Volume::zeros(Dims::new(2, 2, 1), Spacing::UNIT).unwrap()).unwrap();
        let b = BinaryMask::new(Volume::zeros(Dims::new(4, 1, 1), Spacing::UNIT).unwrap()).unwrap();
        assert!(matches!(dsc_loss(&a, &b), Err(LossError::DimsMismatch { .. })));
    }

    #[test]
    fn nosquare_background_gradient_is_4k_over_l2() {
        let p = [0.3, 0.9, 0.1, 0.6, 0.2];
        let g = [1.0, 1.0, 0.0, 0.0, 0.0];
        let e = dsc_nosquare(&p, &g, NoSquareGradient::Printed).unwrap();
        let k = 0.3 + 0.9;
        let l = p.iter().sum::<f64>() + 2.0;
        for i in 2..5 {
            assert!(close(e.grad[i], 4.0 * k / (l * l)));
        }
        assert_eq!(e.grad[0], e.grad[1]);
    }

    #[test]
    fn ce_perfect_prediction_is_near_zero() {
        let m = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let e = reweighted_ce(&m, &m, None).unwrap();
        assert!((e.value - (-(1.0 - CE_EPSILON).ln())).abs() < 1e-15);
        assert!(e.value < 1e-6);
    }

    #[test]
    fn balanced_mask_gives_unit_weights() {
        let w = ClassWeights::inverse_frequency(&[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(w, ClassWeights::UNIT);
        let w = ClassWeights::inverse_frequency(&[0.0; 4]);
        assert_eq!(w, ClassWeights::UNIT);
        let w = ClassWeights::inverse_frequency(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!((w.foreground, w.background), (2.0, 4.0 / 6.0));
    }

    #[test]
    fn supervision_weights_must_sum_to_one() {
        assert!(SupervisionWeights::new(0.8, 0.15, 0.05).is_ok());
        assert!(SupervisionWeights::new(0.5, 0.333, 0.167).is_ok());
        assert!(SupervisionWeights::new(0.8, 0.2, 0.1).is_err());
        assert!(SupervisionWeights::new(1.2, -0.2, 0.0).is_err());
    }

    #[test]
    fn composite_examples() {
        let a = dsc(&PRED, &GT).unwrap();
        let b = jaccard(&PRED, &GT).unwrap();
        let c = dsc(&[0.1, 0.9, 0.0, 0.0], &GT).unwrap();
        let base = composite_loss(&a, &b, &c, SupervisionWeights::BASELINE).unwrap();
        assert_eq!(base.value, a.value);
        assert!(base.head_grads[1].iter().all(|&g| g == 0.0));

        let w = SupervisionWeights::default();
        let e = composite_loss(&a, &b, &c, w).unwrap();
        assert!(close(e.value, 0.8 * a.value + 0.15 * b.value + 0.05 * c.value));
        assert!(close(e.head_grads[2][1], 0.05 * c.grad[1]));

        let same = composite_loss(&a, &a, &a, SupervisionWeights::new(0.5, 0.333, 0.167).unwrap()).unwrap();
        assert!(close(same.value, a.value));
    }

    fn pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0.0f64..=1.0, n),
                prop::collection::vec(prop::bool::ANY, n),
            )
                .prop_map(|(p, g)| (p, g.into_iter().map(|b| b as u8 as f64).collect()))
        })
    }

    proptest! {
        #[test]
        fn ranges_and_ordering((p, g) in pair()) {
            let d = dsc(&p, &g).unwrap().value;
            let j = jaccard(&p, &g).unwrap().value;
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((0.0..=1.0).contains(&j));
            prop_assert!(d <= j + 1e-12);
            prop_assert!(j <= 2.0 * d + 1e-12);
        }

        #[test]
        fn binary_arguments_commute(
            a in prop::collection::vec(prop::bool::ANY, 1..30),
            seed in prop::collection::vec(prop::bool::ANY, 30),
        ) {
            let p: Vec<f64> = a.iter().map(|&b| b as u8 as f64).collect();
            let g: Vec<f64> = seed[..p.len()].iter().map(|&b| b as u8 as f64).collect();
            prop_assert_eq!(dsc(&p, &g).unwrap().value, dsc(&g, &p).unwrap().value);
            prop_assert_eq!(jaccard(&p, &g).unwrap().value, jaccard(&g, &p).unwrap().value);
        }

        #[test]
        fn empty_truth_decouples_overlap(p in prop::collection::vec(0.01f64..=1.0, 1..30)) {
            let g = vec![0.0; p.len()];
            let (k, _) = overlap_terms(&p, &g);
            prop_assert_eq!(k, 0.0);
            prop_assert_eq!(dsc(&p, &g).unwrap().value, 1.0);
        }

        #[test]
        fn nosquare_gradient_is_classwise_constant((p, g) in pair()) {
            for mode in [NoSquareGradient::Printed, NoSquareGradient::Exact] {
                let e = dsc_nosquare(&p, &g, mode).unwrap();
                let fg: Vec<f64> = e.grad.iter().zip(&g).filter(|(_, &t)| t == 1.0).map(|(&d, _)| d).collect();
                let bg: Vec<f64> = e.grad.iter().zip(&g).filter(|(_, &t)| t == 0.0).map(|(&d, _)| d).collect();
                prop_assert!(fg.windows(2).all(|w| w[0] == w[1]));
                prop_assert!(bg.windows(2).all(|w| w[0] == w[1]));
            }
        }
    }
}
