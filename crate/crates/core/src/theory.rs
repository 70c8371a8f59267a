//! Divergences between non-negative vectors and executable checks of the
//! properties that separate overlap losses from KL-type objectives:
//! support-mismatch blow-up of KL, continuity and differentiability of the
//! overlap losses under smooth generators, and the ordering
//! KL -> TV -> Dice -> Jaccard of the induced convergence notions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::losses::{self, LossKind};

#[derive(Debug, Error, PartialEq)]
pub enum TheoryError {
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("entry {index} of {which} is negative or not finite ({value})")]
    InvalidEntry {
        which: &'static str,
        index: usize,
        value: f64,
    },
}

/// Two equal-length non-negative vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionPair {
    p: Vec<f64>,
    q: Vec<f64>,
}

impl DistributionPair {
    pub fn new(p: Vec<f64>, q: Vec<f64>) -> Result<Self, TheoryError> {
        if p.len() != q.len() {
            return Err(TheoryError::LengthMismatch(p.len(), q.len()));
        }
        for (which, v) in [("p", &p), ("q", &q)] {
            if let Some((index, &value)) = v
                .iter()
                .enumerate()
                .find(|(_, x)| !(x.is_finite() && **x >= 0.0))
            {
                return Err(TheoryError::InvalidEntry { which, index, value });
            }
        }
        Ok(Self { p, q })
    }

    pub fn p(&self) -> &[f64] {
        &self.p
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn swapped(&self) -> Self {
        Self {
            p: self.q.clone(),
            q: self.p.clone(),
        }
    }

    /// Both vectors sum to 1 within 1e-9.
    pub fn is_normalized(&self) -> bool {
        let close = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs() <= 1e-9;
        close(&self.p) && close(&self.q)
    }
}

/// `sum p_i ln(p_i / q_i)` with `0 ln(0/q) = 0`; `+inf` when some `p_i > 0`
/// meets `q_i = 0`.
pub fn kl_divergence(pair: &DistributionPair) -> f64 {
    let mut total = 0.0;
    for (&p, &q) in pair.p.iter().zip(&pair.q) {
        if p == 0.0 {
            continue;
        }
        if q == 0.0 {
            return f64::INFINITY;
        }
        total += p * (p / q).ln();
    }
    total
}

/// Component-wise supremum distance `max_i |p_i - q_i|`.
pub fn tv_distance(pair: &DistributionPair) -> f64 {
    pair.p
        .iter()
        .zip(&pair.q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Outcome of one named property check.
#[derive(Debug, Clone, Serialize)]
pub struct SubCheck {
    pub name: String,
    pub trials: usize,
    pub failures: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Value>,
}

impl SubCheck {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            trials: 0,
            failures: 0,
            witness: None,
        }
    }

    /// Record one trial; keeps the first failing witness.
    fn record(&mut self, ok: bool, witness: impl FnOnce() -> Value) {
        self.trials += 1;
        if !ok {
            self.failures += 1;
            if self.witness.is_none() {
                self.witness = Some(witness());
            }
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub trials: usize,
    pub failures: usize,
    pub seed: u64,
    pub checks: Vec<SubCheck>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

impl TheoremReport {
    fn from_checks(theorem: &str, trials: usize, seed: u64, checks: Vec<SubCheck>) -> Self {
        Self {
            theorem: theorem.to_string(),
            trials,
            failures: checks.iter().map(|c| c.failures).sum(),
            seed,
            checks,
            notes: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    pub fn check(&self, name: &str) -> Option<&SubCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random_simplex(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    // Exponential spacings give a uniform draw on the simplex.
    let raw: Vec<f64> = (0..n).map(|_| -(1.0 - rng.gen::<f64>()).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// KL is infinite under support mismatch, and not symmetric.
///
/// Each trial draws a binary `p` with at least one 1 and a `q` that is zero
/// wherever `p` is one. The asymmetry check evaluates a fixed witness and
/// then random normalized pairs until one shows `KL(p||q) != KL(q||p)`.
pub fn check_theorem1(trials: usize, seed: u64) -> TheoremReport {
    let mut rng = rng(seed);
    let mut infinite = SubCheck::new("support_mismatch_infinite");
    for _ in 0..trials {
        let n = rng.gen_range(2..=32);
        let mut p: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.5) as u8 as f64).collect();
        if p.iter().all(|&v| v == 0.0) {
            p[rng.gen_range(0..n)] = 1.0;
        }
        let q: Vec<f64> = p
            .iter()
            .map(|&v| if v == 1.0 { 0.0 } else { rng.gen::<f64>() })
            .collect();
        let pair = DistributionPair::new(p, q).expect("valid by construction");
        let kl = kl_divergence(&pair);
        infinite.record(kl == f64::INFINITY, || {
            json!({"p": pair.p(), "q": pair.q(), "kl": kl})
        });
    }

    let mut asym = SubCheck::new("asymmetry_witness");
    let fixed = DistributionPair::new(vec![0.8, 0.2], vec![0.5, 0.5]).expect("valid");
    let mut witness = Some(fixed);
    let mut found = None;
    while let Some(pair) = witness.take() {
        let fwd = kl_divergence(&pair);
        let back = kl_divergence(&pair.swapped());
        if fwd != back {
            found = Some(json!({"p": pair.p(), "q": pair.q(), "kl_pq": fwd, "kl_qp": back}));
            break;
        }
        let n = rng.gen_range(2..=8);
        witness = Some(
            DistributionPair::new(random_simplex(&mut rng, n), random_simplex(&mut rng, n))
                .expect("valid"),
        );
    }
    asym.trials = 1;
    asym.witness = found;

    let mut report = TheoremReport::from_checks("1", trials, seed, vec![infinite, asym]);
    report.notes.push(
        "KL is infinite only when q vanishes where p is positive; trials construct that case"
            .to_string(),
    );
    report
}

/// A map from parameters to per-voxel probabilities with an analytic
/// Jacobian-vector product.
pub trait Generator {
    fn n_params(&self) -> usize;
    fn n_outputs(&self) -> usize;
    fn forward(&self, theta: &[f64]) -> Vec<f64>;
    /// Directional derivative of the outputs along `dir`.
    fn jvp(&self, theta: &[f64], dir: &[f64]) -> Vec<f64>;
    /// Upper bound on `|J d|` over all parameters, for unit `d`.
    fn jacobian_bound(&self) -> f64;
}

/// `sigmoid(W z + b)` for a fixed latent input `z`.
#[derive(Debug, Clone)]
pub struct LinearSigmoidGenerator {
    latent: Vec<f64>,
    n_out: usize,
}

impl LinearSigmoidGenerator {
    pub fn new(latent: Vec<f64>, n_out: usize) -> Self {
        Self { latent, n_out }
    }

    fn pre_activation(&self, theta: &[f64], out: usize) -> f64 {
        let m = self.latent.len();
        let row = &theta[out * m..(out + 1) * m];
        let bias = theta[self.n_out * m + out];
        row.iter().zip(&self.latent).map(|(w, z)| w * z).sum::<f64>() + bias
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl Generator for LinearSigmoidGenerator {
    fn n_params(&self) -> usize {
        self.n_out * (self.latent.len() + 1)
    }

    fn n_outputs(&self) -> usize {
        self.n_out
    }

    fn forward(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_out)
            .map(|o| sigmoid(self.pre_activation(theta, o)))
            .collect()
    }

    fn jvp(&self, theta: &[f64], dir: &[f64]) -> Vec<f64> {
        let m = self.latent.len();
        (0..self.n_out)
            .map(|o| {
                let s = sigmoid(self.pre_activation(theta, o));
                let d_pre = dir[o * m..(o + 1) * m]
                    .iter()
                    .zip(&self.latent)
                    .map(|(d, z)| d * z)
                    .sum::<f64>()
                    + dir[self.n_out * m + o];
                s * (1.0 - s) * d_pre
            })
            .collect()
    }

    /// Output `o` moves by `s(1-s) (d_o . z + d_b)` with `s(1-s) <= 1/4`;
    /// Cauchy-Schwarz per output and summing over outputs gives
    /// `|J d| <= sqrt(|z|^2 + 1) / 4`.
    fn jacobian_bound(&self) -> f64 {
        (self.latent.iter().map(|z| z * z).sum::<f64>() + 1.0).sqrt() / 4.0
    }
}

/// Upper bound on the Euclidean norm of the loss gradient with respect to
/// the prediction, over all predictions in `[0, 1]`, for a truth with
/// `foreground` positive voxels among `n`.
///
/// For the Dice loss each partial is `-2 (g_i U - 2 p_i K) / U^2`; both
/// terms are non-negative and at most `U` (as `2K <= U`), and `U >= |G|`,
/// so every partial is at most `2 / |G|`. The Jaccard loss is
/// `2 L / (1 + L)` of the Dice loss, whose slope is at most 2.
pub fn loss_gradient_bound(loss: LossKind, n: usize, foreground: usize) -> Option<f64> {
    let dice = 2.0 * (n as f64).sqrt() / foreground.max(1) as f64;
    match loss {
        LossKind::Dsc => Some(dice),
        LossKind::Jaccard => Some(2.0 * dice),
        _ => None,
    }
}

/// Number of times the perturbation is halved in the continuity probe.
pub const CONTINUITY_HALVINGS: usize = 8;
/// Relative tolerance of the finest directional quotient.
pub const DIRECTIONAL_REL_TOL: f64 = 1e-3;

/// Continuity and differentiability probe of an overlap loss composed with
/// a smooth generator.
///
/// For random `theta`, truth, and unit direction `d`, the loss change along
/// `eps_k d` with `eps_k = 1e-2 / 2^k` must stay within the Lipschitz bound
/// `eps_k * |grad_P L| * |J d|` (so it vanishes with `eps_k`), and the
/// central quotient at the finest scale must match the analytic directional
/// derivative `grad_P L . J d`.
///
/// Monotone shrinkage of the change is deliberately not required: near a
/// zero of `a eps + b eps^2` it fails for smooth losses too.
pub fn check_theorem2_continuity(
    generator: &dyn Generator,
    loss: LossKind,
    trials: usize,
    seed: u64,
) -> TheoremReport {
    let mut rng = rng(seed);
    let n = generator.n_outputs();
    let np = generator.n_params();
    let mut zero = SubCheck::new("zero_perturbation");
    let mut lipschitz = SubCheck::new("lipschitz_change");
    let mut directional = SubCheck::new("directional_derivative");

    let eval = |theta: &[f64], truth: &[f64]| {
        loss.evaluate(&generator.forward(theta), truth)
            .expect("generator output length")
    };

    for _ in 0..trials {
        let theta: Vec<f64> = (0..np).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let mut truth: Vec<f64> = (0..n).map(|_| rng.gen_bool(0.4) as u8 as f64).collect();
        if truth.iter().all(|&t| t == 0.0) {
            truth[rng.gen_range(0..n)] = 1.0;
        }
        let mut dir: Vec<f64> = (0..np).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|d| d * d).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|d| *d /= norm);

        let fg = truth.iter().filter(|&&t| t > 0.0).count();
        let lip = loss_gradient_bound(loss, n, fg).map(|b| b * generator.jacobian_bound());
        let base = eval(&theta, &truth);
        let same = eval(&theta, &truth).value;
        zero.record(same == base.value, || json!({"theta": theta, "delta": same - base.value}));

        let shifted = |eps: f64| -> Vec<f64> {
            theta.iter().zip(&dir).map(|(t, d)| t + eps * d).collect()
        };
        let mut deltas = Vec::with_capacity(CONTINUITY_HALVINGS + 1);
        let mut quotients = Vec::with_capacity(CONTINUITY_HALVINGS + 1);
        let mut within = true;
        for k in 0..=CONTINUITY_HALVINGS {
            let eps = 1e-2 / (1u64 << k) as f64;
            let up = eval(&shifted(eps), &truth).value;
            let down = eval(&shifted(-eps), &truth).value;
            let delta = (up - base.value).abs();
            // Floating-point noise floor for differences of O(1) loss values.
            if let Some(lip) = lip {
                within &= delta <= lip * eps + 1e-14;
            }
            deltas.push(delta);
            quotients.push((up - down) / (2.0 * eps));
        }
        if lip.is_some() {
            lipschitz.record(within, || json!({"theta": theta, "deltas": deltas, "bound": lip}));
        }

        let jp = generator.jvp(&theta, &dir);
        let analytic: f64 = base.grad.iter().zip(&jp).map(|(g, j)| g * j).sum();
        let finest = quotients[CONTINUITY_HALVINGS];
        let err = (finest - analytic).abs() / analytic.abs().max(1e-6);
        directional.record(err <= DIRECTIONAL_REL_TOL, || {
            json!({"theta": theta, "analytic": analytic, "numeric": finest, "rel_error": err})
        });
    }

    TheoremReport::from_checks(
        &format!("2:{}", loss.name()),
        trials,
        seed,
        vec![zero, lipschitz, directional],
    )
}

fn random_unit_pair(rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
    let n = rng.gen_range(2..=64);
    let mut p: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    let q: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    if p.iter().all(|&v| v == 0.0) {
        p[0] = 1.0;
    }
    (p, q)
}

/// Dice loss of `P_n = clamp(P + noise/n)` against `P` for `n = 1..=terms`.
pub fn dice_sequence(target: &[f64], noise: &[f64], terms: usize) -> Vec<f64> {
    (1..=terms)
        .map(|n| {
            let pn: Vec<f64> = target
                .iter()
                .zip(noise)
                .map(|(p, e)| (p + e / n as f64).clamp(0.0, 1.0))
                .collect();
            losses::dsc(&pn, target).expect("equal lengths").value
        })
        .collect()
}

/// Least-squares slope of `ln L_n` against `ln n`, skipping zero terms.
pub fn log_log_slope(values: &[f64]) -> f64 {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.0)
        .map(|(i, v)| (((i + 1) as f64).ln(), v.ln()))
        .collect();
    let m = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NEG_INFINITY;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

/// Upper envelope `e_n = max_{m >= n} L_m` sampled at `n = 1, 2, 4, ...`.
pub fn dyadic_envelope(values: &[f64]) -> Vec<f64> {
    let mut tail = vec![0.0; values.len()];
    let mut running = 0.0f64;
    for i in (0..values.len()).rev() {
        running = running.max(values[i]);
        tail[i] = running;
    }
    let mut out = Vec::new();
    let mut n = 1;
    while n <= values.len() {
        out.push(tail[n - 1]);
        n *= 2;
    }
    out
}

/// Sequence length of the convergence check.
pub const SEQUENCE_TERMS: usize = 1024;

/// Ordering of the convergence notions.
///
/// * `dice_le_jaccard_le_2dice` and `jaccard_identity` on random pairs in
///   `[0,1]^N`;
/// * `sequence_convergence`: `L_DSC(P + noise/n, P)` has a negative log-log
///   slope and a strictly decreasing dyadic upper envelope over
///   `n = 1..=1024` (one sequence per `trials / 100` with at least one);
/// * `pinsker`: `sup_i |p_i - q_i| <= sqrt(KL/2)` on normalized pairs.
pub fn check_theorem3_ordering(trials: usize, seed: u64) -> TheoremReport {
    let mut rng = rng(seed);
    let mut ordering = SubCheck::new("dice_le_jaccard_le_2dice");
    let mut identity = SubCheck::new("jaccard_identity");
    for _ in 0..trials {
        let (p, q) = random_unit_pair(&mut rng);
        let d = losses::dsc(&p, &q).expect("equal lengths").value;
        let j = losses::jaccard(&p, &q).expect("equal lengths").value;
        ordering.record(d <= j + 1e-12 && j <= 2.0 * d + 1e-12, || json!({"p": p, "q": q, "dsc": d, "jaccard": j}));
        let gap = (j - 2.0 * d / (1.0 + d)).abs();
        identity.record(gap <= 1e-9, || json!({"p": p, "q": q, "gap": gap}));
    }

    let mut sequence = SubCheck::new("sequence_convergence");
    let sequences = if trials == 0 { 0 } else { (trials / 100).max(1) };
    for _ in 0..sequences {
        let n = rng.gen_range(2..=64);
        let mut target: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        target[0] = target[0].max(0.5);
        let noise: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values = dice_sequence(&target, &noise, SEQUENCE_TERMS);
        let slope = log_log_slope(&values);
        let env = dyadic_envelope(&values);
        let decreasing = env.windows(2).all(|w| w[1] < w[0]) || env.iter().all(|&v| v == 0.0);
        sequence.record(slope < 0.0 && decreasing, || {
            json!({"target": target, "noise": noise, "slope": slope, "envelope": env})
        });
    }

    let mut pinsker = SubCheck::new("pinsker");
    for _ in 0..trials {
        let n = rng.gen_range(2..=64);
        let pair = DistributionPair::new(random_simplex(&mut rng, n), random_simplex(&mut rng, n))
            .expect("valid");
        debug_assert!(pair.is_normalized());
        let tv = tv_distance(&pair);
        let kl = kl_divergence(&pair);
        pinsker.record(tv <= (kl / 2.0).sqrt() + 1e-12, || {
            json!({"p": pair.p(), "q": pair.q(), "tv": tv, "kl": kl})
        });
    }

    let mut report = TheoremReport::from_checks(
        "3",
        trials,
        seed,
        vec![ordering, identity, sequence, pinsker],
    );
    report.notes.push(
        "Pinsker is checked on normalized pairs, where the sup-norm distance is bounded by the standard total variation".to_string(),
    );
    report
}
