//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach stdout; exits non-zero on any failure.
//!
//! `VOLSEG_ACCEPT=1,7` restricts the run to the listed criteria.

mod common;

use std::fmt::Write as _;
use std::time::Instant;

use common::oracle::{mismatches, random_pair as random_masks, shifted_cubes};
use common::*;
use rand::Rng;
use volseg::gradcheck::{classwise_constant, run_loss_gradcheck, FD_REL_TOL as LOSS_REL_TOL, FD_STEP as LOSS_STEP};
use volseg::losses::{self, LossKind, NoSquareGradient};
use volseg::metrics;
use volseg::net::layers::{avg_pool, avg_pool_backward, BatchNorm3d, Conv3d, ConvTranspose3d};
use volseg::net::{DdspBlock, DdspConfig, Mode, Module, Net, NetConfig, Tensor5, Wiring};
use volseg::theory;
use volseg::train::run::log_csv;
use volseg::train::{rows_to_csv, run_ablation, train_run, AblationPlan, AblationTable, RunConfig};
use volseg::volgrid::{decode_vvf, encode_vvf, Dims, Dtype, Spacing, Volume};

const GRADIENT_TRIALS: usize = 100;
const GRADIENT_SECONDS: f64 = 10.0;
const IDENTITY_TRIALS: usize = 10_000;
const IDENTITY_TOL: f64 = 1e-9;
const THEOREM3_TRIALS: usize = 10_000;
const THEOREM1_TRIALS: usize = 1000;
const NOSQUARE_INPUTS: usize = 100;
const METRIC_PAIRS: usize = 200;
const METRIC_MAX_EXTENT: usize = 12;
const IMBALANCE_SEEDS: [u64; 3] = [1, 2, 3];
const IMBALANCE_DSC_MIN: f64 = 0.7;
const IMBALANCE_CE_MAX: f64 = 0.1;
const IMBALANCE_SECONDS: f64 = 3600.0;
const VVF_VOLUMES: usize = 1000;
const ABLATION_ROWS: [usize; 5] = [9, 3, 3, 6, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut detail = String::new();
    let mut pass = true;
    for (i, kind) in [LossKind::Dsc, LossKind::Jaccard, LossKind::WeightedCe].into_iter().enumerate() {
        let r = run_loss_gradcheck(kind, GRADIENT_TRIALS, 100 + i as u64);
        pass &= r.passed() && r.trials >= GRADIENT_TRIALS && !r.vacuous;
        let _ = write!(detail, "{} max rel {:.1e}; ", kind, r.max_rel_error);
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs < GRADIENT_SECONDS;
    let _ = write!(
        detail,
        "{GRADIENT_TRIALS} 4x4x4 pairs each, h={LOSS_STEP:e}, tol {LOSS_REL_TOL:e}, {secs:.2}s"
    );
    outcome(pass, detail)
}

fn jaccard_identity() -> Outcome {
    let mut r = rng(2);
    let mut violations = 0;
    let mut worst: f64 = 0.0;
    for _ in 0..IDENTITY_TRIALS {
        let n = r.gen_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
        let g: Vec<f64> = (0..n).map(|_| r.gen::<f64>()).collect();
        let d = losses::dsc(&p, &g).unwrap().value;
        let j = losses::jaccard(&p, &g).unwrap().value;
        let gap = (j - 2.0 * d / (1.0 + d)).abs();
        worst = worst.max(gap);
        violations += (gap > IDENTITY_TOL) as usize;
    }
    outcome(
        violations == 0,
        format!("{violations} violations in {IDENTITY_TRIALS} pairs, max gap {worst:.1e} (tol {IDENTITY_TOL:e})"),
    )
}

fn theorem3_chain() -> Outcome {
    let r = theory::check_theorem3_ordering(THEOREM3_TRIALS, 3);
    let count = |name: &str| r.check(name).map_or((0, 1), |c| (c.trials, c.failures));
    let (ot, of) = count("dice_le_jaccard_le_2dice");
    let (st, sf) = count("sequence_convergence");
    let (pt, pf) = count("pinsker");
    let pass = r.passed() && ot == THEOREM3_TRIALS && pt == THEOREM3_TRIALS && st > 0;
    outcome(
        pass,
        format!(
            "(a) ordering {of}/{ot} violations; (b) envelope over n=1..1024 failed {sf}/{st} sequences; (c) Pinsker {pf}/{pt} violations"
        ),
    )
}

fn theorem1() -> Outcome {
    let r = theory::check_theorem1(THEOREM1_TRIALS, 4);
    let inf = r.check("support_mismatch_infinite").unwrap();
    let witness = r.check("asymmetry_witness").and_then(|c| c.witness.clone());
    let pass = inf.trials == THEOREM1_TRIALS && inf.failures == 0 && witness.is_some();
    outcome(
        pass,
        format!(
            "+inf KL in {}/{} support-mismatch trials; asymmetry witness {}",
            inf.trials - inf.failures,
            inf.trials,
            witness.map_or("missing".to_string(), |w| w.to_string())
        ),
    )
}

fn nosquare_defect() -> Outcome {
    let mut r = rng(5);
    let (mut constant, mut counter) = (0, 0);
    for _ in 0..NOSQUARE_INPUTS {
        let n = 64;
        let pred: Vec<f64> = (0..n).map(|_| r.gen_range(0.01..0.99)).collect();
        let mut truth: Vec<f64> = (0..n).map(|_| r.gen_bool(0.3) as u8 as f64).collect();
        truth[0] = 1.0;
        truth[1] = 0.0;
        let ns = losses::dsc_nosquare(&pred, &truth, NoSquareGradient::Exact).unwrap();
        constant += classwise_constant(&ns.grad, &truth) as usize;
        let sq = losses::dsc(&pred, &truth).unwrap();
        counter += (!classwise_constant(&sq.grad, &truth)) as usize;
    }
    outcome(
        constant == NOSQUARE_INPUTS && counter == NOSQUARE_INPUTS,
        format!(
            "no-square gradient class-constant on {constant}/{NOSQUARE_INPUTS}; squared Dice counterexample on {counter}/{NOSQUARE_INPUTS}"
        ),
    )
}

fn fd_layer<M: Module<f64>>(
    m: &mut M,
    x: &Tensor5<f64>,
    out_dims: Dims,
    out_ch: usize,
    fwd: impl Fn(&mut M, &Tensor5<f64>) -> Tensor5<f64>,
    bwd: impl Fn(&mut M, &Tensor5<f64>, &Tensor5<f64>) -> Tensor5<f64>,
) -> FdReport {
    let w = random_tensor(&mut rng(99), x.batch(), out_ch, out_dims);
    fd_check(
        m,
        x,
        25,
        17,
        |m, x| weighted_sum(&fwd(m, x), &w),
        |m, x| {
            m.visit_mut(&mut |p| p.zero_grad());
            bwd(m, x, &w)
        },
    )
}

struct Stateless;

impl Module<f64> for Stateless {
    fn visit(&self, _: &mut dyn FnMut(&volseg::net::Param<f64>)) {}
    fn visit_mut(&mut self, _: &mut dyn FnMut(&mut volseg::net::Param<f64>)) {}
}

fn layer_correctness() -> Outcome {
    let mut r = rng(6);
    let mut results: Vec<(&str, f64)> = Vec::new();

    let d = Dims::new(6, 5, 4);
    let mut conv = Conv3d::<f64>::new("c", 2, 3, 3, 1, 2, &mut r).unwrap();
    conv.visit_mut(&mut |p| p.value.iter_mut().for_each(|v| *v *= 30.0));
    let x = random_tensor(&mut r, 2, 2, d);
    let rep = fd_layer(&mut conv, &x, d, 3, |m, x| m.forward(x).unwrap(), |m, x, g| m.backward(x, g));
    results.push(("conv3d", rep.worst));

    let mut up = ConvTranspose3d::<f64>::upsample2("u", 2, 2);
    let dx = Dims::new(3, 2, 4);
    let x = random_tensor(&mut r, 2, 2, dx);
    let od = up.output_dims(dx);
    let rep = fd_layer(&mut up, &x, od, 2, |m, x| m.forward(x).unwrap(), |m, x, g| m.backward(x, g));
    results.push(("transposed conv", rep.worst));

    let x = random_tensor(&mut r, 2, 2, Dims::new(7, 6, 5));
    let pd = avg_pool(&x, 3).dims();
    let rep = fd_layer(&mut Stateless, &x, pd, 2, |_, x| avg_pool(x, 3), |_, x, g| avg_pool_backward(g, x.dims(), 3));
    results.push(("avg pool", rep.worst));

    let mut bn = BatchNorm3d::<f64>::new("bn", 2);
    let x = random_tensor(&mut r, 2, 2, Dims::new(3, 3, 3));
    let w2 = random_tensor(&mut r, 2, 2, x.dims());
    let rep = fd_check(
        &mut bn,
        &x,
        25,
        18,
        |m, x| {
            let (y, _) = m.forward(x, Mode::Train);
            y.data().iter().zip(w2.data()).map(|(a, b)| b * a * a).sum()
        },
        |m, x| {
            m.visit_mut(&mut |p| p.zero_grad());
            let (y, c) = m.forward(x, Mode::Train);
            let g = Tensor5::from_vec(2, 2, x.dims(), y.data().iter().zip(w2.data()).map(|(a, b)| 2.0 * a * b).collect());
            m.backward(&c, &g)
        },
    );
    results.push(("batch norm", rep.worst));

    let config = NetConfig {
        widths: [2, 3, 4],
        ddsp: DdspConfig::new(vec![1, 2], vec![2], 2).unwrap(),
        ..NetConfig::default()
    };
    let mut net = Net::<f64>::new(config, 7).unwrap();
    net.visit_mut(&mut |p| {
        if p.name.ends_with("weight") {
            p.value.iter_mut().for_each(|v| *v *= 40.0);
        }
    });
    let d8 = Dims::cube(8);
    let x = random_tensor(&mut r, 1, 1, d8);
    let ws: Vec<Tensor5<f64>> = (0..3).map(|_| random_tensor(&mut r, 1, 1, d8)).collect();
    let rep = fd_check(
        &mut net,
        &x,
        4,
        19,
        |m, x| {
            let (h, _) = m.forward(x, Mode::Train).unwrap();
            h.as_array().iter().zip(&ws).map(|(h, w)| weighted_sum(h, w)).sum()
        },
        |m, x| {
            m.zero_grad();
            let (_, c) = m.forward(x, Mode::Train).unwrap();
            m.backward(&c, [&ws[0], &ws[1], &ws[2]])
        },
    );
    results.push(("network", rep.worst));

    let dflt = DdspConfig::default();
    let c_in = 16;
    let block = DdspBlock::<f32>::new("b", c_in, dflt.clone(), Wiring::Dense, &mut r).unwrap();
    let formula = dflt.output_channels(c_in) == c_in + 7 * dflt.growth && block.output_channels() == c_in + 7 * dflt.growth;

    let worst = results.iter().map(|(_, w)| *w).fold(0.0, f64::max);
    let mut detail: String = results.iter().map(|(n, w)| format!("{n} {w:.1e}; ")).collect();
    let _ = write!(
        detail,
        "tol {FD_REL_TOL:e}; DDSP channels {} = {c_in} + 7*{}",
        block.output_channels(),
        dflt.growth
    );
    outcome(worst <= FD_REL_TOL && formula, detail)
}

fn metrics_oracle() -> Outcome {
    let mut r = rng(7);
    let mut bad = 0;
    let mut first = String::new();
    for i in 0..METRIC_PAIRS {
        let (a, b) = random_masks(&mut r, METRIC_MAX_EXTENT);
        let m = mismatches(&a, &b);
        if !m.is_empty() {
            bad += 1;
            if first.is_empty() {
                first = format!(" first at pair {i}: {}", m.join(", "));
            }
        }
    }
    let (a, b) = shifted_cubes();
    let rep = metrics::evaluate(&a, &b).unwrap();
    let fixture = rep.dsc == 0.75 && rep.arvd_pct == Some(0.0);
    outcome(
        bad == 0 && fixture,
        format!(
            "{bad}/{METRIC_PAIRS} pairs differ from the brute-force oracle{first}; shifted 4^3 cube dsc {} arvd {:?}",
            rep.dsc, rep.arvd_pct
        ),
    )
}

/// The experiment configuration for the imbalance demonstration. The
/// optimizer defaults (lr 1e-3) learn too slowly at 2000 iterations on this
/// data; a larger step with one decay at the midpoint is used instead.
pub fn imbalance_config(loss: LossKind, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::parse("iterations = 2000\nval_every = 0\nlr = 0.01\nlr_decay_period = 1000\n").unwrap();
    cfg.loss = loss;
    cfg.seed = seed;
    cfg
}

fn imbalance() -> Outcome {
    let start = Instant::now();
    let mut pass = true;
    let mut detail = String::new();
    for (loss, ok) in [
        (LossKind::Dsc, &(|d: f64| d >= IMBALANCE_DSC_MIN) as &dyn Fn(f64) -> bool),
        (LossKind::Ce, &|d: f64| d <= IMBALANCE_CE_MAX),
    ] {
        let mut dice = Vec::new();
        for seed in IMBALANCE_SEEDS {
            let d = match train_run(&imbalance_config(loss, seed)) {
                Ok(out) => out.final_dice,
                Err(e) => {
                    let _ = write!(detail, "{loss} seed {seed} failed: {e}; ");
                    f64::NAN
                }
            };
            pass &= ok(d);
            dice.push(format!("{d:.3}"));
        }
        let _ = write!(detail, "{loss} val Dice [{}]; ", dice.join(", "));
    }
    let secs = start.elapsed().as_secs_f64();
    pass &= secs <= IMBALANCE_SECONDS;
    let _ = write!(
        detail,
        "need dsc >= {IMBALANCE_DSC_MIN}, ce <= {IMBALANCE_CE_MAX}; 32^3, fg <= 2%, 2000 iterations; {secs:.0}s"
    );
    outcome(pass, detail)
}

fn tiny_config(extra: &str) -> RunConfig {
    RunConfig::parse(&format!(
        "grid = 16\nradius = 1.5,2.5\nwidths = 2,2,4\ngrowth = 2\ntrain_cases = 2\nval_cases = 2\nval_every = 0\nlr = 0.01\n{extra}"
    ))
    .unwrap()
}

fn reproducibility() -> Outcome {
    let cfg = tiny_config("iterations = 6\nseed = 21\n");
    let a = train_run(&cfg).unwrap();
    let b = train_run(&cfg).unwrap();
    let runs = a.checkpoint() == b.checkpoint() && log_csv(&a.log) == log_csv(&b.log);

    let mut r = rng(9);
    let mut bad = 0;
    for i in 0..VVF_VOLUMES {
        let d = Dims::new(r.gen_range(1..=10), r.gen_range(1..=10), r.gen_range(1..=10));
        let s = Spacing::new(r.gen_range(0.2..3.0), r.gen_range(0.2..3.0), r.gen_range(0.2..3.0)).unwrap();
        let (dtype, data): (Dtype, Vec<f32>) = if i % 2 == 0 {
            (Dtype::U8, (0..d.len()).map(|_| r.gen_range(0..=255) as f32).collect())
        } else {
            (Dtype::F32, (0..d.len()).map(|_| r.gen_range(-1e6..1e6)).collect())
        };
        let v = Volume::new(d, s, data).unwrap();
        let bytes = encode_vvf(&v, dtype).unwrap();
        let back = decode_vvf(&bytes).unwrap();
        bad += (back != v || encode_vvf(&back, dtype).unwrap() != bytes) as usize;
    }
    outcome(
        runs && bad == 0,
        format!(
            "repeat run checkpoints and logs identical: {runs}; VVF round trip byte-identical on {}/{VVF_VOLUMES} volumes",
            VVF_VOLUMES - bad
        ),
    )
}

fn ablation() -> Outcome {
    let base = tiny_config("iterations = 20\n");
    let dir = tempfile::tempdir().unwrap();
    let mut pass = true;
    let mut detail = String::new();
    for (table, want) in AblationTable::ALL.into_iter().zip(ABLATION_ROWS) {
        let plan = AblationPlan {
            table,
            base: base.clone(),
            seeds: vec![1],
        };
        match run_ablation(&plan) {
            Ok(rows) => {
                let csv = rows_to_csv(&rows);
                std::fs::write(dir.path().join(format!("{table}.csv")), &csv).unwrap();
                let ok = rows.iter().filter(|r| r.status == "ok" && r.dice.is_some()).count();
                pass &= rows.len() == want && ok == want && csv.lines().count() == want + 1;
                let _ = write!(detail, "{table} {ok}/{want}; ");
            }
            Err(e) => {
                pass = false;
                let _ = write!(detail, "{table} error {e}; ");
            }
        }
    }
    let _ = write!(detail, "16^3 grid, 20 iterations per run");
    outcome(pass, detail)
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("VOLSEG_ACCEPT")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient fidelity", gradient_fidelity),
        (2, "jaccard-dice identity", jaccard_identity),
        (3, "convergence ordering chain", theorem3_chain),
        (4, "KL support mismatch and asymmetry", theorem1),
        (5, "no-square Dice defect", nosquare_defect),
        (6, "layer correctness", layer_correctness),
        (7, "metrics oracle equivalence", metrics_oracle),
        (9, "reproducibility", reproducibility),
        (10, "ablation grids", ablation),
        (8, "imbalance demonstration", imbalance),
    ];
    let mut failed = 0;
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let o = run();
        failed += (!o.pass) as usize;
        println!(
            "criterion {n:>2} {:<4} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
