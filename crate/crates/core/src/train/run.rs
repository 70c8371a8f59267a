//! One training run: synthetic pools, SGD over the composite loss, periodic
//! validation, and the final checkpoint.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::RunConfig;
use super::deform::deform_augment;
use super::optim::{sgd_step, OptimizerState};
use super::synth::gen_synthetic_case;
use super::TrainError;
use crate::losses::{composite_loss, LossKind, SupervisionWeights};
use crate::metrics::{self, MetricsReport};
use crate::net::{encode_checkpoint, fuse_outputs, FusionMask, Heads, Mode, Net, Scalar, Tensor5};
use crate::volgrid::{BinaryMask, Volume};

/// Independent random streams derived from a run seed.
#[derive(Debug, Clone, Copy)]
enum Stream {
    TrainData = 1,
    ValData = 2,
    Batches = 3,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

#[derive(Debug, Clone)]
pub struct Case {
    pub image: Volume,
    pub truth: BinaryMask,
}

/// `count` synthetic cases from `rng`-drawn seeds.
fn make_pool(cfg: &RunConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Case>, TrainError> {
    (0..count)
        .map(|_| {
            let (image, truth) = gen_synthetic_case(&cfg.synth_for(rng.gen()))?;
            Ok(Case { image, truth })
        })
        .collect()
}

/// The training and held-out validation pools of a run.
pub fn make_datasets(cfg: &RunConfig) -> Result<(Vec<Case>, Vec<Case>), TrainError> {
    let train = make_pool(cfg, cfg.train_cases, &mut stream(cfg.seed, Stream::TrainData))?;
    let val = make_pool(cfg, cfg.val_cases, &mut stream(cfg.seed, Stream::ValData))?;
    Ok((train, val))
}

/// Stack single-channel volumes into a batch tensor.
pub fn stack<T: Scalar>(volumes: &[&Volume]) -> Tensor5<T> {
    let d = volumes[0].dims();
    let data = volumes
        .iter()
        .flat_map(|v| v.data().iter().map(|&x| T::of(x as f64)))
        .collect();
    Tensor5::from_vec(volumes.len(), 1, d, data)
}

/// Loss values and per-head gradients of a batch.
#[derive(Debug, Clone)]
pub struct BatchObjective<T> {
    pub head_values: [f64; 3],
    pub total: f64,
    pub grads: [Tensor5<T>; 3],
}

/// Per-sample composite loss averaged over the batch.
pub fn batch_objective<T: Scalar>(
    heads: &Heads<T>,
    truths: &[Vec<f64>],
    loss: LossKind,
    weights: SupervisionWeights,
) -> Result<BatchObjective<T>, TrainError> {
    let hs = heads.as_array();
    let nb = hs[0].batch();
    let scale = 1.0 / nb as f64;
    let mut grads: [Tensor5<T>; 3] = std::array::from_fn(|k| Tensor5::zeros(nb, 1, hs[k].dims()));
    let mut head_values = [0.0; 3];
    let mut total = 0.0;
    for (b, truth) in truths.iter().enumerate() {
        let evals = hs.map(|h| {
            let p: Vec<f64> = h.sample(b).iter().map(|v| v.as_f64()).collect();
            loss.evaluate(&p, truth)
        });
        let [e0, e1, e2] = evals;
        let c = composite_loss(&e0?, &e1?, &e2?, weights)?;
        total += scale * c.value;
        for k in 0..3 {
            head_values[k] += scale * c.head_values[k];
            for (dst, &g) in grads[k].sample_mut(b).iter_mut().zip(&c.head_grads[k]) {
                *dst = T::of(scale * g);
            }
        }
    }
    Ok(BatchObjective {
        head_values,
        total,
        grads,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: u64,
    pub loss_main: f64,
    pub loss_stage2: f64,
    pub loss_stage3: f64,
    pub loss_total: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iter,loss_main,loss_stage2,loss_stage3,loss_total,lr";

pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.loss_main, r.loss_stage2, r.loss_stage3, r.loss_total, r.lr
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ValidationRow {
    pub iter: u64,
    pub dice: f64,
}

/// Mean metrics over a validation pool; distance means skip flagged cases.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalSummary {
    pub dice: f64,
    pub arvd_pct: Option<f64>,
    pub abd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub cases: usize,
    pub flagged: usize,
}

/// Binarized fused predictions of `net` on every case.
pub fn predict(net: &mut Net<f32>, cases: &[Case], fusion: FusionMask, threshold: f64) -> Result<Vec<BinaryMask>, TrainError> {
    cases
        .iter()
        .map(|c| {
            let x = stack::<f32>(&[&c.image]);
            let (heads, _) = net.forward(&x, Mode::Eval)?;
            let fused = fuse_outputs(&heads, fusion);
            let v = Volume::new(c.image.dims(), c.image.spacing(), fused.into_data()).expect("same dims");
            Ok(BinaryMask::threshold(&v, threshold as f32))
        })
        .collect()
}

fn mean_of(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn evaluate_pool(net: &mut Net<f32>, cases: &[Case], fusion: FusionMask, threshold: f64) -> Result<EvalSummary, TrainError> {
    let preds = predict(net, cases, fusion, threshold)?;
    let reports: Vec<MetricsReport> = preds
        .iter()
        .zip(cases)
        .map(|(p, c)| metrics::evaluate(p, &c.truth))
        .collect::<Result<_, _>>()?;
    Ok(EvalSummary {
        dice: reports.iter().map(|r| r.dsc).sum::<f64>() / reports.len() as f64,
        arvd_pct: mean_of(reports.iter().map(|r| r.arvd_pct)),
        abd_mm: mean_of(reports.iter().map(|r| r.abd_mm)),
        hd95_mm: mean_of(reports.iter().map(|r| r.hd95_mm)),
        cases: reports.len(),
        flagged: reports.iter().filter(|r| !r.flags.is_empty()).count(),
    })
}

/// Mean Dice of the thresholded fused prediction.
pub fn validation_dice(net: &mut Net<f32>, cases: &[Case], fusion: FusionMask, threshold: f64) -> Result<f64, TrainError> {
    let preds = predict(net, cases, fusion, threshold)?;
    let mut sum = 0.0;
    for (p, c) in preds.iter().zip(cases) {
        sum += metrics::dice_coefficient(p, &c.truth)?;
    }
    Ok(sum / cases.len() as f64)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub config: RunConfig,
    pub log: Vec<LogRow>,
    pub validation: Vec<ValidationRow>,
    pub final_dice: f64,
    pub net: Net<f32>,
    pub val_cases: Vec<Case>,
    pub seconds: f64,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Vec<u8> {
        encode_checkpoint(&self.net)
    }

    pub fn evaluate(&mut self, fusion: FusionMask) -> Result<EvalSummary, TrainError> {
        evaluate_pool(&mut self.net, &self.val_cases, fusion, self.config.threshold)
    }
}

/// Called after every iteration with the new log row.
pub type Progress<'a> = &'a mut dyn FnMut(&LogRow);

pub fn train_run(cfg: &RunConfig) -> Result<TrainOutcome, TrainError> {
    train_run_with(cfg, &mut |_| {})
}

pub fn train_run_with(cfg: &RunConfig, progress: Progress<'_>) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let start = std::time::Instant::now();
    let (train, val) = make_datasets(cfg)?;
    let mut net = Net::<f32>::new(cfg.net.clone(), cfg.seed)?;
    let mut opt = OptimizerState::new(cfg.optimizer)?;
    let mut rng = stream(cfg.seed, Stream::Batches);
    let deform = cfg.deform_spec();
    let fusion = cfg.net.fusion;
    let mut log = Vec::with_capacity(cfg.iterations as usize);
    let mut validation = Vec::new();

    for iter in 1..=cfg.iterations {
        let mut images = Vec::with_capacity(cfg.batch_size);
        let mut truths = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let case = &train[rng.gen_range(0..train.len())];
            let field_seed: u64 = rng.gen();
            let (img, truth) = if cfg.deform {
                deform_augment(&case.image, &case.truth, &deform, field_seed)?
            } else {
                (case.image.clone(), case.truth.clone())
            };
            images.push(img);
            truths.push(truth.volume().to_f64());
        }
        let x = stack::<f32>(&images.iter().collect::<Vec<_>>());
        net.zero_grad();
        let (heads, cache) = net.forward(&x, Mode::Train)?;
        let obj = batch_objective(&heads, &truths, cfg.loss, cfg.net.supervision)?;
        if !obj.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { iteration: iter });
        }
        net.backward(&cache, [&obj.grads[0], &obj.grads[1], &obj.grads[2]]);
        let lr = opt.lr;
        sgd_step(&mut net, &mut opt)?;
        let row = LogRow {
            iter,
            loss_main: obj.head_values[0],
            loss_stage2: obj.head_values[1],
            loss_stage3: obj.head_values[2],
            loss_total: obj.total,
            lr,
        };
        progress(&row);
        log.push(row);
        let due = cfg.val_every > 0 && iter % cfg.val_every == 0;
        if due && iter != cfg.iterations {
            let dice = validation_dice(&mut net, &val, fusion, cfg.threshold)?;
            validation.push(ValidationRow { iter, dice });
        }
    }
    let final_dice = validation_dice(&mut net, &val, fusion, cfg.threshold)?;
    validation.push(ValidationRow {
        iter: cfg.iterations,
        dice: final_dice,
    });
    Ok(TrainOutcome {
        config: cfg.clone(),
        log,
        validation,
        final_dice,
        net,
        val_cases: val,
        seconds: start.elapsed().as_secs_f64(),
    })
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |e| TrainError::Io(path.to_path_buf(), e)
}

/// Writes `log.csv`, `validation.csv`, `model.vck`, and `config.txt`.
pub fn write_run_artifacts(outcome: &TrainOutcome, dir: &Path) -> Result<Vec<PathBuf>, TrainError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let files = [
        ("log.csv", log_csv(&outcome.log).into_bytes()),
        ("validation.csv", {
            let mut s = String::from("iter,dice\n");
            for v in &outcome.validation {
                s.push_str(&format!("{},{}\n", v.iter, v.dice));
            }
            s.into_bytes()
        }),
        ("model.vck", outcome.checkpoint()),
        ("config.txt", outcome.config.to_text().into_bytes()),
    ];
    let mut paths = Vec::new();
    for (name, bytes) in files {
        let p = dir.join(name);
        let mut f = fs::File::create(&p).map_err(io_err(&p))?;
        f.write_all(&bytes).map_err(io_err(&p))?;
        paths.push(p);
    }
    Ok(paths)
}
