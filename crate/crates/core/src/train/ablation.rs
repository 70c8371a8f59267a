//! Experiment grids over loss, bottleneck block, pooling rates, long
//! connections, supervision weights, and output fusion.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;

use super::config::RunConfig;
use super::run::{train_run, EvalSummary};
use super::TrainError;
use crate::losses::{LossKind, SupervisionWeights};
use crate::net::{BlockKind, DdspConfig, FusionMask, LongConnection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum AblationTable {
    /// Loss function x bottleneck block.
    LossBlock,
    /// Dilation and pooling rate sets.
    Rates,
    /// Long-connection mode.
    LongConnection,
    /// Supervision weights.
    Weights,
    /// Output fusion mask.
    Fusion,
}

impl AblationTable {
    pub const ALL: [AblationTable; 5] = [
        AblationTable::LossBlock,
        AblationTable::Rates,
        AblationTable::LongConnection,
        AblationTable::Weights,
        AblationTable::Fusion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AblationTable::LossBlock => "table2",
            AblationTable::Rates => "table3",
            AblationTable::LongConnection => "table4",
            AblationTable::Weights => "table5",
            AblationTable::Fusion => "table6",
        }
    }
}

impl fmt::Display for AblationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationTable {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| format!("unknown table {s:?}; expected table2..table6"))
    }
}

/// Supervision weight rows of the weights table.
pub const WEIGHT_ROWS: [[f64; 3]; 6] = [
    [1.0, 0.0, 0.0],
    [0.5, 0.333, 0.167],
    [0.6, 0.25, 0.15],
    [0.8, 0.15, 0.05],
    [0.8, 0.2, 0.0],
    [0.9, 0.075, 0.025],
];

/// One training configuration and the fusion masks it is evaluated under.
#[derive(Debug, Clone, PartialEq)]
pub struct PlannedRun {
    pub config: RunConfig,
    pub fusions: Vec<FusionMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationPlan {
    pub table: AblationTable,
    pub base: RunConfig,
    pub seeds: Vec<u64>,
}

impl AblationPlan {
    /// Configurations in table order (before seeds are applied).
    pub fn runs(&self) -> Result<Vec<PlannedRun>, TrainError> {
        let base = self.base.clone();
        let single = |config: RunConfig| PlannedRun {
            fusions: vec![config.net.fusion],
            config,
        };
        let runs = match self.table {
            AblationTable::LossBlock => {
                let mut v = Vec::new();
                for loss in [LossKind::WeightedCe, LossKind::Dsc, LossKind::Jaccard] {
                    for block in [BlockKind::None, BlockKind::Ddsp, BlockKind::Aspp] {
                        let mut c = base.clone().with_block(block);
                        c.loss = loss;
                        v.push(single(c));
                    }
                }
                v
            }
            AblationTable::Rates => {
                let g = base.net.ddsp.growth;
                [
                    (vec![1, 2, 3, 4], vec![2, 4, 6]),
                    (vec![1, 2, 3, 4], vec![]),
                    (vec![], vec![2, 4, 6]),
                ]
                .into_iter()
                .map(|(d, p)| {
                    let ddsp = DdspConfig::new(d, p, g)?;
                    Ok(single(base.clone().with_block(BlockKind::Ddsp).with_ddsp(ddsp)))
                })
                .collect::<Result<_, TrainError>>()?
            }
            AblationTable::LongConnection => [LongConnection::None, LongConnection::Residual, LongConnection::Concat]
                .into_iter()
                .map(|lc| single(base.clone().with_long_connection(lc)))
                .collect(),
            AblationTable::Weights => WEIGHT_ROWS
                .iter()
                .map(|&[a, b, c]| {
                    let mut cfg = base.clone();
                    cfg.net.supervision = SupervisionWeights::new(a, b, c)?;
                    Ok(single(cfg))
                })
                .collect::<Result<_, TrainError>>()?,
            AblationTable::Fusion => vec![PlannedRun {
                config: base.clone(),
                fusions: vec![FusionMask::MAIN_ONLY, FusionMask::ALL],
            }],
        };
        Ok(runs)
    }

    /// Number of CSV rows the plan produces.
    pub fn row_count(&self) -> Result<usize, TrainError> {
        Ok(self.runs()?.iter().map(|r| r.fusions.len()).sum::<usize>() * self.seeds.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub table: String,
    pub block: String,
    pub loss: String,
    pub dilation_rates: String,
    pub pooling_rates: String,
    pub long_connection: String,
    pub loss_weights: String,
    pub fusion: String,
    pub seed: u64,
    pub dice: Option<f64>,
    pub arvd_pct: Option<f64>,
    pub abd_mm: Option<f64>,
    pub hd95_mm: Option<f64>,
    pub status: String,
}

pub const CSV_HEADER: &str =
    "table,block,loss,dilation_rates,pooling_rates,long_connection,loss_weights,fusion,seed,dice,arvd_pct,abd_mm,hd95_mm,status";

fn slash<T: ToString>(xs: &[T]) -> String {
    if xs.is_empty() {
        "-".into()
    } else {
        xs.iter().map(ToString::to_string).collect::<Vec<_>>().join("/")
    }
}

fn row(table: AblationTable, cfg: &RunConfig, fusion: FusionMask, result: Result<&EvalSummary, &str>) -> AblationRow {
    let (rates_d, rates_p) = if cfg.net.block == BlockKind::None {
        ("-".to_string(), "-".to_string())
    } else {
        (slash(&cfg.net.ddsp.dilation_rates), slash(&cfg.net.ddsp.pooling_rates))
    };
    let (dice, arvd_pct, abd_mm, hd95_mm, status) = match result {
        Ok(s) => (Some(s.dice), s.arvd_pct, s.abd_mm, s.hd95_mm, "ok".to_string()),
        Err(e) => (None, None, None, None, format!("failed: {e}")),
    };
    AblationRow {
        table: table.name().into(),
        block: cfg.net.block.to_string(),
        loss: cfg.loss.to_string(),
        dilation_rates: rates_d,
        pooling_rates: rates_p,
        long_connection: cfg.net.long_connection.to_string(),
        loss_weights: slash(&cfg.net.supervision.as_array()),
        fusion: slash(&fusion.0.map(|b| b as u8)),
        seed: cfg.seed,
        dice,
        arvd_pct,
        abd_mm,
        hd95_mm,
        status,
    }
}

fn run_one(table: AblationTable, cfg: &RunConfig, fusions: &[FusionMask]) -> Vec<AblationRow> {
    let evaluated = train_run(cfg).and_then(|mut out| {
        fusions
            .iter()
            .map(|&f| out.evaluate(f))
            .collect::<Result<Vec<_>, _>>()
    });
    match evaluated {
        Ok(summaries) => fusions
            .iter()
            .zip(&summaries)
            .map(|(&f, s)| row(table, cfg, f, Ok(s)))
            .collect(),
        Err(e) => {
            let msg = e.to_string().replace(',', ";");
            fusions.iter().map(|&f| row(table, cfg, f, Err(&msg))).collect()
        }
    }
}

/// Trains and evaluates every configuration and seed. Runs execute
/// concurrently; rows come back in plan order. A failed run yields rows
/// marked `failed` rather than aborting the table.
pub fn run_ablation(plan: &AblationPlan) -> Result<Vec<AblationRow>, TrainError> {
    let jobs: Vec<(RunConfig, Vec<FusionMask>)> = plan
        .runs()?
        .into_iter()
        .flat_map(|r| {
            plan.seeds.iter().map(move |&seed| {
                let mut c = r.config.clone();
                c.seed = seed;
                (c, r.fusions.clone())
            })
        })
        .collect();
    let rows: Vec<Vec<AblationRow>> = jobs
        .par_iter()
        .map(|(cfg, fusions)| run_one(plan.table, cfg, fusions))
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

pub fn rows_to_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.table,
            r.block,
            r.loss,
            r.dilation_rates,
            r.pooling_rates,
            r.long_connection,
            r.loss_weights,
            r.fusion,
            r.seed,
            opt(r.dice),
            opt(r.arvd_pct),
            opt(r.abd_mm),
            opt(r.hd95_mm),
            r.status
        ));
    }
    s
}
