//! Ablation runner: one row per configuration, several seeds per row.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cafa::FusionStrategy;
use crate::error::{AlignError, Result};
use crate::model::{Model, Prepared, RunConfig};
use crate::scfi::{ImageSource, PointSource, ScfiVariant};
use crate::train::{train_model, Metrics};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    Components,
    Query,
    Source,
    Loss,
}

impl std::str::FromStr for Axis {
    type Err = AlignError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(Self::Components),
            "query" => Ok(Self::Query),
            "source" => Ok(Self::Source),
            "loss" => Ok(Self::Loss),
            _ => Err(AlignError::Config(format!("unknown ablation axis {s:?}"))),
        }
    }
}

/// Labeled configurations of one axis, derived from `base`.
pub fn rows(base: &RunConfig, axis: Axis) -> Vec<(String, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let scfi_on = if base.scfi == ScfiVariant::Off { ScfiVariant::NcsPos } else { base.scfi };
    match axis {
        Axis::Components => vec![
            (
                "baseline".into(),
                with(&|c| {
                    c.fusion = FusionStrategy::None;
                    c.scfi = ScfiVariant::Off;
                    c.joint_2d = false;
                }),
            ),
            (
                "+cafa".into(),
                with(&|c| {
                    c.fusion = FusionStrategy::Cafa;
                    c.scfi = ScfiVariant::Off;
                    c.joint_2d = false;
                }),
            ),
            (
                "+cafa+scfi".into(),
                with(&|c| {
                    c.fusion = FusionStrategy::Cafa;
                    c.scfi = scfi_on;
                    c.joint_2d = false;
                }),
            ),
            (
                "+all".into(),
                with(&|c| {
                    c.fusion = FusionStrategy::Cafa;
                    c.scfi = scfi_on;
                    c.joint_2d = true;
                }),
            ),
        ],
        Axis::Query => [
            ("point_proj", FusionStrategy::PointProj),
            ("nonlocal", FusionStrategy::Nonlocal),
            ("multihead", FusionStrategy::CafaMultihead),
            ("single_head", FusionStrategy::Cafa),
        ]
        .into_iter()
        .map(|(l, s)| (l.to_string(), with(&|c| c.fusion = s)))
        .collect(),
        Axis::Source => [
            ("c5/before", ImageSource::C5, PointSource::BeforeBackbone),
            ("c5/after", ImageSource::C5, PointSource::AfterBackbone),
            ("p5/before", ImageSource::P5, PointSource::BeforeBackbone),
            ("p5/after", ImageSource::P5, PointSource::AfterBackbone),
        ]
        .into_iter()
        .map(|(l, i, p)| {
            (
                l.to_string(),
                with(&|c| {
                    c.scfi = scfi_on;
                    c.scfi_image_source = i;
                    c.scfi_point_source = p;
                }),
            )
        })
        .collect(),
        Axis::Loss => [
            ("nce", ScfiVariant::Nce),
            ("infonce", ScfiVariant::Infonce),
            ("ce_pos", ScfiVariant::CePos),
            ("ncs_pos", ScfiVariant::NcsPos),
        ]
        .into_iter()
        .map(|(l, v)| (l.to_string(), with(&|c| c.scfi = v)))
        .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metrics: Metrics,
    pub final_loss: f64,
    pub finite: bool,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    pub runs: Vec<SeedResult>,
    pub mean_map: f64,
    pub std_map: f64,
    pub mean_ap: Vec<f64>,
    pub mean_attention_mass: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: Option<Axis>,
    pub rows: Vec<AblationRow>,
    /// Set when a row failed; rows before it are complete.
    pub error: Option<String>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, var.sqrt())
}

fn summarize(label: String, cfg: &RunConfig, runs: Vec<SeedResult>) -> AblationRow {
    let maps: Vec<f64> = runs.iter().map(|r| r.metrics.map_3d).collect();
    let (mean_map, std_map) = mean_std(&maps);
    let classes = runs.first().map_or(0, |r| r.metrics.ap_3d.len());
    let mean_ap = (0..classes)
        .map(|c| runs.iter().map(|r| r.metrics.ap_3d[c]).sum::<f64>() / runs.len() as f64)
        .collect();
    let masses: Vec<f64> = runs.iter().filter_map(|r| r.metrics.attention_mass).collect();
    AblationRow {
        label,
        config_hash: cfg.hash(),
        mean_map,
        std_map,
        mean_ap,
        mean_attention_mass: (masses.len() == runs.len() && !masses.is_empty()).then(|| mean_std(&masses).0),
        runs,
    }
}

/// Trains every row of `axis` for each seed offset and writes `table.json`
/// and `table.txt` under `out` after each row.
pub fn ablate(base: &RunConfig, axis: Axis, seeds: &[u64], train: &[Prepared], eval: &[Prepared], out: Option<&Path>) -> Result<AblationTable> {
    let mut table = AblationTable {
        axis: Some(axis),
        ..Default::default()
    };
    for (label, cfg) in rows(base, axis) {
        let mut runs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut c = cfg.clone();
            c.seed = seed;
            let result = Model::new(c).and_then(|mut m| train_model(&mut m, train, eval));
            match result {
                Ok(r) => runs.push(SeedResult {
                    seed,
                    final_loss: r.losses.last().map_or(f64::NAN, |l| l.total),
                    finite: r.losses.iter().all(|l| l.is_finite()),
                    metrics: r.metrics,
                    wall_time_s: r.wall_time_s,
                }),
                Err(e) => {
                    table.error = Some(format!("row {label}, seed {seed}: {e}"));
                    if let Some(dir) = out {
                        write_table(&table, dir)?;
                    }
                    return Err(e);
                }
            }
        }
        table.rows.push(summarize(label, &cfg, runs));
        if let Some(dir) = out {
            write_table(&table, dir)?;
        }
    }
    Ok(table)
}

pub fn render_table(table: &AblationTable) -> String {
    let mut s = format!("{:<14} {:>16} {:>22} {:>10}\n", "row", "mAP (mean±std)", "per-class AP", "attn mass");
    for r in &table.rows {
        let ap: Vec<String> = r.mean_ap.iter().map(|a| format!("{a:.3}")).collect();
        let mass = r.mean_attention_mass.map_or("-".to_string(), |m| format!("{m:.3}"));
        s += &format!(
            "{:<14} {:>16} {:>22} {:>10}\n",
            r.label,
            format!("{:.3}±{:.3}", r.mean_map, r.std_map),
            ap.join(" / "),
            mass
        );
    }
    if let Some(e) = &table.error {
        s += &format!("aborted: {e}\n");
    }
    s
}

pub fn write_table(table: &AblationTable, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AlignError::io(dir, e))?;
    let p = dir.join("table.json");
    fs::write(&p, serde_json::to_string_pretty(table)?).map_err(|e| AlignError::io(&p, e))?;
    let p = dir.join("table.txt");
    fs::write(&p, render_table(table)).map_err(|e| AlignError::io(&p, e))
}
