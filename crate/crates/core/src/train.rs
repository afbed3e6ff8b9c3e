//! Training loop, evaluation, run reports and checkpoints.

use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::Path;
use std::time::Instant;

use autoalign_tensor::{Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diagnostics::attention_mass;
use crate::error::{AlignError, Result};
use crate::geometry::Box3D;
use crate::heads::{map_over_classes, DetectionBox};
use crate::model::{batch_loss, decode, forward, LossBreakdown, Model, Prepared, RunConfig};
use crate::params::{Bound, Optimizer};
use crate::scene;

const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0001;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub map_3d: f64,
    pub map_bev: f64,
    pub ap_3d: Vec<f64>,
    pub ap_bev: Vec<f64>,
    /// Mean attention mass inside the projected box over in-box voxels.
    pub attention_mass: Option<f64>,
    pub scenes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub seed: u64,
    pub losses: Vec<LossBreakdown>,
    pub evals: Vec<EvalPoint>,
    pub metrics: Metrics,
    pub parameters: usize,
    pub wall_time_s: f64,
}

impl RunReport {
    /// Everything except timing, for reproducibility checks.
    pub fn same_results(&self, other: &Self) -> bool {
        self.config_hash == other.config_hash
            && self.losses == other.losses
            && self.evals == other.evals
            && self.metrics == other.metrics
    }
}

/// Detections on every scene with per-class AP and the attention statistic.
pub fn evaluate(model: &Model, scenes: &[Prepared]) -> Result<Metrics> {
    let cfg = &model.cfg;
    let n = cfg.eval.max_scenes.map_or(scenes.len(), |m| m.min(scenes.len()));
    let mut preds: Vec<(usize, DetectionBox<Box3D>)> = Vec::new();
    let mut gts: Vec<(usize, Box3D)> = Vec::new();
    let mut mass_sum = 0.0;
    let mut mass_count = 0usize;
    let tape = Tape::new();
    for (i, s) in scenes[..n].iter().enumerate() {
        tape.reset();
        let p = Bound::frozen(&tape, &model.params);
        let f = forward(&p, cfg, s)?;
        preds.extend(decode(&tape, cfg, &f, cfg.eval.score_threshold)?.into_iter().map(|d| (i, d)));
        gts.extend(s.scene.gt_boxes3d.iter().map(|b| (i, *b)));
        if let (Some(a), Some(img)) = (f.align, f.image.as_ref()) {
            let red = img.reduced.expect("attention builds the reduced map");
            let (sum, count) = attention_mass(&tape.value_ref(a), s, red.h, red.w)?;
            mass_sum += sum;
            mass_count += count;
        }
    }
    let th = &cfg.eval.ap_iou;
    let (ap_3d, map_3d) = map_over_classes(&preds, &gts, |b| b.class_id, th)?;
    let bev_preds: Vec<_> = preds
        .iter()
        .map(|(i, d)| Ok((*i, DetectionBox { bbox: d.bbox.bev()?, score: d.score, class_id: d.class_id })))
        .collect::<Result<_>>()?;
    let bev_gts: Vec<_> = gts.iter().map(|(i, b)| Ok((*i, b.bev()?))).collect::<Result<_>>()?;
    let (ap_bev, map_bev) = map_over_classes(&bev_preds, &bev_gts, |b| b.class_id, th)?;
    let has_map = cfg.fusion.has_alignment_map();
    Ok(Metrics {
        map_3d,
        map_bev,
        ap_3d,
        ap_bev,
        attention_mass: (has_map && mass_count > 0).then(|| mass_sum / mass_count as f64),
        scenes: n,
    })
}

/// Trains `model` in place on in-memory scenes.
pub fn train_model(model: &mut Model, train: &[Prepared], eval: &[Prepared]) -> Result<RunReport> {
    if train.is_empty() {
        return Err(AlignError::EmptyBatch("training split"));
    }
    let start = Instant::now();
    let cfg = model.cfg.clone();
    let (pts_names, img_names) = model.param_groups();
    let mut opt_3d = Optimizer::new(cfg.optim_3d);
    let mut opt_2d = Optimizer::new(cfg.optim_2d);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ TRAIN_STREAM);
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut evals = Vec::new();
    let tape = Tape::new();
    for step in 0..cfg.steps {
        let at = |e: AlignError| AlignError::AtStep { step, source: Box::new(e) };
        tape.reset();
        let batch: Vec<&Prepared> = (0..cfg.batch_size).map(|_| &train[rng.random_range(0..train.len())]).collect();
        let dropout_rng = ChaCha8Rng::seed_from_u64(rng.random());
        let p = Bound::new(&tape, &model.params).with_rng(dropout_rng);
        let loss = batch_loss(&p, &cfg, &batch, &mut rng).map_err(at)?;
        if !loss.breakdown.is_finite() {
            return Err(at(AlignError::Tensor(autoalign_tensor::TensorError::NonFinite { op: "training loss" })));
        }
        tape.backward(loss.total).map_err(|e| at(e.into()))?;
        let grads = p.grads(&model.params);
        drop(p);
        opt_3d.step(&mut model.params, &pts_names, &grads).map_err(at)?;
        opt_2d.step(&mut model.params, &img_names, &grads).map_err(at)?;
        losses.push(loss.breakdown);
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 && step + 1 < cfg.steps && !eval.is_empty() {
            evals.push(EvalPoint {
                step: step + 1,
                metrics: evaluate(model, eval).map_err(at)?,
            });
        }
    }
    let metrics = if eval.is_empty() { Metrics::default() } else { evaluate(model, eval)? };
    Ok(RunReport {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        losses,
        evals,
        metrics,
        parameters: model.params.numel(),
        wall_time_s: start.elapsed().as_secs_f64(),
    })
}

/// Loads both splits of a dataset directory.
pub fn load_dataset(dir: &Path, cfg: &RunConfig) -> Result<(Vec<Prepared>, Vec<Prepared>)> {
    let manifest = scene::load_manifest(dir)?;
    let prep = |names: &[String]| -> Result<Vec<Prepared>> {
        Ok(scene::load_split(dir, names)?
            .into_iter()
            .map(|s| Prepared::new(s, &cfg.model.voxel))
            .collect())
    };
    Ok((prep(&manifest.train)?, prep(&manifest.eval)?))
}

/// Builds a model from `cfg`, trains it on `cfg.dataset` and returns both.
pub fn train(cfg: &RunConfig) -> Result<(Model, RunReport)> {
    let mut model = Model::new(cfg.clone())?;
    let (tr, ev) = load_dataset(&cfg.dataset, cfg)?;
    let report = train_model(&mut model, &tr, &ev)?;
    Ok((model, report))
}

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    config: RunConfig,
    params: Vec<CheckpointEntry>,
}

/// Writes `manifest.json` and `tensors.bin` (concatenated tensor records in
/// manifest order).
pub fn save_checkpoint(model: &Model, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AlignError::io(dir, e))?;
    let manifest = CheckpointManifest {
        format: "AATN".into(),
        config: model.cfg.clone(),
        params: model
            .params
            .iter()
            .map(|(n, t)| CheckpointEntry {
                name: n.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| AlignError::io(&path, e))?;
    let path = dir.join("tensors.bin");
    let file = fs::File::create(&path).map_err(|e| AlignError::io(&path, e))?;
    let mut w = BufWriter::new(file);
    for (_, t) in model.params.iter() {
        t.write_to(&mut w)?;
    }
    drop(w);
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Model> {
    let path = dir.join("manifest.json");
    let text = fs::read(&path).map_err(|e| AlignError::io(&path, e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text).map_err(|e| AlignError::Parse {
        file: "manifest.json".into(),
        field: "<root>".into(),
        msg: e.to_string(),
    })?;
    let mut model = Model::new(manifest.config)?;
    let path = dir.join("tensors.bin");
    let file = fs::File::open(&path).map_err(|e| AlignError::io(&path, e))?;
    let mut r = BufReader::new(file);
    for entry in &manifest.params {
        let t = Tensor::read_from(&mut r)?;
        if t.shape() != entry.shape.as_slice() {
            return Err(AlignError::Parse {
                file: "tensors.bin".into(),
                field: entry.name.clone(),
                msg: format!("shape {:?} does not match manifest {:?}", t.shape(), entry.shape),
            });
        }
        let slot = model.params.get_mut(&entry.name).map_err(|_| AlignError::Parse {
            file: "manifest.json".into(),
            field: entry.name.clone(),
            msg: "parameter not present in the configured model".into(),
        })?;
        slot.data_mut().copy_from_slice(t.data());
    }
    if manifest.params.len() != model.params.len() {
        return Err(AlignError::Parse {
            file: "manifest.json".into(),
            field: "params".into(),
            msg: format!("expected {} parameters, found {}", model.params.len(), manifest.params.len()),
        });
    }
    Ok(model)
}
