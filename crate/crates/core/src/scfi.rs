//! Paired RoI features and the self-supervised cross-modal interaction loss.

use autoalign_tensor::{Tape, Var};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::geometry::{project_box3d, Box2D, Box3D, CameraProjection};
use crate::heads::DetectionBox;
use crate::image_branch::FeatureMap;
use crate::params::{Bound, ParamStore};

pub const TAU: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScfiVariant {
    Off,
    NcsPos,
    #[serde(alias = "symmetric_no_stopgrad")]
    Symmetric,
    Nce,
    Infonce,
    CePos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageSource {
    C5,
    P5,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    BeforeBackbone,
    AfterBackbone,
}

/// Projector `h` and predictor `f` sizes, shared by both modalities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScfiHeadConfig {
    pub hidden: usize,
    pub out: usize,
    /// Replace both heads by the identity (tests and diagnostics).
    pub identity: bool,
}

impl Default for ScfiHeadConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            out: 2048,
            identity: false,
        }
    }
}

/// `modality` is `"pts"` or `"img"`.
pub fn init_heads(store: &mut ParamStore, rng: &mut ChaCha8Rng, modality: &str, input: usize, c: &ScfiHeadConfig) {
    if c.identity {
        return;
    }
    store.init_linear(rng, &format!("scfi.{modality}.h.0"), input, c.hidden);
    store.init_linear(rng, &format!("scfi.{modality}.h.1"), c.hidden, c.out);
    store.init_linear(rng, &format!("scfi.{modality}.f.0"), c.out, c.hidden);
    store.init_linear(rng, &format!("scfi.{modality}.f.1"), c.hidden, c.out);
}

fn mlp(p: &Bound, c: &ScfiHeadConfig, name: &str, x: Var) -> Result<Var> {
    if c.identity {
        return Ok(x);
    }
    let h = p.tape.relu(p.linear(&format!("{name}.0"), x)?);
    p.linear(&format!("{name}.1"), h)
}

/// Cell centers of an `out × out` grid over the box, in feature coordinates.
pub fn roi_align_points(b: &Box2D, stride: usize, out: usize) -> Result<Vec<(f64, f64)>> {
    let s = stride as f64;
    let (u0, v0, u1, v1) = (b.u_min / s, b.v_min / s, b.u_max / s, b.v_max / s);
    if !(u1 > u0 && v1 > v0) {
        return Err(AlignError::DegenerateBox(format!("RoI {b:?} has no area at stride {stride}")));
    }
    let (cw, ch) = ((u1 - u0) / out as f64, (v1 - v0) / out as f64);
    let mut pts = Vec::with_capacity(out * out);
    for i in 0..out {
        for j in 0..out {
            pts.push((u0 + (j as f64 + 0.5) * cw, v0 + (i as f64 + 0.5) * ch));
        }
    }
    Ok(pts)
}

/// One bilinear sample per cell; flat `[out·out·c]` in (row, col, channel)
/// order.
pub fn roi_align_2d(t: &Tape, f: &FeatureMap, b: &Box2D, out: usize) -> Result<Var> {
    let pts = roi_align_points(b, f.stride, out)?;
    let s = t.bilinear_sample_many(f.var, &pts)?;
    Ok(t.reshape(s, &[out * out * f.channels])?)
}

/// Cell of a point inside `b` on an `out³` grid; `None` outside the box.
/// With `full_height` the z coordinate is ignored and the point occupies
/// every z layer.
fn roi_cells(b: &Box3D, p: [f64; 3], out: usize, full_height: bool) -> Option<Vec<usize>> {
    let (lo, hi) = (b.min(), b.max());
    let axes = if full_height { 2 } else { 3 };
    let mut idx = [0usize; 3];
    for a in 0..axes {
        if !(p[a] >= lo[a] && p[a] <= hi[a]) {
            return None;
        }
        idx[a] = (((p[a] - lo[a]) / (hi[a] - lo[a]) * out as f64).floor() as usize).min(out - 1);
    }
    let cell = |z: usize| (idx[0] * out + idx[1]) * out + z;
    Some(if full_height { (0..out).map(cell).collect() } else { vec![cell(idx[2])] })
}

/// Per-cell elementwise max over the rows of `feats: [M, c]` whose
/// positions fall in the cell; flat `[out³·c]`, empty cells zero.
pub fn roi_pool_3d(t: &Tape, feats: Var, positions: &[[f64; 3]], b: &Box3D, out: usize, full_height: bool) -> Result<Var> {
    if b.yaw != 0.0 {
        return Err(AlignError::UnsupportedRotation(b.yaw));
    }
    let c = t.shape(feats)[1];
    let cells = out * out * out;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); cells];
    for (j, &pos) in positions.iter().enumerate() {
        for cell in roi_cells(b, pos, out, full_height).into_iter().flatten() {
            members[cell].push(j);
        }
    }
    let mut idx = vec![None; cells * c];
    {
        let v = t.value_ref(feats);
        for (cell, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            for ch in 0..c {
                let best = m
                    .iter()
                    .copied()
                    .max_by(|&a, &bb| v[a * c + ch].total_cmp(&v[bb * c + ch]).then(bb.cmp(&a)))
                    .expect("non-empty cell");
                idx[cell * c + ch] = Some(best * c + ch);
            }
        }
    }
    Ok(t.gather(feats, idx, &[cells * c])?)
}

/// `−⟨p/‖p‖, q/‖q‖⟩` with the norm floored at `1e-12`.
pub fn ncs_distance(p: &[f64], q: &[f64]) -> f64 {
    let n = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt().max(autoalign_tensor::L2_EPS);
    -p.iter().zip(q).map(|(a, b)| a * b).sum::<f64>() / (n(p) * n(q))
}

/// Head outputs for a batch of pairs, all `[N, out]`.
pub struct ScfiEmbeddings {
    /// `f(h(R3D))`
    pub p1: Var,
    /// `f(h(R2D))`
    pub p2: Var,
    /// `h(R3D)`
    pub z1: Var,
    /// `h(R2D)`
    pub z2: Var,
}

/// `r3d: [N, in3]`, `r2d: [N, in2]`.
pub fn scfi_embed(p: &Bound, c: &ScfiHeadConfig, r3d: Var, r2d: Var) -> Result<ScfiEmbeddings> {
    let z1 = mlp(p, c, "scfi.pts.h", r3d)?;
    let z2 = mlp(p, c, "scfi.img.h", r2d)?;
    let p1 = mlp(p, c, "scfi.pts.f", z1)?;
    let p2 = mlp(p, c, "scfi.img.f", z2)?;
    if p.tape.shape(p1) != p.tape.shape(p2) {
        return Err(AlignError::Dimension(format!(
            "modality embeddings differ: {:?} vs {:?}",
            p.tape.shape(p1),
            p.tape.shape(p2)
        )));
    }
    Ok(ScfiEmbeddings { p1, p2, z1, z2 })
}

fn cosine_matrix(t: &Tape, a: Var, b: Var) -> Result<Var> {
    let an = t.l2_normalize(a, 1)?;
    let bn = t.l2_normalize(b, 1)?;
    let bt = t.transpose(bn)?;
    Ok(t.matmul(an, bt)?)
}

fn row_cosines(t: &Tape, a: Var, b: Var) -> Result<Var> {
    let an = t.l2_normalize(a, 1)?;
    let bn = t.l2_normalize(b, 1)?;
    Ok(t.sum_last(t.mul(an, bn)?))
}

/// One direction of the loss: predictions `pred` against targets `target`
/// (already stop-gradiented where the variant asks for it).
fn half_term(t: &Tape, variant: ScfiVariant, pred: Var, target: Var) -> Result<Var> {
    let n = t.shape(pred)[0];
    match variant {
        ScfiVariant::Off => Err(AlignError::Config("SCFI is disabled".into())),
        ScfiVariant::NcsPos | ScfiVariant::Symmetric => Ok(t.scale(t.mean(row_cosines(t, pred, target)?), -1.0)),
        ScfiVariant::CePos => {
            let cos = t.scale(row_cosines(t, pred, target)?, 1.0 / TAU);
            Ok(t.bce_with_logits(cos, &vec![1.0; n], &vec![1.0 / n as f64; n])?)
        }
        ScfiVariant::Nce => {
            let logits = t.scale(cosine_matrix(t, pred, target)?, 1.0 / TAU);
            let mut targets = vec![0.0; n * n];
            let mut weights = vec![0.0; n * n];
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        targets[i * n + j] = 1.0;
                        weights[i * n + j] = 1.0 / n as f64;
                    } else {
                        weights[i * n + j] = 1.0 / (n * (n - 1)) as f64;
                    }
                }
            }
            let flat = t.reshape(logits, &[n * n])?;
            Ok(t.bce_with_logits(flat, &targets, &weights)?)
        }
        ScfiVariant::Infonce => {
            let logits = t.scale(cosine_matrix(t, pred, target)?, 1.0 / TAU);
            let labels: Vec<usize> = (0..n).collect();
            Ok(t.cross_entropy(logits, &labels, &vec![1.0 / n as f64; n])?)
        }
    }
}

/// The two weighted halves `½·D(p₁, q₂)` and `½·D(p₂, q₁)`.
pub fn scfi_terms(t: &Tape, variant: ScfiVariant, e: &ScfiEmbeddings) -> Result<(Var, Var)> {
    let (q2, q1) = if variant == ScfiVariant::Symmetric {
        (e.z2, e.z1)
    } else {
        (t.stopgrad(e.z2), t.stopgrad(e.z1))
    };
    let a = half_term(t, variant, e.p1, q2)?;
    let b = half_term(t, variant, e.p2, q1)?;
    Ok((t.scale(a, 0.5), t.scale(b, 0.5)))
}

/// Stacks flat RoI features into `[N, ·]` matrices and evaluates the loss.
pub fn scfi_loss(p: &Bound, c: &ScfiHeadConfig, variant: ScfiVariant, pairs: &[(Var, Var)]) -> Result<Var> {
    if pairs.is_empty() {
        return Err(AlignError::EmptyBatch("no RoI pairs for SCFI"));
    }
    let t = p.tape;
    let stack = |vs: Vec<Var>| -> Result<Var> {
        let rows = vs
            .iter()
            .map(|&v| {
                let n = t.value_ref(v).len();
                t.reshape(v, &[1, n])
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(t.concat(&rows, 0)?)
    };
    let r3d = stack(pairs.iter().map(|p| p.0).collect())?;
    let r2d = stack(pairs.iter().map(|p| p.1).collect())?;
    let e = scfi_embed(p, c, r3d, r2d)?;
    let (a, b) = scfi_terms(t, variant, &e)?;
    Ok(t.add(a, b)?)
}

/// Boxes used for SCFI this step: confident predictions, padded with
/// ground truth, each paired with its projection.
pub fn sample_pairs(
    rng: &mut ChaCha8Rng,
    preds: &[DetectionBox<Box3D>],
    gts: &[Box3D],
    proj: &CameraProjection,
    image_size: (usize, usize),
    n: usize,
    score_threshold: f64,
) -> Vec<(Box3D, Box2D)> {
    let usable = |b: &Box3D| project_box3d(proj, b, image_size).ok().map(|b2| (*b, b2));
    let from_preds: Vec<_> = preds
        .iter()
        .filter(|d| d.score >= score_threshold)
        .filter_map(|d| usable(&d.bbox))
        .collect();
    let pick = |rng: &mut ChaCha8Rng, pool: Vec<(Box3D, Box2D)>, k: usize| -> Vec<(Box3D, Box2D)> {
        if pool.len() <= k {
            return pool;
        }
        let mut idx = sample(rng, pool.len(), k).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| pool[i]).collect()
    };
    if from_preds.len() >= n {
        return pick(rng, from_preds, n);
    }
    let need = n - from_preds.len();
    let from_gt: Vec<_> = gts.iter().filter_map(usable).collect();
    let mut out = from_preds;
    out.extend(pick(rng, from_gt, need));
    out
}
