//! 3D and 2D detection heads, their losses, NMS and AP40.

use std::cmp::Ordering;

use autoalign_tensor::{sigmoid, Tape, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou_2d, iou_3d, Box2D, Box3D};
use crate::image_branch::FeatureMap;
use crate::params::{Bound, ParamStore};
use crate::point_branch::VoxelGridSpec;
use crate::scfi::roi_align_2d;

pub const RESIDUALS: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionBox<B> {
    pub bbox: B,
    pub score: f64,
    pub class_id: usize,
}

/// Axis-aligned boxes usable by NMS and AP.
pub trait AxisBox: Copy {
    fn iou(&self, other: &Self) -> Result<f64>;
    /// Coordinates used to order equal-score boxes deterministically.
    fn sort_key(&self) -> Vec<f64>;
}

impl AxisBox for Box2D {
    fn iou(&self, other: &Self) -> Result<f64> {
        Ok(iou_2d(self, other))
    }

    fn sort_key(&self) -> Vec<f64> {
        vec![self.u_min, self.v_min, self.u_max, self.v_max]
    }
}

impl AxisBox for Box3D {
    fn iou(&self, other: &Self) -> Result<f64> {
        iou_3d(self, other)
    }

    fn sort_key(&self) -> Vec<f64> {
        self.center.iter().chain(&self.size).chain([&self.yaw]).copied().collect()
    }
}

fn cmp_keys(a: &[f64], b: &[f64]) -> Ordering {
    a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
}

fn by_score<B: AxisBox>(a: &DetectionBox<B>, b: &DetectionBox<B>) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.class_id.cmp(&b.class_id))
        .then_with(|| cmp_keys(&a.bbox.sort_key(), &b.bbox.sort_key()))
}

/// Greedy per-class suppression in descending score order; equal scores
/// fall back to class and box coordinates, so the result does not depend
/// on input order.
pub fn nms<B: AxisBox>(boxes: &[DetectionBox<B>], iou_thresh: f64) -> Result<Vec<DetectionBox<B>>> {
    nms_limited(boxes, iou_thresh, usize::MAX)
}

/// [`nms`] that stops once `limit` boxes are kept.
pub fn nms_limited<B: AxisBox>(boxes: &[DetectionBox<B>], iou_thresh: f64, limit: usize) -> Result<Vec<DetectionBox<B>>> {
    let mut order: Vec<&DetectionBox<B>> = boxes.iter().collect();
    order.sort_by(|a, b| by_score(a, b));
    let mut keep: Vec<DetectionBox<B>> = Vec::new();
    for d in order {
        if keep.len() >= limit {
            break;
        }
        let mut suppressed = false;
        for k in keep.iter().filter(|k| k.class_id == d.class_id) {
            if k.bbox.iou(&d.bbox)? > iou_thresh {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            keep.push(*d);
        }
    }
    Ok(keep)
}

/// 40-point interpolated AP for one class. Predictions and ground truth
/// carry the index of the scene they belong to.
pub fn average_precision<B: AxisBox>(preds: &[(usize, DetectionBox<B>)], gts: &[(usize, B)], iou_thresh: f64) -> Result<f64> {
    if gts.is_empty() {
        return Ok(if preds.is_empty() { 1.0 } else { 0.0 });
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b].1.score.total_cmp(&preds[a].1.score).then(preds[a].0.cmp(&preds[b].0)).then(a.cmp(&b))
    });
    let mut matched = vec![false; gts.len()];
    let mut tp = 0usize;
    // (true positives, detections) after each ranked prediction
    let mut curve = Vec::with_capacity(order.len());
    for (rank, &i) in order.iter().enumerate() {
        let (scene, det) = &preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (g, (gs, gb)) in gts.iter().enumerate() {
            if gs != scene || matched[g] {
                continue;
            }
            let iou = det.bbox.iou(gb)?;
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        if let Some((g, _)) = best {
            matched[g] = true;
            tp += 1;
        }
        curve.push((tp, rank + 1));
    }
    let n_gt = gts.len();
    let mut total = 0.0;
    for r in 1..=40usize {
        // recall tp/n_gt >= r/40, compared in integers
        let p = curve
            .iter()
            .filter(|&&(tp, _)| tp * 40 >= r * n_gt)
            .map(|&(tp, n)| tp as f64 / n as f64)
            .fold(0.0, f64::max);
        total += p;
    }
    Ok(total / 40.0)
}

/// Per-class AP and its mean.
pub fn map_over_classes<B: AxisBox>(
    preds: &[(usize, DetectionBox<B>)],
    gts: &[(usize, B)],
    gt_class: impl Fn(&B) -> usize,
    thresholds: &[f64],
) -> Result<(Vec<f64>, f64)> {
    let mut per = Vec::with_capacity(thresholds.len());
    for (c, &th) in thresholds.iter().enumerate() {
        let p: Vec<_> = preds.iter().filter(|(_, d)| d.class_id == c).copied().collect();
        let g: Vec<_> = gts.iter().filter(|(_, b)| gt_class(b) == c).copied().collect();
        per.push(average_precision(&p, &g, th)?);
    }
    let mean = per.iter().sum::<f64>() / per.len().max(1) as f64;
    Ok((per, mean))
}

// ---------------------------------------------------------------- 3D head

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head3dConfig {
    /// Anchor `(l, w, h)` per class.
    pub anchors: Vec<[f64; 3]>,
    pub ground_z: f64,
}

impl Head3dConfig {
    pub fn classes(&self) -> usize {
        self.anchors.len()
    }

    pub fn channels(&self) -> usize {
        1 + self.classes() + RESIDUALS
    }

    pub fn anchor(&self, spec: &VoxelGridSpec, ix: usize, iy: usize, class: usize) -> Box3D {
        let s = self.anchors[class];
        let c = spec.center([ix, iy, 0]);
        Box3D {
            center: [c[0], c[1], self.ground_z + s[2] / 2.0],
            size: s,
            yaw: 0.0,
            class_id: class,
        }
    }
}

pub fn init_head3d(store: &mut ParamStore, rng: &mut ChaCha8Rng, c_bev: usize, cfg: &Head3dConfig) {
    store.init_conv(rng, "head3d", c_bev, cfg.channels(), 1);
}

/// Dense `[1 + C + 6, X, Y]` map: objectness, class logits, residuals.
pub fn head3d_forward(p: &Bound, bev: Var) -> Result<Var> {
    p.conv("head3d", bev, 1, 0)
}

pub fn encode_box3d(anchor: &Box3D, gt: &Box3D) -> [f64; RESIDUALS] {
    let (a, g) = (anchor, gt);
    let diag = (a.size[0].powi(2) + a.size[1].powi(2)).sqrt();
    [
        (g.center[0] - a.center[0]) / diag,
        (g.center[1] - a.center[1]) / diag,
        (g.center[2] - a.center[2]) / a.size[2],
        (g.size[0] / a.size[0]).ln(),
        (g.size[1] / a.size[1]).ln(),
        (g.size[2] / a.size[2]).ln(),
    ]
}

pub fn decode_box3d(anchor: &Box3D, r: &[f64]) -> Box3D {
    let a = anchor;
    let diag = (a.size[0].powi(2) + a.size[1].powi(2)).sqrt();
    Box3D {
        center: [
            a.center[0] + r[0] * diag,
            a.center[1] + r[1] * diag,
            a.center[2] + r[2] * a.size[2],
        ],
        size: [
            a.size[0] * r[3].clamp(-4.0, 4.0).exp(),
            a.size[1] * r[4].clamp(-4.0, 4.0).exp(),
            a.size[2] * r[5].clamp(-4.0, 4.0).exp(),
        ],
        yaw: 0.0,
        class_id: a.class_id,
    }
}

/// Positive cells: `(cell, gt index)`, where the cell's anchor for the GT
/// class has its center inside the GT box. Ties go to the nearest center.
pub fn assign3d(cfg: &Head3dConfig, spec: &VoxelGridSpec, gts: &[Box3D]) -> Vec<(usize, usize)> {
    let [nx, ny, _] = spec.extents();
    let mut out = Vec::new();
    for ix in 0..nx {
        for iy in 0..ny {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if gt.class_id >= cfg.classes() {
                    continue;
                }
                let a = cfg.anchor(spec, ix, iy, gt.class_id);
                if gt.contains(a.center) {
                    let d: f64 = (0..3).map(|k| (a.center[k] - gt.center[k]).powi(2)).sum();
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((g, d));
                    }
                }
            }
            if let Some((g, _)) = best {
                out.push((ix * ny + iy, g));
            }
        }
    }
    out
}

fn zero(t: &Tape) -> Result<Var> {
    Ok(t.constant(&[1], vec![0.0])?)
}

/// Balanced objectness BCE: mean over positives plus mean over negatives.
fn balanced_bce(t: &Tape, logits: Var, positive: &[bool]) -> Result<Var> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    let targets: Vec<f64> = positive.iter().map(|&p| if p { 1.0 } else { 0.0 }).collect();
    let weights: Vec<f64> = positive
        .iter()
        .map(|&p| if p { 1.0 / n_pos as f64 } else { 1.0 / n_neg as f64 })
        .collect();
    Ok(t.bce_with_logits(logits, &targets, &weights)?)
}

/// `(l3d_cls, l3d_reg)` for one scene.
pub fn loss3d(t: &Tape, out: Var, cfg: &Head3dConfig, spec: &VoxelGridSpec, gts: &[Box3D]) -> Result<(Var, Var)> {
    let [nx, ny, _] = spec.extents();
    let cells = nx * ny;
    let n_cls = cfg.classes();
    let pos = assign3d(cfg, spec, gts);
    let mut positive = vec![false; cells];
    for &(c, _) in &pos {
        positive[c] = true;
    }
    let obj = t.gather(out, (0..cells).map(Some), &[cells])?;
    let mut l_cls = balanced_bce(t, obj, &positive)?;
    if pos.is_empty() {
        return Ok((l_cls, zero(t)?));
    }
    let w = 1.0 / pos.len() as f64;
    let cls_idx = pos.iter().flat_map(|&(c, _)| (0..n_cls).map(move |k| Some((1 + k) * cells + c)));
    let cls = t.gather(out, cls_idx, &[pos.len(), n_cls])?;
    let labels: Vec<usize> = pos.iter().map(|&(_, g)| gts[g].class_id).collect();
    let ce = t.cross_entropy(cls, &labels, &vec![w; pos.len()])?;
    l_cls = t.add(l_cls, ce)?;

    let reg_idx = pos.iter().flat_map(|&(c, _)| (0..RESIDUALS).map(move |k| Some((1 + n_cls + k) * cells + c)));
    let reg = t.gather(out, reg_idx, &[pos.len() * RESIDUALS])?;
    let mut targets = Vec::with_capacity(pos.len() * RESIDUALS);
    for &(c, g) in &pos {
        let a = cfg.anchor(spec, c / ny, c % ny, gts[g].class_id);
        targets.extend(encode_box3d(&a, &gts[g]));
    }
    let l_reg = t.smooth_l1(reg, &targets, &vec![w; targets.len()])?;
    Ok((l_cls, l_reg))
}

/// Thresholded, NMS-filtered boxes from head output values.
pub fn decode3d(
    values: &[f64],
    cfg: &Head3dConfig,
    spec: &VoxelGridSpec,
    score_thresh: f64,
    nms_iou: f64,
    max_det: usize,
) -> Result<Vec<DetectionBox<Box3D>>> {
    let [nx, ny, _] = spec.extents();
    let cells = nx * ny;
    let n_cls = cfg.classes();
    let mut dets = Vec::new();
    for c in 0..cells {
        let score = sigmoid(values[c]);
        if score <= score_thresh {
            continue;
        }
        let class = (0..n_cls)
            .max_by(|&a, &b| values[(1 + a) * cells + c].total_cmp(&values[(1 + b) * cells + c]).then(b.cmp(&a)))
            .expect("at least one class");
        let r: Vec<f64> = (0..RESIDUALS).map(|k| values[(1 + n_cls + k) * cells + c]).collect();
        let bbox = decode_box3d(&cfg.anchor(spec, c / ny, c % ny, class), &r);
        dets.push(DetectionBox {
            bbox,
            score,
            class_id: class,
        });
    }
    nms_limited(&dets, nms_iou, max_det)
}

// ---------------------------------------------------------------- 2D head

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Head2dConfig {
    /// Mean object `(width, height)` in meters; sets the anchor shape.
    pub anchor_dims: [f64; 2],
    pub proposals: usize,
    pub hidden: usize,
    pub roi_out: usize,
    pub positive_iou: f64,
}

impl Default for Head2dConfig {
    fn default() -> Self {
        Self {
            anchor_dims: [2.0, 1.65],
            proposals: 16,
            hidden: 256,
            roi_out: 4,
            positive_iou: 0.5,
        }
    }
}

/// Geometry needed to place the per-cell 2D anchors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnchorFrame {
    pub image_size: (usize, usize),
    /// Image row of the horizon.
    pub horizon: f64,
    pub ground_z: f64,
}

/// Anchor of feature cell `(row, col)`: centered on the cell and sized as
/// a ground-standing object of mean dimensions whose center projects to
/// that row.
pub fn anchor2d(cfg: &Head2dConfig, frame: &AnchorFrame, stride: usize, row: usize, col: usize) -> Box2D {
    let s = stride as f64;
    let (cu, cv) = ((col as f64 + 0.5) * s, (row as f64 + 0.5) * s);
    let center_height = -(frame.ground_z + cfg.anchor_dims[1] / 2.0);
    let scale = ((cv - frame.horizon) / center_height.max(1e-3)).max(0.0);
    let (w_img, h_img) = (frame.image_size.0 as f64, frame.image_size.1 as f64);
    let aw = (cfg.anchor_dims[0] * scale).clamp(s, w_img);
    let ah = (cfg.anchor_dims[1] * scale).clamp(s, h_img);
    let u0 = (cu - aw / 2.0).max(0.0);
    let v0 = (cv - ah / 2.0).max(0.0);
    let u1 = (cu + aw / 2.0).min(w_img);
    let v1 = (cv + ah / 2.0).min(h_img);
    Box2D {
        u_min: u0,
        v_min: v0,
        u_max: u1,
        v_max: v1,
        class_id: usize::MAX,
    }
}

pub fn encode_box2d(a: &Box2D, g: &Box2D) -> [f64; 4] {
    let (ac, gc) = (a.center(), g.center());
    [
        (gc.0 - ac.0) / a.width(),
        (gc.1 - ac.1) / a.height(),
        (g.width() / a.width()).ln(),
        (g.height() / a.height()).ln(),
    ]
}

pub fn init_head2d(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, classes: usize, cfg: &Head2dConfig) {
    store.init_conv(rng, "head2d.rpn", channels, 5, 1);
    store.init_linear(rng, "head2d.fc", cfg.roi_out * cfg.roi_out * channels, cfg.hidden);
    store.init_linear(rng, "head2d.cls", cfg.hidden, classes + 1);
    store.init_linear(rng, "head2d.reg", cfg.hidden, 4);
}

/// Stage-1 dense map `[5, h, w]`: objectness then four box deltas.
pub fn rpn_forward(p: &Bound, f: &FeatureMap) -> Result<Var> {
    p.conv("head2d.rpn", f.var, 1, 0)
}

/// The `k` highest-objectness cells (ties by index), as anchor boxes.
pub fn top_proposals(rpn: &[f64], cfg: &Head2dConfig, frame: &AnchorFrame, f: &FeatureMap) -> Vec<Box2D> {
    let cells = f.h * f.w;
    let mut order: Vec<usize> = (0..cells).collect();
    order.sort_by(|&a, &b| rpn[b].total_cmp(&rpn[a]).then(a.cmp(&b)));
    order
        .into_iter()
        .take(cfg.proposals.min(cells))
        .map(|c| anchor2d(cfg, frame, f.stride, c / f.w, c % f.w))
        .collect()
}

/// Stage-2 outputs for fixed proposals: `([K, C+1] logits, [K, 4] deltas)`.
pub fn rcnn_forward(p: &Bound, f: &FeatureMap, cfg: &Head2dConfig, proposals: &[Box2D]) -> Result<(Var, Var)> {
    let t = p.tape;
    let mut rows = Vec::with_capacity(proposals.len());
    for b in proposals {
        let r = roi_align_2d(t, f, b, cfg.roi_out)?;
        let n = t.shape(r)[0];
        rows.push(t.reshape(r, &[1, n])?);
    }
    let x = t.concat(&rows, 0)?;
    let h = t.relu(p.linear("head2d.fc", x)?);
    Ok((p.linear("head2d.cls", h)?, p.linear("head2d.reg", h)?))
}

pub struct Loss2d {
    pub rpn_cls: Var,
    pub rpn_reg: Var,
    pub rcnn_cls: Var,
    pub rcnn_reg: Var,
}

pub fn rpn_loss(t: &Tape, rpn: Var, cfg: &Head2dConfig, frame: &AnchorFrame, f: &FeatureMap, gts: &[Box2D]) -> Result<(Var, Var)> {
    let cells = f.h * f.w;
    let mut pos: Vec<(usize, usize)> = Vec::new();
    for c in 0..cells {
        let a = anchor2d(cfg, frame, f.stride, c / f.w, c % f.w);
        let (u, v) = ((c % f.w) as f64 + 0.5, (c / f.w) as f64 + 0.5);
        let (u, v) = (u * f.stride as f64, v * f.stride as f64);
        let best = gts
            .iter()
            .enumerate()
            .filter(|(_, g)| g.contains(u, v))
            .max_by(|a2, b2| iou_2d(&a, a2.1).total_cmp(&iou_2d(&a, b2.1)).then(b2.0.cmp(&a2.0)));
        if let Some((g, _)) = best {
            pos.push((c, g));
        }
    }
    let mut positive = vec![false; cells];
    for &(c, _) in &pos {
        positive[c] = true;
    }
    let obj = t.gather(rpn, (0..cells).map(Some), &[cells])?;
    let cls = balanced_bce(t, obj, &positive)?;
    if pos.is_empty() {
        return Ok((cls, zero(t)?));
    }
    let reg = t.gather(rpn, pos.iter().flat_map(|&(c, _)| (0..4).map(move |k| Some((1 + k) * cells + c))), &[pos.len() * 4])?;
    let mut targets = Vec::with_capacity(pos.len() * 4);
    for &(c, g) in &pos {
        targets.extend(encode_box2d(&anchor2d(cfg, frame, f.stride, c / f.w, c % f.w), &gts[g]));
    }
    let w = 1.0 / pos.len() as f64;
    Ok((cls, t.smooth_l1(reg, &targets, &vec![w; targets.len()])?))
}

/// Cross-entropy over classes plus background (last index) for every
/// proposal, and smooth-L1 deltas for proposals with IoU ≥ threshold.
pub fn rcnn_loss(
    t: &Tape,
    logits: Var,
    deltas: Var,
    cfg: &Head2dConfig,
    classes: usize,
    proposals: &[Box2D],
    gts: &[Box2D],
) -> Result<(Var, Var)> {
    let k = proposals.len();
    let mut labels = Vec::with_capacity(k);
    let mut reg_rows = Vec::new();
    let mut targets = Vec::new();
    for (i, prop) in proposals.iter().enumerate() {
        let best = gts
            .iter()
            .enumerate()
            .map(|(g, gt)| (g, iou_2d(prop, gt)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((g, iou)) if iou >= cfg.positive_iou && gts[g].class_id < classes => {
                labels.push(gts[g].class_id);
                reg_rows.push(i);
                targets.extend(encode_box2d(prop, &gts[g]));
            }
            _ => labels.push(classes),
        }
    }
    let cls = t.cross_entropy(logits, &labels, &vec![1.0 / k as f64; k])?;
    if reg_rows.is_empty() {
        return Ok((cls, zero(t)?));
    }
    let sel = t.select_rows(deltas, &reg_rows)?;
    let flat = t.reshape(sel, &[reg_rows.len() * 4])?;
    let w = 1.0 / reg_rows.len() as f64;
    Ok((cls, t.smooth_l1(flat, &targets, &vec![w; targets.len()])?))
}

/// All four 2D terms for one scene.
pub fn head2d_losses(
    p: &Bound,
    f: &FeatureMap,
    cfg: &Head2dConfig,
    frame: &AnchorFrame,
    classes: usize,
    gts: &[Box2D],
) -> Result<Loss2d> {
    let t = p.tape;
    let rpn = rpn_forward(p, f)?;
    let (rpn_cls, rpn_reg) = rpn_loss(t, rpn, cfg, frame, f, gts)?;
    let proposals = {
        let v = t.value_ref(rpn);
        top_proposals(&v, cfg, frame, f)
    };
    let (logits, deltas) = rcnn_forward(p, f, cfg, &proposals)?;
    let (rcnn_cls, rcnn_reg) = rcnn_loss(t, logits, deltas, cfg, classes, &proposals, gts)?;
    Ok(Loss2d {
        rpn_cls,
        rpn_reg,
        rcnn_cls,
        rcnn_reg,
    })
}
