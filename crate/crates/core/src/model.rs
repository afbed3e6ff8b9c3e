//! Full detector: configuration, parameter layout, forward pass and losses.

use std::path::PathBuf;

use autoalign_tensor::{Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cafa::{self, CafaConfig, FusionStrategy};
use crate::error::{AlignError, Result};
use crate::geometry::{Box2D, Box3D, CameraProjection};
use crate::heads::{self, AnchorFrame, DetectionBox, Head2dConfig, Head3dConfig};
use crate::image_branch::{self, Backbone, FeatureMap};
use crate::params::{Bound, OptimConfig, ParamStore};
use crate::point_branch::{self, VoxelGridSpec, VoxelSet};
use crate::scene::Scene;
use crate::scfi::{self, ImageSource, PointSource, ScfiHeadConfig, ScfiVariant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub voxel: VoxelGridSpec,
    /// Width of voxel features and of the reduced image map.
    pub d: usize,
    pub cafa: CafaConfig,
    pub c_bev: usize,
    pub img_channels: usize,
    pub stride: usize,
    pub roi_out: usize,
    pub scfi_heads: ScfiHeadConfig,
    pub head3d: Head3dConfig,
    pub head2d: Head2dConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            voxel: VoxelGridSpec::default(),
            d: 128,
            cafa: CafaConfig::default(),
            c_bev: 64,
            img_channels: 64,
            stride: 8,
            roi_out: 4,
            scfi_heads: ScfiHeadConfig::default(),
            head3d: Head3dConfig {
                anchors: vec![[3.9, 1.7, 1.5], [1.25, 1.25, 1.8]],
                ground_z: -1.7,
            },
            head2d: Head2dConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn classes(&self) -> usize {
        self.head3d.classes()
    }

    fn cafa_cfg(&self, strategy: FusionStrategy) -> CafaConfig {
        let mut c = self.cafa;
        c.d = self.d;
        if strategy == FusionStrategy::Cafa {
            c.heads = 1;
        }
        c
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l3d_cls: f64,
    pub l3d_reg: f64,
    pub l2d_rpn_cls: f64,
    pub l2d_rpn_reg: f64,
    pub l2d_rcnn_cls: f64,
    pub l2d_rcnn_reg: f64,
    pub l_scfi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l3d_cls: 1.0,
            l3d_reg: 1.0,
            l2d_rpn_cls: 1.0,
            l2d_rpn_reg: 1.0,
            l2d_rcnn_cls: 1.0,
            l2d_rcnn_reg: 1.0,
            l_scfi: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_detections: usize,
    /// 3D IoU threshold per class.
    pub ap_iou: Vec<f64>,
    /// Cap on evaluated scenes (`None` = whole split).
    pub max_scenes: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            score_threshold: 0.05,
            nms_iou: 0.25,
            max_detections: 20,
            ap_iou: vec![0.5, 0.25],
            max_scenes: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub seed: u64,
    pub steps: usize,
    pub batch_size: usize,
    /// Optimizer of the point side (voxel embedding, BEV backbone, fusion,
    /// 3D head, point-side SCFI heads).
    pub optim_3d: OptimConfig,
    /// Optimizer of the image side (backbone, reduction, 2D head,
    /// image-side SCFI heads).
    pub optim_2d: OptimConfig,
    pub fusion: FusionStrategy,
    pub scfi: ScfiVariant,
    pub scfi_image_source: ImageSource,
    pub scfi_point_source: PointSource,
    pub joint_2d: bool,
    pub n_pairs: usize,
    pub pair_score_threshold: f64,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            seed: 0,
            steps: 300,
            batch_size: 2,
            optim_3d: OptimConfig::adamw(1e-3, 0.01),
            optim_2d: OptimConfig::sgd(1e-2, 0.9),
            fusion: FusionStrategy::Cafa,
            scfi: ScfiVariant::NcsPos,
            scfi_image_source: ImageSource::C5,
            scfi_point_source: PointSource::BeforeBackbone,
            joint_2d: true,
            n_pairs: 4,
            pair_score_threshold: 0.3,
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            eval_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AlignError::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be at least 1".into());
        }
        if !(self.optim_3d.lr > 0.0 && self.optim_2d.lr > 0.0) {
            return bad("learning rates must be positive".into());
        }
        if self.n_pairs == 0 {
            return bad("n_pairs must be at least 1".into());
        }
        let m = &self.model;
        m.voxel.validate()?;
        if m.d == 0 || m.c_bev == 0 || m.img_channels == 0 || m.roi_out == 0 || m.classes() == 0 {
            return bad("model widths and class count must be positive".into());
        }
        image_branch::stage_strides(m.stride)?;
        if self.eval.ap_iou.len() != m.classes() {
            return bad(format!("eval.ap_iou needs {} entries", m.classes()));
        }
        if self.fusion == FusionStrategy::CafaMultihead {
            let c = m.cafa_cfg(self.fusion);
            if c.heads == 0 || c.d_k % c.heads != 0 || c.d_v % c.heads != 0 {
                return bad(format!("d_k and d_v must be divisible by {} heads", c.heads));
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn needs_image(&self) -> bool {
        self.fusion != FusionStrategy::None || self.scfi != ScfiVariant::Off || self.joint_2d
    }

    pub fn cafa(&self) -> CafaConfig {
        self.model.cafa_cfg(self.fusion)
    }
}

/// Parameter prefixes updated by the image-side optimizer.
pub const IMAGE_SIDE: [&str; 3] = ["img.", "head2d.", "scfi.img."];

pub fn is_image_side(name: &str) -> bool {
    IMAGE_SIDE.iter().any(|p| name.starts_with(p))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub cfg: RunConfig,
    pub params: ParamStore,
}

impl Model {
    /// Fresh parameters for every enabled component (and nothing else).
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut ps = ParamStore::new();
        point_branch::init_embed(&mut ps, &mut rng, m.d);
        point_branch::init_bev(&mut ps, &mut rng, m.d, m.c_bev);
        heads::init_head3d(&mut ps, &mut rng, m.c_bev, &m.head3d);
        if cfg.needs_image() {
            image_branch::init_backbone(&mut ps, &mut rng, m.img_channels, m.stride)?;
        }
        if cfg.fusion != FusionStrategy::None {
            image_branch::init_reduce(&mut ps, &mut rng, m.img_channels, m.d);
            cafa::init_fusion(&mut ps, &mut rng, cfg.fusion, &cfg.cafa());
        }
        if cfg.joint_2d {
            heads::init_head2d(&mut ps, &mut rng, m.img_channels, m.classes(), &m.head2d);
        }
        if cfg.scfi != ScfiVariant::Off {
            let cells3 = m.roi_out.pow(3);
            let pts_in = cells3
                * match cfg.scfi_point_source {
                    PointSource::BeforeBackbone => m.d,
                    PointSource::AfterBackbone => m.c_bev,
                };
            scfi::init_heads(&mut ps, &mut rng, "pts", pts_in, &m.scfi_heads);
            scfi::init_heads(&mut ps, &mut rng, "img", m.roi_out * m.roi_out * m.img_channels, &m.scfi_heads);
        }
        Ok(Self { cfg, params: ps })
    }

    /// `(point-side, image-side)` parameter names.
    pub fn param_groups(&self) -> (Vec<String>, Vec<String>) {
        self.params.names().cloned().partition(|n| !is_image_side(n))
    }
}

/// A scene with its voxelization cached.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub scene: Scene,
    pub voxels: VoxelSet,
    pub centers: Vec<[f64; 3]>,
}

impl Prepared {
    pub fn new(scene: Scene, spec: &VoxelGridSpec) -> Self {
        let voxels = point_branch::voxelize(&scene.points, spec);
        let centers = voxels.centers();
        Self { scene, voxels, centers }
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.scene.image_size()
    }

    pub fn anchor_frame(&self, ground_z: f64) -> AnchorFrame {
        AnchorFrame {
            image_size: self.image_size(),
            horizon: horizon_row(&self.scene.projection),
            ground_z,
        }
    }
}

/// Image row where points far along the forward axis land.
pub fn horizon_row(proj: &CameraProjection) -> f64 {
    let m = proj.matrix();
    m[1][0] / m[2][0]
}

pub struct ImageFeatures {
    pub backbone: Backbone,
    pub reduced: Option<FeatureMap>,
}

/// Recorded forward pass of one scene.
pub struct Forward {
    pub image: Option<ImageFeatures>,
    /// Voxel features entering the BEV scatter (fused when fusion is on).
    pub voxel_feats: Option<Var>,
    pub align: Option<Var>,
    pub bev_out: Var,
    pub head3d: Var,
}

pub fn forward(p: &Bound, cfg: &RunConfig, s: &Prepared) -> Result<Forward> {
    let t = p.tape;
    let m = &cfg.model;
    let image = if cfg.needs_image() {
        let img = t.leaf(&s.scene.image);
        let backbone = image_branch::backbone_forward(p, img, m.stride)?;
        let reduced = if cfg.fusion != FusionStrategy::None {
            Some(image_branch::reduce_dim(p, &backbone.c5)?)
        } else {
            None
        };
        Some(ImageFeatures { backbone, reduced })
    } else {
        None
    };

    let (voxel_feats, align, bev_in) = if s.voxels.is_empty() {
        (None, None, point_branch::empty_bev(p, m.d, &m.voxel)?)
    } else {
        let emb = point_branch::embed_voxels(p, &s.voxels, &m.voxel)?;
        let reduced = image.as_ref().and_then(|i| i.reduced);
        let (fused, align) = match (cfg.fusion, reduced) {
            (FusionStrategy::None, _) => (emb, None),
            (_, None) => unreachable!("fusion always builds the reduced map"),
            (FusionStrategy::PointProj, Some(f)) => {
                let out = cafa::point_projection_fusion(p, emb, &f, &s.centers, &s.scene.projection, s.image_size())?;
                (out, None)
            }
            (FusionStrategy::Nonlocal, Some(f)) => {
                let flat = image_branch::flatten_spatial(p, &f)?;
                (cafa::nonlocal_fusion(p, &cfg.cafa(), emb, flat)?, None)
            }
            (FusionStrategy::Cafa, Some(f)) => {
                let flat = image_branch::flatten_spatial(p, &f)?;
                let (o, a) = cafa::cafa_forward(p, &cfg.cafa(), emb, flat)?;
                (o, Some(a))
            }
            (FusionStrategy::CafaMultihead, Some(f)) => {
                let flat = image_branch::flatten_spatial(p, &f)?;
                let (o, a) = cafa::multihead_cafa_forward(p, &cfg.cafa(), emb, flat)?;
                (o, Some(a))
            }
        };
        let bev = point_branch::scatter_bev(p, fused, &s.voxels, &m.voxel)?;
        (Some(fused), align, bev)
    };
    let bev_out = point_branch::bev_convs(p, bev_in)?;
    let head3d = heads::head3d_forward(p, bev_out)?;
    Ok(Forward {
        image,
        voxel_feats,
        align,
        bev_out,
        head3d,
    })
}

/// Predicted 3D boxes from a recorded head output.
pub fn decode(t: &Tape, cfg: &RunConfig, f: &Forward, score_thresh: f64) -> Result<Vec<DetectionBox<Box3D>>> {
    let v = t.value_ref(f.head3d);
    let m = &cfg.model;
    heads::decode3d(&v, &m.head3d, &m.voxel, score_thresh, cfg.eval.nms_iou, cfg.eval.max_detections)
}

/// RoI features for one box pair under the configured sources.
pub fn roi_pair(t: &Tape, cfg: &RunConfig, f: &Forward, s: &Prepared, b3: &Box3D, b2: &Box2D) -> Result<(Var, Var)> {
    let m = &cfg.model;
    let out = m.roi_out;
    let r3d = match cfg.scfi_point_source {
        PointSource::BeforeBackbone => match f.voxel_feats {
            Some(v) => scfi::roi_pool_3d(t, v, &s.centers, b3, out, false)?,
            None => t.constant(&[out.pow(3) * m.d], vec![0.0; out.pow(3) * m.d])?,
        },
        PointSource::AfterBackbone => {
            let [nx, ny, _] = m.voxel.extents();
            let flat = t.transpose(t.reshape(f.bev_out, &[m.c_bev, nx * ny])?)?;
            let pos: Vec<[f64; 3]> = (0..nx * ny).map(|c| m.voxel.center([c / ny, c % ny, 0])).collect();
            scfi::roi_pool_3d(t, flat, &pos, b3, out, true)?
        }
    };
    let img = f.image.as_ref().ok_or_else(|| AlignError::Config("SCFI needs the image branch".into()))?;
    let fmap = match cfg.scfi_image_source {
        ImageSource::C5 => &img.backbone.c5,
        ImageSource::P5 => &img.backbone.p5,
    };
    Ok((r3d, scfi::roi_align_2d(t, fmap, b2, out)?))
}

/// Unweighted loss components of one step; absent terms are disabled.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l3d_cls: f64,
    pub l3d_reg: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l2d_rpn_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l2d_rpn_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l2d_rcnn_cls: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l2d_rcnn_reg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_scfi: Option<f64>,
    pub total: f64,
}

impl LossBreakdown {
    /// Components in summation order.
    pub fn components(&self) -> Vec<f64> {
        let mut v = vec![self.l3d_cls, self.l3d_reg];
        v.extend(
            [self.l2d_rpn_cls, self.l2d_rpn_reg, self.l2d_rcnn_cls, self.l2d_rcnn_reg, self.l_scfi]
                .into_iter()
                .flatten(),
        );
        v
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.components().iter().all(|c| c.is_finite())
    }
}

/// Recorded batch loss.
pub struct BatchLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Joint loss over a batch: every component is averaged over the batch,
/// then the weighted components are summed.
pub fn batch_loss(p: &Bound, cfg: &RunConfig, batch: &[&Prepared], rng: &mut ChaCha8Rng) -> Result<BatchLoss> {
    if batch.is_empty() {
        return Err(AlignError::EmptyBatch("training batch"));
    }
    let t = p.tape;
    let m = &cfg.model;
    let mut parts: [Vec<Var>; 7] = Default::default();
    for s in batch {
        let f = forward(p, cfg, s)?;
        let (cls, reg) = heads::loss3d(t, f.head3d, &m.head3d, &m.voxel, &s.scene.gt_boxes3d)?;
        parts[0].push(cls);
        parts[1].push(reg);
        if cfg.joint_2d {
            let fmap = &f.image.as_ref().expect("joint training builds the image branch").backbone.p5;
            let l = heads::head2d_losses(p, fmap, &m.head2d, &s.anchor_frame(m.head3d.ground_z), m.classes(), &s.scene.gt_boxes2d)?;
            parts[2].push(l.rpn_cls);
            parts[3].push(l.rpn_reg);
            parts[4].push(l.rcnn_cls);
            parts[5].push(l.rcnn_reg);
        }
        if cfg.scfi != ScfiVariant::Off {
            let preds = decode(t, cfg, &f, cfg.pair_score_threshold)?;
            let boxes = scfi::sample_pairs(
                rng,
                &preds,
                &s.scene.gt_boxes3d,
                &s.scene.projection,
                s.image_size(),
                cfg.n_pairs,
                cfg.pair_score_threshold,
            );
            if !boxes.is_empty() {
                let pairs = boxes
                    .iter()
                    .map(|(b3, b2)| roi_pair(t, cfg, &f, s, b3, b2))
                    .collect::<Result<Vec<_>>>()?;
                parts[6].push(scfi::scfi_loss(p, &m.scfi_heads, cfg.scfi, &pairs)?);
            }
        }
    }
    let w = cfg.loss_weights;
    let weights = [w.l3d_cls, w.l3d_reg, w.l2d_rpn_cls, w.l2d_rpn_reg, w.l2d_rcnn_cls, w.l2d_rcnn_reg, w.l_scfi];
    let enabled = [true, true, cfg.joint_2d, cfg.joint_2d, cfg.joint_2d, cfg.joint_2d, cfg.scfi != ScfiVariant::Off];
    let mut comps = Vec::new();
    let mut values = [None; 7];
    for k in 0..7 {
        if !enabled[k] {
            continue;
        }
        let c = if parts[k].is_empty() {
            t.constant(&[1], vec![0.0])?
        } else {
            let n = parts[k].len() as f64;
            t.scale(t.add_all(&parts[k])?, 1.0 / n)
        };
        values[k] = Some(t.scalar(c));
        comps.push(t.scale(c, weights[k]));
    }
    let total = t.add_all(&comps)?;
    let breakdown = LossBreakdown {
        l3d_cls: values[0].unwrap_or(0.0),
        l3d_reg: values[1].unwrap_or(0.0),
        l2d_rpn_cls: values[2],
        l2d_rpn_reg: values[3],
        l2d_rcnn_cls: values[4],
        l2d_rcnn_reg: values[5],
        l_scfi: values[6],
        total: t.scalar(total),
    };
    Ok(BatchLoss { total, breakdown })
}
