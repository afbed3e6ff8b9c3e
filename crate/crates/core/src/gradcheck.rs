//! Finite-difference checks of every differentiable module and of the
//! joint loss on a micro scene.

use std::time::Instant;

use autoalign_tensor::{grad_check, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cafa::{self, CafaConfig, FusionStrategy};
use crate::error::{AlignError, Result};
use crate::geometry::{Box2D, Box3D};
use crate::heads::{self, Head2dConfig};
use crate::image_branch::{self, FeatureMap};
use crate::model::{batch_loss, Prepared, RunConfig};
use crate::params::{Bound, ParamStore};
use crate::point_branch::{self, VoxelGridSpec};
use crate::scene::{generate_scene, SceneConfig};
use crate::scfi::{self, ScfiHeadConfig, ScfiVariant};

pub const EPS: f64 = 1e-5;
pub const MODULES: [&str; 7] = ["tensor", "point_branch", "image_branch", "cafa", "roi_scfi", "detect_heads", "joint"];

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub tolerance: f64,
    /// Parameter and flat index of the worst entry.
    pub worst: (String, usize),
    pub seconds: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Tiny scene: 24×16 image, 12 m × 12 m grid.
pub fn micro_scene_config() -> SceneConfig {
    SceneConfig {
        image_width: 24,
        image_height: 16,
        objects_min: 2,
        objects_max: 2,
        place_x: [6.0, 10.0],
        place_y: 2.5,
        lidar_range: [12.0, 6.0],
        point_budget: 400,
        surface_density: 30.0,
        ground_points: 30,
        clutter_min: 0,
        clutter_max: 0,
        ..SceneConfig::default()
    }
}

pub fn micro_run_config() -> RunConfig {
    let mut c = RunConfig::default();
    let m = &mut c.model;
    m.voxel = VoxelGridSpec {
        min: [0.0, -6.0, -2.0],
        max: [12.0, 6.0, 1.0],
        size: [1.0, 1.0, 0.5],
    };
    m.d = 4;
    m.cafa = CafaConfig {
        d: 4,
        d_k: 4,
        d_v: 4,
        heads: 2,
        layer_norm: false,
        dropout: 0.0,
    };
    m.c_bev = 3;
    m.img_channels = 3;
    m.stride = 4;
    m.roi_out = 2;
    m.scfi_heads = ScfiHeadConfig {
        hidden: 5,
        out: 6,
        identity: false,
    };
    m.head2d = Head2dConfig {
        proposals: 3,
        hidden: 4,
        roi_out: 2,
        ..Head2dConfig::default()
    };
    c.n_pairs = 2;
    c.batch_size = 1;
    c
}

pub fn micro_scene(seed: u64) -> Result<Prepared> {
    let rc = micro_run_config();
    Ok(Prepared::new(generate_scene(seed, &micro_scene_config())?, &rc.model.voxel))
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// `sum(x ⊙ r)` for a fixed random `r`, turning any output into a scalar.
fn probe(t: &Tape, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = t.value_ref(x).len();
    let r = t.constant(&t.shape(x), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    Ok(t.sum(t.mul(x, r)?))
}

/// Adds uniform noise to every parameter so that zero-initialized biases
/// do not sit exactly on relu kinks.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        for x in store.get_mut(&n).expect("listed").data_mut() {
            *x += rng.random_range(-0.1..0.1);
        }
    }
}

fn check(name: &str, tol: f64, store: &ParamStore, f: impl Fn(&Bound) -> Result<Var>) -> Result<CheckResult> {
    let start = Instant::now();
    let names: Vec<String> = store.names().cloned().collect();
    let tensors: Vec<Tensor> = store.iter().map(|(_, t)| t.clone()).collect();
    let r = grad_check(
        |tape: &Tape, vars: &[Var]| -> Result<Var> {
            let b = Bound::from_vars(tape, &names, vars);
            f(&b)
        },
        &tensors,
        EPS,
    )?;
    Ok(CheckResult {
        name: name.into(),
        max_rel_error: r.max_rel_error,
        entries: r.entries,
        tolerance: tol,
        worst: (names[r.worst.0].clone(), r.worst.1),
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Uniform magnitudes in [0.05, 1) with random sign, so relu and max kinks
/// stay outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

type PrimFn = fn(&Tape, &[Var]) -> std::result::Result<Var, autoalign_tensor::TensorError>;

/// One primitive against central differences at the per-primitive tolerance.
fn primitive(name: &str, seed: u64, shapes: &[&[usize]], op: PrimFn) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    let names: Vec<String> = (0..shapes.len()).map(|i| format!("x{i}")).collect();
    for (n, sh) in names.iter().zip(shapes) {
        s.insert(n.clone(), away_from_zero(&mut rng, sh));
    }
    check(&format!("tensor/{name}"), 1e-6, &s, |p| {
        let vars: Vec<Var> = names.iter().map(|n| p.var(n)).collect::<Result<_>>()?;
        let out = op(p.tape, &vars)?;
        probe(p.tape, out, seed)
    })
}

fn tensor_checks() -> Result<Vec<CheckResult>> {
    let cases: [(&str, &[&[usize]], PrimFn); 21] = [
        ("matmul", &[&[3, 4], &[4, 5]], |t, p| t.matmul(p[0], p[1])),
        ("transpose", &[&[3, 4]], |t, p| t.transpose(p[0])),
        ("add", &[&[2, 3], &[2, 3]], |t, p| t.add(p[0], p[1])),
        ("sub", &[&[2, 3], &[2, 3]], |t, p| t.sub(p[0], p[1])),
        ("mul", &[&[2, 3], &[2, 3]], |t, p| t.mul(p[0], p[1])),
        ("add_bias", &[&[4, 3], &[3]], |t, p| t.add_bias(p[0], p[1])),
        ("scale", &[&[5]], |t, p| Ok(t.scale(p[0], -1.7))),
        ("relu", &[&[2, 5]], |t, p| Ok(t.relu(p[0]))),
        ("softmax", &[&[3, 5]], |t, p| t.softmax(p[0])),
        ("l2_normalize", &[&[3, 4]], |t, p| {
            let a = t.l2_normalize(p[0], 0)?;
            let b = t.l2_normalize(p[0], 1)?;
            t.add(a, b)
        }),
        ("layer_norm", &[&[3, 5]], |t, p| Ok(t.layer_norm(p[0]))),
        ("concat", &[&[2, 3], &[2, 2]], |t, p| t.concat(&[p[0], p[1]], 1)),
        ("reshape", &[&[2, 6]], |t, p| t.reshape(p[0], &[3, 4])),
        ("reductions", &[&[2, 3]], |t, p| {
            let a = t.sum(p[0]);
            let b = t.mean(p[0]);
            let c = t.sum(t.sum_last(p[0]));
            t.add_all(&[a, b, c])
        }),
        ("conv2d", &[&[2, 5, 6], &[3, 2, 3, 3], &[3]], |t, p| t.conv2d(p[0], p[1], Some(p[2]), 2, 1)),
        ("sparse_map", &[&[3, 4]], |t, p| {
            let rows = t.select_rows(p[0], &[2, 0])?;
            let cols = t.slice_cols(rows, 1, 3)?;
            let g = t.gather(p[0], [Some(5), None, Some(5), Some(11)], &[4])?;
            t.concat(&[t.reshape(cols, &[4])?, g], 0)
        }),
        ("bilinear_sample", &[&[2, 4, 5]], |t, p| {
            t.bilinear_sample_many(p[0], &[(0.3, 1.7), (3.9, 2.2), (-1.0, 5.0), (2.5, 0.0)])
        }),
        ("bce_with_logits", &[&[5]], |t, p| t.bce_with_logits(p[0], &[1.0, 0.0, 0.3, 1.0, 0.0], &[1.0, 2.0, 0.5, 0.0, 1.0])),
        ("cross_entropy", &[&[3, 4]], |t, p| t.cross_entropy(p[0], &[0, 3, 1], &[1.0, 0.5, 2.0])),
        ("smooth_l1", &[&[4]], |t, p| {
            let s = t.scale(p[0], 3.0);
            t.smooth_l1(s, &[0.1, -0.2, 0.0, 2.0], &[1.0, 1.0, 0.5, 1.0])
        }),
        ("add_all", &[&[2], &[2], &[2]], |t, p| t.add_all(&[p[0], p[1], p[2]])),
    ];
    cases
        .iter()
        .enumerate()
        .map(|(i, (name, shapes, op))| primitive(name, 100 + i as u64, shapes, *op))
        .collect()
}

fn point_checks() -> Result<Vec<CheckResult>> {
    let rc = micro_run_config();
    let m = &rc.model;
    let s = micro_scene(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut st = ParamStore::new();
    point_branch::init_embed(&mut st, &mut rng, m.d);
    point_branch::init_bev(&mut st, &mut rng, m.d, m.c_bev);
    jitter(&mut st, 2);
    let r = check("point_branch", 1e-6, &st, |p| {
        let e = point_branch::embed_voxels(p, &s.voxels, &m.voxel)?;
        let bev = point_branch::bev_backbone(p, e, &s.voxels, &m.voxel)?;
        let a = probe(p.tape, e, 2)?;
        Ok(p.tape.add(a, probe(p.tape, bev, 3)?)?)
    })?;
    Ok(vec![r])
}

fn image_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut st = ParamStore::new();
    image_branch::init_backbone(&mut st, &mut rng, 3, 4)?;
    image_branch::init_reduce(&mut st, &mut rng, 3, 4);
    let image = Tensor::from_fn(&[3, 8, 8], |_| rng.random_range(0.0..1.0));
    jitter(&mut st, 3);
    let r = check("image_branch", 1e-6, &st, |p| {
        let t = p.tape;
        let b = image_branch::backbone_forward(p, t.leaf(&image), 4)?;
        let red = image_branch::reduce_dim(p, &b.c5)?;
        let flat = image_branch::flatten_spatial(p, &red)?;
        Ok(t.add(probe(t, b.p5.var, 4)?, probe(t, flat, 5)?)?)
    })?;
    Ok(vec![r])
}

fn cafa_checks() -> Result<Vec<CheckResult>> {
    let c = CafaConfig {
        d: 4,
        d_k: 4,
        d_v: 4,
        heads: 2,
        layer_norm: true,
        dropout: 0.0,
    };
    let mut out = Vec::new();
    for (name, strategy) in [
        ("cafa/single_head", FusionStrategy::Cafa),
        ("cafa/multihead", FusionStrategy::CafaMultihead),
        ("cafa/nonlocal", FusionStrategy::Nonlocal),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut st = ParamStore::new();
        cafa::init_fusion(&mut st, &mut rng, strategy, &c);
        st.insert("input.p", random(&mut rng, &[3, 4], 1.0));
        st.insert("input.f", random(&mut rng, &[6, 4], 1.0));
        jitter(&mut st, 4);
        out.push(check(name, 1e-6, &st, |p| {
            let (pts, img) = (p.var("input.p")?, p.var("input.f")?);
            let t = p.tape;
            match strategy {
                FusionStrategy::Cafa | FusionStrategy::CafaMultihead => {
                    let (f, a) = if strategy == FusionStrategy::Cafa {
                        cafa::cafa_forward(p, &CafaConfig { heads: 1, ..c }, pts, img)?
                    } else {
                        cafa::multihead_cafa_forward(p, &c, pts, img)?
                    };
                    Ok(t.add(probe(t, f, 6)?, probe(t, a, 7)?)?)
                }
                _ => probe(t, cafa::nonlocal_fusion(p, &c, pts, img)?, 8),
            }
        })?);
    }
    let s = micro_scene(3)?;
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut st = ParamStore::new();
    cafa::init_fusion(&mut st, &mut rng, FusionStrategy::PointProj, &c);
    st.insert("input.p", random(&mut rng, &[s.voxels.len(), 4], 1.0));
    st.insert("input.fmap", random(&mut rng, &[4, 4, 6], 1.0));
    jitter(&mut st, 5);
    out.push(check("cafa/point_proj", 1e-6, &st, |p| {
        let fm = FeatureMap {
            var: p.var("input.fmap")?,
            stride: 4,
            channels: 4,
            h: 4,
            w: 6,
        };
        let f = cafa::point_projection_fusion(p, p.var("input.p")?, &fm, &s.centers, &s.scene.projection, s.image_size())?;
        probe(p.tape, f, 9)
    })?);
    Ok(out)
}

fn scfi_checks() -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut st = ParamStore::new();
    st.insert("input.fmap", random(&mut rng, &[2, 5, 6], 1.0));
    let positions: Vec<[f64; 3]> = (0..12)
        .map(|_| [rng.random_range(0.0..2.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
        .collect();
    st.insert("input.voxels", random(&mut rng, &[12, 3], 1.0));
    let b2 = Box2D::new(2.0, 3.0, 17.0, 15.0, 0)?;
    let b3 = Box3D::axis_aligned([1.0, 0.0, 0.0], [2.0, 2.0, 2.0], 0)?;
    jitter(&mut st, 6);
    let mut out = vec![check("roi_scfi/roi_align_2d+roi_pool_3d", 1e-6, &st, |p| {
        let t = p.tape;
        let fm = FeatureMap {
            var: p.var("input.fmap")?,
            stride: 4,
            channels: 2,
            h: 5,
            w: 6,
        };
        let a = scfi::roi_align_2d(t, &fm, &b2, 4)?;
        let b = scfi::roi_pool_3d(t, p.var("input.voxels")?, &positions, &b3, 2, false)?;
        Ok(t.add(probe(t, a, 10)?, probe(t, b, 11)?)?)
    })?];
    let hc = ScfiHeadConfig {
        hidden: 5,
        out: 6,
        identity: false,
    };
    for (name, v) in [
        ("roi_scfi/ncs_pos", ScfiVariant::NcsPos),
        ("roi_scfi/symmetric", ScfiVariant::Symmetric),
        ("roi_scfi/nce", ScfiVariant::Nce),
        ("roi_scfi/infonce", ScfiVariant::Infonce),
        ("roi_scfi/ce_pos", ScfiVariant::CePos),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut st = ParamStore::new();
        scfi::init_heads(&mut st, &mut rng, "pts", 8, &hc);
        scfi::init_heads(&mut st, &mut rng, "img", 6, &hc);
        st.insert("input.r3d", random(&mut rng, &[3, 8], 1.0));
        st.insert("input.r2d", random(&mut rng, &[3, 6], 1.0));
        jitter(&mut st, 7);
        let fixed = st.clone();
        out.push(check(name, 1e-6, &st, |p| {
            let t = p.tape;
            if v == ScfiVariant::Symmetric {
                let (a, b) = (p.var("input.r3d")?, p.var("input.r2d")?);
                let pairs = (0..3)
                    .map(|i| Ok((t.reshape(t.select_rows(a, &[i])?, &[8])?, t.reshape(t.select_rows(b, &[i])?, &[6])?)))
                    .collect::<Result<Vec<_>>>()?;
                return scfi::scfi_loss(p, &hc, v, &pairs);
            }
            // Targets come from the unperturbed parameters, which is what
            // stop-gradient means to a finite difference.
            let live = scfi::scfi_embed(p, &hc, p.var("input.r3d")?, p.var("input.r2d")?)?;
            let q = Bound::frozen(t, &fixed);
            let held = scfi::scfi_embed(&q, &hc, q.var("input.r3d")?, q.var("input.r2d")?)?;
            let e = scfi::ScfiEmbeddings { z1: held.z1, z2: held.z2, ..live };
            let (a, b) = scfi::scfi_terms(t, v, &e)?;
            Ok(t.add(a, b)?)
        })?);
    }
    Ok(out)
}

fn head_checks() -> Result<Vec<CheckResult>> {
    let rc = micro_run_config();
    let m = &rc.model;
    let s = micro_scene(3)?;
    let [nx, ny, _] = m.voxel.extents();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut st = ParamStore::new();
    heads::init_head3d(&mut st, &mut rng, m.c_bev, &m.head3d);
    heads::init_head2d(&mut st, &mut rng, 3, m.classes(), &m.head2d);
    st.insert("input.bev", random(&mut rng, &[m.c_bev, nx, ny], 1.0));
    st.insert("input.fmap", random(&mut rng, &[3, 4, 6], 1.0));
    let frame = s.anchor_frame(m.head3d.ground_z);
    jitter(&mut st, 8);
    let r = check("detect_heads", 1e-6, &st, |p| {
        let t = p.tape;
        let out = heads::head3d_forward(p, p.var("input.bev")?)?;
        let (c, r) = heads::loss3d(t, out, &m.head3d, &m.voxel, &s.scene.gt_boxes3d)?;
        let fm = FeatureMap {
            var: p.var("input.fmap")?,
            stride: 4,
            channels: 3,
            h: 4,
            w: 6,
        };
        let l = heads::head2d_losses(p, &fm, &m.head2d, &frame, m.classes(), &s.scene.gt_boxes2d)?;
        Ok(t.add_all(&[c, r, l.rpn_cls, l.rpn_reg, l.rcnn_cls, l.rcnn_reg])?)
    })?;
    Ok(vec![r])
}

/// Full joint loss with fusion, SCFI and 2D training enabled.
pub fn joint_check() -> Result<CheckResult> {
    let mut rc = micro_run_config();
    rc.fusion = FusionStrategy::Cafa;
    // No stop-gradient, and SCFI boxes taken from ground truth only: both
    // would otherwise make the loss depend on parameters in ways the tape
    // deliberately ignores.
    rc.scfi = ScfiVariant::Symmetric;
    rc.pair_score_threshold = f64::INFINITY;
    rc.joint_2d = true;
    let mut model = crate::model::Model::new(rc.clone())?;
    jitter(&mut model.params, 9);
    let s = micro_scene(3)?;
    check("joint", 1e-4, &model.params, |p| {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        Ok(batch_loss(p, &rc, &[&s], &mut rng)?.total)
    })
}

pub fn run_module(name: &str) -> Result<Vec<CheckResult>> {
    match name {
        "tensor" => tensor_checks(),
        "point_branch" => point_checks(),
        "image_branch" => image_checks(),
        "cafa" => cafa_checks(),
        "roi_scfi" => scfi_checks(),
        "detect_heads" => head_checks(),
        "joint" => Ok(vec![joint_check()?]),
        _ => Err(AlignError::Config(format!("unknown module {name:?}; expected one of {MODULES:?}"))),
    }
}

pub fn run_all() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for m in MODULES {
        out.extend(run_module(m)?);
    }
    Ok(out)
}
