//! Voxel-to-image fusion: cross-attention and its alternative strategies.

use autoalign_tensor::Var;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::geometry::CameraProjection;
use crate::image_branch::FeatureMap;
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionStrategy {
    None,
    PointProj,
    Nonlocal,
    Cafa,
    CafaMultihead,
}

impl FusionStrategy {
    pub fn has_alignment_map(self) -> bool {
        matches!(self, Self::Cafa | Self::CafaMultihead)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CafaConfig {
    pub d: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub heads: usize,
    pub layer_norm: bool,
    /// Dropout probability on attention weights during training.
    pub dropout: f64,
}

impl Default for CafaConfig {
    fn default() -> Self {
        Self {
            d: 128,
            d_k: 128,
            d_v: 128,
            heads: 2,
            layer_norm: false,
            dropout: 0.0,
        }
    }
}

/// Row-stochastic `J × (h·w)` attention matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMap {
    pub rows: usize,
    pub h: usize,
    pub w: usize,
    pub weights: Vec<f64>,
}

impl AlignmentMap {
    pub fn row(&self, j: usize) -> &[f64] {
        let n = self.h * self.w;
        &self.weights[j * n..(j + 1) * n]
    }
}

pub fn init_fusion(store: &mut ParamStore, rng: &mut ChaCha8Rng, strategy: FusionStrategy, c: &CafaConfig) {
    match strategy {
        FusionStrategy::None => return,
        FusionStrategy::PointProj => {}
        _ => {
            store.init_matrix(rng, "fuse.wq", c.d, c.d_k);
            store.init_matrix(rng, "fuse.wk", c.d, c.d_k);
            store.init_matrix(rng, "fuse.wv", c.d, c.d_v);
            store.init_linear(rng, "fuse.ffn", c.d_v, c.d);
        }
    }
    store.init_linear(rng, "fuse.mix", 2 * c.d, c.d);
}

fn check_dims(p: &Bound, c: &CafaConfig, pts: Var, img: Var) -> Result<()> {
    let (a, b) = (p.tape.shape(pts), p.tape.shape(img));
    if a.len() != 2 || b.len() != 2 || a[1] != c.d || b[1] != c.d {
        return Err(AlignError::Dimension(format!(
            "voxel features {a:?} and image features {b:?} must both have {} columns",
            c.d
        )));
    }
    Ok(())
}

/// FFN on the attended features, then `Linear(concat(P, f_att))`.
fn finish(p: &Bound, c: &CafaConfig, pts: Var, attended: Var) -> Result<Var> {
    let t = p.tape;
    let mut f_att = p.linear("fuse.ffn", attended)?;
    if c.layer_norm {
        f_att = t.layer_norm(f_att);
    }
    mix(p, pts, f_att)
}

fn mix(p: &Bound, pts: Var, img: Var) -> Result<Var> {
    let cat = p.tape.concat(&[pts, img], 1)?;
    p.linear("fuse.mix", cat)
}

fn attention(p: &Bound, c: &CafaConfig, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let t = p.tape;
    let dk = t.shape(q)[1];
    let kt = t.transpose(k)?;
    let beta = t.scale(t.matmul(q, kt)?, 1.0 / (dk as f64).sqrt());
    let align = t.softmax(beta)?;
    let weights = match p.dropout_mask(t.value_ref(align).len(), c.dropout) {
        Some(mask) => {
            let m = t.constant(&t.shape(align), mask)?;
            t.mul(align, m)?
        }
        None => align,
    };
    Ok((t.matmul(weights, v)?, align))
}

/// Single-head cross-attention. Returns the fused voxel features `[J, d]`
/// and the `[J, h·w]` attention weights.
pub fn cafa_forward(p: &Bound, c: &CafaConfig, pts: Var, img_flat: Var) -> Result<(Var, Var)> {
    check_dims(p, c, pts, img_flat)?;
    let t = p.tape;
    let q = t.matmul(pts, p.var("fuse.wq")?)?;
    let k = t.matmul(img_flat, p.var("fuse.wk")?)?;
    let v = t.matmul(img_flat, p.var("fuse.wv")?)?;
    let (attended, align) = attention(p, c, q, k, v)?;
    Ok((finish(p, c, pts, attended)?, align))
}

/// Channel-split attention; the reported map is the mean over heads.
pub fn multihead_cafa_forward(p: &Bound, c: &CafaConfig, pts: Var, img_flat: Var) -> Result<(Var, Var)> {
    check_dims(p, c, pts, img_flat)?;
    if c.heads == 0 || c.d_k % c.heads != 0 || c.d_v % c.heads != 0 {
        return Err(AlignError::Config(format!(
            "d_k = {} and d_v = {} must be divisible by {} heads",
            c.d_k, c.d_v, c.heads
        )));
    }
    let t = p.tape;
    let q = t.matmul(pts, p.var("fuse.wq")?)?;
    let k = t.matmul(img_flat, p.var("fuse.wk")?)?;
    let v = t.matmul(img_flat, p.var("fuse.wv")?)?;
    let (hk, hv) = (c.d_k / c.heads, c.d_v / c.heads);
    let mut outs = Vec::with_capacity(c.heads);
    let mut aligns = Vec::with_capacity(c.heads);
    for h in 0..c.heads {
        let qh = t.slice_cols(q, h * hk, (h + 1) * hk)?;
        let kh = t.slice_cols(k, h * hk, (h + 1) * hk)?;
        let vh = t.slice_cols(v, h * hv, (h + 1) * hv)?;
        let (o, a) = attention(p, c, qh, kh, vh)?;
        outs.push(o);
        aligns.push(a);
    }
    let attended = t.concat(&outs, 1)?;
    let align = t.scale(t.add_all(&aligns)?, 1.0 / c.heads as f64);
    Ok((finish(p, c, pts, attended)?, align))
}

/// Non-local block: unnormalized dot products scaled by `1/(h·w)`.
pub fn nonlocal_fusion(p: &Bound, c: &CafaConfig, pts: Var, img_flat: Var) -> Result<Var> {
    check_dims(p, c, pts, img_flat)?;
    let t = p.tape;
    let hw = t.shape(img_flat)[0];
    let q = t.matmul(pts, p.var("fuse.wq")?)?;
    let k = t.matmul(img_flat, p.var("fuse.wk")?)?;
    let v = t.matmul(img_flat, p.var("fuse.wv")?)?;
    let kt = t.transpose(k)?;
    let w = t.scale(t.matmul(q, kt)?, 1.0 / hw as f64);
    let attended = t.matmul(w, v)?;
    finish(p, c, pts, attended)
}

/// Feature-map coordinates `(u / stride, v / stride)` for each voxel
/// center, or `None` when it is behind the camera or outside the image.
pub fn projected_samples(
    centers: &[[f64; 3]],
    proj: &CameraProjection,
    image_size: (usize, usize),
    stride: usize,
) -> Vec<Option<(f64, f64)>> {
    let (w, h) = (image_size.0 as f64, image_size.1 as f64);
    centers
        .iter()
        .map(|&c| {
            let (u, v, _) = proj.project_point(c).ok()?;
            if (0.0..=w).contains(&u) && (0.0..=h).contains(&v) {
                Some((u / stride as f64, v / stride as f64))
            } else {
                None
            }
        })
        .collect()
}

/// Image feature per voxel, `[J, c]`; zero rows for voxels out of view.
pub fn sample_voxel_features(p: &Bound, fmap: &FeatureMap, samples: &[Option<(f64, f64)>]) -> Result<Var> {
    let t = p.tape;
    let c = fmap.channels;
    let visible: Vec<(f64, f64)> = samples.iter().flatten().copied().collect();
    if visible.is_empty() {
        return Ok(t.constant(&[samples.len(), c], vec![0.0; samples.len() * c])?);
    }
    let sampled = t.bilinear_sample_many(fmap.var, &visible)?;
    let mut next = 0;
    let mut idx = Vec::with_capacity(samples.len() * c);
    for s in samples {
        match s {
            Some(_) => {
                idx.extend((0..c).map(|ch| Some(next * c + ch)));
                next += 1;
            }
            None => idx.extend(std::iter::repeat_n(None, c)),
        }
    }
    Ok(t.gather(sampled, idx, &[samples.len(), c])?)
}

/// Projection-and-sample fusion followed by the same concat mix.
pub fn point_projection_fusion(
    p: &Bound,
    pts: Var,
    fmap: &FeatureMap,
    centers: &[[f64; 3]],
    proj: &CameraProjection,
    image_size: (usize, usize),
) -> Result<Var> {
    let samples = projected_samples(centers, proj, image_size, fmap.stride);
    let img = sample_voxel_features(p, fmap, &samples)?;
    mix(p, pts, img)
}
