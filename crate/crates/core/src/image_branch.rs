//! Small strided convolutional backbone over the camera image.

use autoalign_tensor::Var;
use rand_chacha::ChaCha8Rng;

use crate::error::{AlignError, Result};
use crate::params::{Bound, ParamStore};

#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    /// `[c, h, w]`.
    pub var: Var,
    pub stride: usize,
    pub channels: usize,
    pub h: usize,
    pub w: usize,
}

pub struct Backbone {
    pub c5: FeatureMap,
    pub p5: FeatureMap,
}

fn check_stride(stride: usize) -> Result<()> {
    if matches!(stride, 4 | 8 | 16 | 32) {
        Ok(())
    } else {
        Err(AlignError::Config(format!("feature stride must be 4, 8, 16 or 32, got {stride}")))
    }
}

/// Stage strides: the first `log2(stride)` stages halve the resolution and
/// any remaining stages (up to four in total) keep it.
pub fn stage_strides(stride: usize) -> Result<Vec<usize>> {
    check_stride(stride)?;
    let down = stride.trailing_zeros() as usize;
    Ok((0..down.max(4)).map(|i| if i < down { 2 } else { 1 }).collect())
}

pub fn init_backbone(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, stride: usize) -> Result<()> {
    let stages = stage_strides(stride)?;
    for i in 0..stages.len() {
        let c_in = if i == 0 { 3 } else { channels };
        store.init_conv(rng, &format!("img.backbone.{i}"), c_in, channels, 3);
    }
    store.init_conv(rng, "img.backbone.p5", channels, channels, 3);
    Ok(())
}

pub fn backbone_forward(p: &Bound, image: Var, stride: usize) -> Result<Backbone> {
    let stages = stage_strides(stride)?;
    let s = p.tape.shape(image);
    if s.len() != 3 || s[0] != 3 {
        return Err(AlignError::Dimension(format!("image must be [3, H, W], got {s:?}")));
    }
    let (hh, ww) = (s[1], s[2]);
    if hh % stride != 0 || ww % stride != 0 {
        return Err(AlignError::Dimension(format!("image {hh}x{ww} is not divisible by stride {stride}")));
    }
    let mut x = image;
    for (i, &st) in stages.iter().enumerate() {
        x = p.tape.relu(p.conv(&format!("img.backbone.{i}"), x, st, 1)?);
    }
    let p5 = p.conv("img.backbone.p5", x, 1, 1)?;
    let channels = p.tape.shape(x)[0];
    let fm = |var| FeatureMap {
        var,
        stride,
        channels,
        h: hh / stride,
        w: ww / stride,
    };
    Ok(Backbone { c5: fm(x), p5: fm(p5) })
}

pub fn init_reduce(store: &mut ParamStore, rng: &mut ChaCha8Rng, channels: usize, d: usize) {
    store.init_conv(rng, "img.reduce", channels, d, 1);
}

/// 1×1 convolution to `d` channels: the map attended to by fusion.
pub fn reduce_dim(p: &Bound, z: &FeatureMap) -> Result<FeatureMap> {
    let var = p.conv("img.reduce", z.var, 1, 0)?;
    Ok(FeatureMap {
        var,
        channels: p.tape.shape(var)[0],
        ..*z
    })
}

/// `[c, h, w]` → `[h·w, c]`; row `v·w + u` holds pixel `(v, u)`.
pub fn flatten_spatial(p: &Bound, f: &FeatureMap) -> Result<Var> {
    let t = p.tape;
    let m = t.reshape(f.var, &[f.channels, f.h * f.w])?;
    Ok(t.transpose(m)?)
}

/// Inverse of [`flatten_spatial`].
pub fn unflatten_spatial(p: &Bound, flat: Var, h: usize, w: usize) -> Result<Var> {
    let t = p.tape;
    let c = t.shape(flat)[1];
    let m = t.transpose(flat)?;
    Ok(t.reshape(m, &[c, h, w])?)
}

/// Pixel `(row, col)` of flattened index `k`.
pub fn unflatten_index(k: usize, w: usize) -> (usize, usize) {
    (k / w, k % w)
}
