//! Alignment-map statistics and heatmap export.

use std::fs;
use std::path::Path;

use autoalign_tensor::Tape;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::geometry::Box2D;
use crate::model::{forward, Model, Prepared};
use crate::params::Bound;

/// Share of one attention row that falls inside `b`, each feature cell
/// contributing in proportion to its area overlap with the box.
pub fn mass_in_box(row: &[f64], h: usize, w: usize, image_size: (usize, usize), b: &Box2D) -> f64 {
    let (cw, ch) = (image_size.0 as f64 / w as f64, image_size.1 as f64 / h as f64);
    let mut mass = 0.0;
    for r in 0..h {
        let (v0, v1) = (r as f64 * ch, (r + 1) as f64 * ch);
        let oy = (v1.min(b.v_max) - v0.max(b.v_min)).max(0.0);
        if oy == 0.0 {
            continue;
        }
        for c in 0..w {
            let (u0, u1) = (c as f64 * cw, (c + 1) as f64 * cw);
            let ox = (u1.min(b.u_max) - u0.max(b.u_min)).max(0.0);
            mass += row[r * w + c] * ox * oy / (cw * ch);
        }
    }
    mass
}

/// Voxels whose centers lie inside a ground-truth box: `(voxel, gt)`.
pub fn in_box_voxels(s: &Prepared) -> Vec<(usize, usize)> {
    s.centers
        .iter()
        .enumerate()
        .filter_map(|(j, &c)| s.scene.gt_boxes3d.iter().position(|b| b.contains(c)).map(|g| (j, g)))
        .collect()
}

/// Sum and count of the in-box attention mass over every in-box voxel of
/// the scene. `align` is the `[J, h·w]` map.
pub fn attention_mass(align: &[f64], s: &Prepared, h: usize, w: usize) -> Result<(f64, usize)> {
    let hw = h * w;
    if align.len() != s.voxels.len() * hw {
        return Err(AlignError::Dimension(format!(
            "alignment map has {} entries, expected {} voxels × {hw}",
            align.len(),
            s.voxels.len()
        )));
    }
    let mut sum = 0.0;
    let voxels = in_box_voxels(s);
    for &(j, g) in &voxels {
        sum += mass_in_box(&align[j * hw..(j + 1) * hw], h, w, s.image_size(), &s.scene.gt_boxes2d[g]);
    }
    Ok((sum, voxels.len()))
}

/// Binary 16-bit PGM, values min-max rescaled to `[0, 65535]`; a constant
/// input maps to all 65535.
pub fn pgm16(values: &[f64], h: usize, w: usize) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &v in &values[..h * w] {
        let q = if hi > lo { ((v - lo) / (hi - lo) * 65535.0).round() as u16 } else { u16::MAX };
        out.extend_from_slice(&q.to_be_bytes());
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelAttention {
    pub voxel: usize,
    pub coord: [usize; 3],
    pub gt_index: usize,
    pub attention_mass: f64,
    pub uniform_mass: f64,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignDump {
    pub map_h: usize,
    pub map_w: usize,
    pub voxels: Vec<VoxelAttention>,
    pub mean_attention_mass: Option<f64>,
}

/// Writes one heatmap per selected voxel plus `align_stats.json`. Without
/// an explicit selection, `count` in-box voxels are drawn with `seed`.
pub fn dump_align_map(model: &Model, s: &Prepared, out: &Path, voxels: Option<&[usize]>, count: usize, seed: u64) -> Result<AlignDump> {
    if !model.cfg.fusion.has_alignment_map() {
        return Err(AlignError::UnsupportedDiagnostic(format!(
            "fusion strategy {:?} produces no alignment map",
            model.cfg.fusion
        )));
    }
    let tape = Tape::new();
    let p = Bound::frozen(&tape, &model.params);
    let f = forward(&p, &model.cfg, s)?;
    let (Some(a), Some(img)) = (f.align, f.image.as_ref()) else {
        return Err(AlignError::UnsupportedDiagnostic("scene has no voxels to align".into()));
    };
    let red = img.reduced.expect("attention builds the reduced map");
    let (h, w) = (red.h, red.w);
    let align = tape.value(a);
    let candidates = in_box_voxels(s);
    let selected: Vec<(usize, usize)> = match voxels {
        Some(v) => v
            .iter()
            .map(|&j| {
                candidates
                    .iter()
                    .find(|c| c.0 == j)
                    .copied()
                    .ok_or_else(|| AlignError::Config(format!("voxel {j} is not inside a ground-truth box")))
            })
            .collect::<Result<_>>()?,
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = count.min(candidates.len());
            let mut idx = sample(&mut rng, candidates.len(), k).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| candidates[i]).collect()
        }
    };
    fs::create_dir_all(out).map_err(|e| AlignError::io(out, e))?;
    let hw = h * w;
    let img_size = s.image_size();
    let mut records = Vec::new();
    for (j, g) in selected {
        let row = &align[j * hw..(j + 1) * hw];
        let name = format!("voxel_{j:05}.pgm");
        let path = out.join(&name);
        fs::write(&path, pgm16(row, h, w)).map_err(|e| AlignError::io(&path, e))?;
        let b = &s.scene.gt_boxes2d[g];
        records.push(VoxelAttention {
            voxel: j,
            coord: s.voxels.coords[j],
            gt_index: g,
            attention_mass: mass_in_box(row, h, w, img_size, b),
            uniform_mass: b.area() / (img_size.0 * img_size.1) as f64,
            file: name,
        });
    }
    let (sum, n) = attention_mass(&align, s, h, w)?;
    let dump = AlignDump {
        map_h: h,
        map_w: w,
        voxels: records,
        mean_attention_mass: (n > 0).then(|| sum / n as f64),
    };
    let path = out.join("align_stats.json");
    fs::write(&path, serde_json::to_string_pretty(&dump)?).map_err(|e| AlignError::io(&path, e))?;
    Ok(dump)
}
