//! Voxelization, per-voxel embedding and the BEV backbone.

use std::collections::BTreeMap;

use autoalign_tensor::Var;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AlignError, Result};
use crate::params::{Bound, ParamStore};

pub const RAW_STATS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGridSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub size: [f64; 3],
}

impl Default for VoxelGridSpec {
    fn default() -> Self {
        Self {
            min: [0.0, -16.0, -2.0],
            max: [32.0, 16.0, 1.0],
            size: [1.0, 1.0, 0.5],
        }
    }
}

impl VoxelGridSpec {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.max[a] > self.min[a]) || !(self.size[a] > 0.0) {
                return Err(AlignError::Config(format!("voxel grid axis {a}: need max > min and size > 0")));
            }
        }
        Ok(())
    }

    /// Cells per axis.
    pub fn extents(&self) -> [usize; 3] {
        std::array::from_fn(|a| (((self.max[a] - self.min[a]) / self.size[a]) - 1e-9).ceil().max(1.0) as usize)
    }

    pub fn center(&self, c: [usize; 3]) -> [f64; 3] {
        std::array::from_fn(|a| self.min[a] + (c[a] as f64 + 0.5) * self.size[a])
    }

    /// Voxel containing `p`, or `None` outside the range. Points on a max
    /// face fall into the last cell.
    pub fn locate(&self, p: [f64; 3]) -> Option<[usize; 3]> {
        let ext = self.extents();
        let mut c = [0; 3];
        for a in 0..3 {
            if !(p[a] >= self.min[a] && p[a] <= self.max[a]) {
                return None;
            }
            c[a] = (((p[a] - self.min[a]) / self.size[a]).floor() as usize).min(ext[a] - 1);
        }
        Some(c)
    }
}

/// Non-empty voxels, sorted by `(x, y, z)` index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct VoxelSet {
    pub coords: Vec<[usize; 3]>,
    /// Mean offset from the voxel center (xyz), mean intensity, point count,
    /// voxel center (xyz).
    pub raw_stats: Vec<[f64; RAW_STATS]>,
}

impl VoxelSet {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn center(&self, j: usize) -> [f64; 3] {
        let s = &self.raw_stats[j];
        [s[5], s[6], s[7]]
    }

    pub fn centers(&self) -> Vec<[f64; 3]> {
        (0..self.len()).map(|j| self.center(j)).collect()
    }

    /// Subset in the given order.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            coords: idx.iter().map(|&i| self.coords[i]).collect(),
            raw_stats: idx.iter().map(|&i| self.raw_stats[i]).collect(),
        }
    }
}

pub fn voxelize(points: &[[f64; 4]], spec: &VoxelGridSpec) -> VoxelSet {
    // sum xyz, sum intensity, count
    let mut acc: BTreeMap<[usize; 3], [f64; 5]> = BTreeMap::new();
    for p in points {
        if let Some(c) = spec.locate([p[0], p[1], p[2]]) {
            let e = acc.entry(c).or_insert([0.0; 5]);
            for a in 0..4 {
                e[a] += p[a];
            }
            e[4] += 1.0;
        }
    }
    let mut vs = VoxelSet::default();
    for (c, e) in acc {
        let n = e[4];
        let ctr = spec.center(c);
        vs.coords.push(c);
        vs.raw_stats.push([
            e[0] / n - ctr[0],
            e[1] / n - ctr[1],
            e[2] / n - ctr[2],
            e[3] / n,
            n,
            ctr[0],
            ctr[1],
            ctr[2],
        ]);
    }
    vs
}

/// Fixed normalization of raw statistics to roughly unit scale.
pub fn normalized_stats(vs: &VoxelSet, spec: &VoxelGridSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(vs.len() * RAW_STATS);
    for s in &vs.raw_stats {
        for a in 0..3 {
            out.push(s[a] / spec.size[a]);
        }
        out.push(s[3]);
        out.push((1.0 + s[4]).ln());
        for a in 0..3 {
            out.push(2.0 * (s[5 + a] - spec.min[a]) / (spec.max[a] - spec.min[a]) - 1.0);
        }
    }
    out
}

pub fn init_embed(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize) {
    store.init_linear(rng, "pts.embed.0", RAW_STATS, d);
    store.init_linear(rng, "pts.embed.1", d, d);
}

/// Per-voxel two-layer perceptron on normalized statistics: `[J, d]`.
pub fn embed_voxels(p: &Bound, vs: &VoxelSet, spec: &VoxelGridSpec) -> Result<Var> {
    if vs.is_empty() {
        return Err(AlignError::EmptyBatch("no voxels to embed"));
    }
    let x = p.tape.constant(&[vs.len(), RAW_STATS], normalized_stats(vs, spec))?;
    let h = p.tape.relu(p.linear("pts.embed.0", x)?);
    p.linear("pts.embed.1", h)
}

pub fn init_bev(store: &mut ParamStore, rng: &mut ChaCha8Rng, d: usize, c_bev: usize) {
    store.init_conv(rng, "pts.bev.0", d, c_bev, 3);
    store.init_conv(rng, "pts.bev.1", c_bev, c_bev, 3);
}

/// Dense `[c, X, Y]` map holding, per `(x, y)` column, the elementwise
/// maximum over z of the voxel features. Empty columns are zero.
pub fn scatter_bev(p: &Bound, feats: Var, vs: &VoxelSet, spec: &VoxelGridSpec) -> Result<Var> {
    let t = p.tape;
    let [nx, ny, _] = spec.extents();
    let c = t.shape(feats)[1];
    let mut columns: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (j, co) in vs.coords.iter().enumerate() {
        columns.entry((co[0], co[1])).or_default().push(j);
    }
    let mut idx = vec![None; c * nx * ny];
    {
        let v = t.value_ref(feats);
        for (&(x, y), members) in &columns {
            for ch in 0..c {
                let best = members
                    .iter()
                    .copied()
                    .max_by(|&a, &b| v[a * c + ch].total_cmp(&v[b * c + ch]).then(b.cmp(&a)))
                    .expect("column is non-empty");
                idx[(ch * nx + x) * ny + y] = Some(best * c + ch);
            }
        }
    }
    Ok(t.gather(feats, idx, &[c, nx, ny])?)
}

/// Scatter-max followed by two 3×3 convolutions with relu.
pub fn bev_backbone(p: &Bound, feats: Var, vs: &VoxelSet, spec: &VoxelGridSpec) -> Result<Var> {
    let bev = scatter_bev(p, feats, vs, spec)?;
    bev_convs(p, bev)
}

pub fn bev_convs(p: &Bound, bev: Var) -> Result<Var> {
    let h = p.tape.relu(p.conv("pts.bev.0", bev, 1, 1)?);
    Ok(p.tape.relu(p.conv("pts.bev.1", h, 1, 1)?))
}

/// BEV input map for an empty voxel set.
pub fn empty_bev(p: &Bound, c: usize, spec: &VoxelGridSpec) -> Result<Var> {
    let [nx, ny, _] = spec.extents();
    Ok(p.tape.constant(&[c, nx, ny], vec![0.0; c * nx * ny])?)
}
