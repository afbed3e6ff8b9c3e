//! Deterministic paired LiDAR + camera scenes with ground truth.

use std::fs;
use std::path::Path;

use autoalign_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::{AlignError, Result};
use crate::geometry::{project_box3d, Box2D, Box3D, CameraProjection};

pub const RNG_NAME: &str = "ChaCha8";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub name: String,
    pub prior: f64,
    /// Mean (l, w, h) in meters.
    pub size: [f64; 3],
    /// Relative uniform jitter applied to each extent.
    pub size_jitter: f64,
    /// Probability that a sampled surface return is dropped.
    pub dropout: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub image_width: usize,
    pub image_height: usize,
    /// Focal length in pixels; `None` means half the image width.
    pub focal: Option<f64>,
    pub ground_z: f64,
    pub objects_min: usize,
    pub objects_max: usize,
    pub classes: Vec<ClassSpec>,
    /// Forward placement range for object centers (m).
    pub place_x: [f64; 2],
    /// Maximum lateral offset for object centers (m).
    pub place_y: f64,
    /// LiDAR returns are generated only within this forward/lateral range.
    pub lidar_range: [f64; 2],
    pub point_budget: usize,
    /// Surface returns per square meter at one meter distance.
    pub surface_density: f64,
    pub min_points: usize,
    pub ground_points: usize,
    pub clutter_min: usize,
    pub clutter_max: usize,
    pub placement_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            image_width: 192,
            image_height: 128,
            focal: None,
            ground_z: -1.7,
            objects_min: 1,
            objects_max: 4,
            classes: vec![
                ClassSpec {
                    name: "car".into(),
                    prior: 0.5,
                    size: [3.9, 1.7, 1.5],
                    size_jitter: 0.1,
                    dropout: 0.1,
                    color: [0.85, 0.2, 0.15],
                },
                ClassSpec {
                    name: "pedestrian".into(),
                    prior: 0.5,
                    size: [1.25, 1.25, 1.8],
                    size_jitter: 0.05,
                    dropout: 0.75,
                    color: [0.15, 0.75, 0.85],
                },
            ],
            place_x: [6.0, 28.0],
            place_y: 13.0,
            lidar_range: [32.0, 16.0],
            point_budget: 6000,
            surface_density: 600.0,
            min_points: 4,
            ground_points: 400,
            clutter_min: 0,
            clutter_max: 3,
            placement_attempts: 400,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(AlignError::Config(m.to_string()));
        if self.image_width == 0 || self.image_height == 0 {
            return bad("image extents must be positive");
        }
        if self.classes.is_empty() {
            return bad("at least one class is required");
        }
        let total: f64 = self.classes.iter().map(|c| c.prior).sum();
        if (total - 1.0).abs() > 1e-9 || self.classes.iter().any(|c| c.prior < 0.0) {
            return bad("class priors must be non-negative and sum to 1");
        }
        if self.classes.iter().any(|c| c.size.iter().any(|&s| s <= 0.0) || !(0.0..1.0).contains(&c.dropout)) {
            return bad("class sizes must be positive and dropout in [0, 1)");
        }
        if self.objects_min > self.objects_max || self.clutter_min > self.clutter_max {
            return bad("count ranges must satisfy min <= max");
        }
        if !(self.place_x[0] > 0.0 && self.place_x[0] < self.place_x[1]) || self.place_y <= 0.0 {
            return bad("placement range must be positive and non-empty");
        }
        if self.lidar_range.iter().any(|&r| r <= 0.0) || self.surface_density <= 0.0 {
            return bad("lidar range and density must be positive");
        }
        Ok(())
    }

    pub fn focal_px(&self) -> f64 {
        self.focal.unwrap_or(self.image_width as f64 / 2.0)
    }

    pub fn projection(&self) -> CameraProjection {
        CameraProjection::forward_pinhole(
            self.focal_px(),
            self.image_width as f64 / 2.0,
            self.image_height as f64 / 2.0,
        )
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// One paired sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// (x, y, z, intensity), exactly representable as `f32`.
    pub points: Vec<[f64; 4]>,
    /// `[3, H, W]`, values on the 8-bit lattice `k / 255`.
    pub image: Tensor,
    pub gt_boxes3d: Vec<Box3D>,
    pub gt_boxes2d: Vec<Box2D>,
    pub projection: CameraProjection,
    pub seed: u64,
    pub ground_z: f64,
    pub config_hash: String,
}

impl Scene {
    pub fn image_size(&self) -> (usize, usize) {
        let s = self.image.shape();
        (s[2], s[1])
    }
}

struct Placed {
    bx: Box3D,
    /// Unclipped 2D hull.
    hull: Box2D,
    labeled: bool,
}

fn quantize_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn quantize_u8(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn sample_class(rng: &mut ChaCha8Rng, classes: &[ClassSpec]) -> usize {
    let r: f64 = rng.random();
    let mut acc = 0.0;
    for (i, c) in classes.iter().enumerate() {
        acc += c.prior;
        if r < acc {
            return i;
        }
    }
    classes.len() - 1
}

/// Projected hull if every corner is in front of the camera and inside the frame.
fn fully_visible(proj: &CameraProjection, b: &Box3D, cfg: &SceneConfig) -> Option<Box2D> {
    let (w, h) = (cfg.image_width as f64, cfg.image_height as f64);
    let mut hull = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
    for c in b.corners() {
        let (u, v, _) = proj.project_point(c).ok()?;
        hull = [hull[0].min(u), hull[1].min(v), hull[2].max(u), hull[3].max(v)];
    }
    let inside = hull[0] >= 0.0 && hull[1] >= 0.0 && hull[2] <= w && hull[3] <= h;
    if !inside {
        return None;
    }
    Box2D::new(hull[0], hull[1], hull[2], hull[3], b.class_id).ok()
}

fn footprints_clear(a: &Box3D, b: &Box3D, margin: f64) -> bool {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    ahi[0] + margin <= blo[0] || bhi[0] + margin <= alo[0] || ahi[1] + margin <= blo[1] || bhi[1] + margin <= alo[1]
}

/// Surface returns on the faces of `b` that face the sensor.
fn sample_surface(rng: &mut ChaCha8Rng, b: &Box3D, density: f64, dropout: f64, min_points: usize, out: &mut Vec<[f64; 4]>) {
    let (lo, hi) = (b.min(), b.max());
    // (axis, side): outward normal along ±axis
    let mut faces = Vec::new();
    for axis in 0..3 {
        for (side, coord) in [(-1.0, lo[axis]), (1.0, hi[axis])] {
            let mut center = b.center;
            center[axis] = coord;
            // a face is visible iff the sensor lies on its outward side
            if side * (0.0 - coord) > 0.0 {
                let area: f64 = (0..3).filter(|&a| a != axis).map(|a| b.size[a]).product();
                let dist2 = center.iter().map(|c| c * c).sum::<f64>().max(1.0);
                faces.push((axis, coord, area, dist2));
            }
        }
    }
    let draw = |rng: &mut ChaCha8Rng, (axis, coord, _, _): (usize, f64, f64, f64)| -> [f64; 4] {
        let mut p = [0.0; 4];
        for a in 0..3 {
            p[a] = if a == axis { coord } else { rng.random_range(lo[a]..hi[a]) };
        }
        p[3] = rng.random_range(0.0..1.0);
        p.map(quantize_f32)
    };
    let mut kept = 0;
    for &face in &faces {
        let n = (density * face.2 / face.3).round() as usize;
        for _ in 0..n {
            let p = draw(rng, face);
            if rng.random::<f64>() >= dropout {
                out.push(p);
                kept += 1;
            }
        }
    }
    let total_area: f64 = faces.iter().map(|f| f.2).sum();
    while kept < min_points && !faces.is_empty() {
        let mut pick = rng.random_range(0.0..total_area);
        let mut chosen = faces[faces.len() - 1];
        for &f in &faces {
            if pick < f.2 {
                chosen = f;
                break;
            }
            pick -= f.2;
        }
        out.push(draw(rng, chosen));
        kept += 1;
    }
}

fn illumination(u: usize, width: usize) -> f64 {
    0.8 + 0.4 * (u as f64 + 0.5) / width as f64
}

fn render(rng: &mut ChaCha8Rng, cfg: &SceneConfig, placed: &[Placed]) -> Tensor {
    let (w, h) = (cfg.image_width, cfg.image_height);
    let horizon = h as f64 / 2.0;
    let mut img = vec![0.0; 3 * h * w];
    for v in 0..h {
        let row = (v as f64 + 0.5) / h as f64;
        let base = if (v as f64) < horizon {
            [0.55 + 0.2 * row, 0.65 + 0.2 * row, 0.8]
        } else {
            let g = 0.35 + 0.2 * row;
            [g, g, g * 0.95]
        };
        for u in 0..w {
            let light = illumination(u, w);
            let tex: f64 = rng.random_range(-0.04..0.04);
            for c in 0..3 {
                img[(c * h + v) * w + u] = base[c] * light * 0.8 + tex;
            }
        }
    }
    let mut order: Vec<usize> = (0..placed.len()).collect();
    // painter's algorithm: far to near
    order.sort_by(|&a, &b| placed[b].bx.center[0].total_cmp(&placed[a].bx.center[0]));
    for i in order {
        let p = &placed[i];
        let color = if p.labeled {
            let jitter: f64 = rng.random_range(0.85..1.15);
            cfg.classes[p.bx.class_id].color.map(|c| c * jitter)
        } else {
            let g: f64 = rng.random_range(0.25..0.35);
            [g, g, g]
        };
        let u0 = p.hull.u_min.floor().max(0.0) as usize;
        let v0 = p.hull.v_min.floor().max(0.0) as usize;
        let u1 = (p.hull.u_max.ceil() as usize).min(w);
        let v1 = (p.hull.v_max.ceil() as usize).min(h);
        for v in v0..v1 {
            for u in u0..u1 {
                let (cu, cv) = (u as f64 + 0.5, v as f64 + 0.5);
                if !p.hull.contains(cu, cv) {
                    continue;
                }
                let light = illumination(u, w);
                let tex: f64 = rng.random_range(-0.03..0.03);
                for c in 0..3 {
                    img[(c * h + v) * w + u] = color[c] * light + tex;
                }
            }
        }
    }
    let data = img.into_iter().map(quantize_u8).collect();
    Tensor::new(&[3, h, w], data).expect("image extents are positive")
}

/// Builds the scene for `(seed, cfg)`; a pure function of both.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proj = cfg.projection();
    let n_objects = rng.random_range(cfg.objects_min..=cfg.objects_max);
    let n_clutter = rng.random_range(cfg.clutter_min..=cfg.clutter_max);
    let mut placed: Vec<Placed> = Vec::new();
    let mut attempts = 0;
    let total = n_objects + n_clutter;
    while placed.len() < total {
        attempts += 1;
        if attempts > cfg.placement_attempts {
            return Err(AlignError::Placement {
                requested: total,
                attempts: cfg.placement_attempts,
            });
        }
        let labeled = placed.len() < n_objects;
        let (class_id, size) = if labeled {
            let c = sample_class(&mut rng, &cfg.classes);
            let spec = &cfg.classes[c];
            let j = spec.size_jitter;
            let size = spec.size.map(|s| s * rng.random_range(1.0 - j..=1.0 + j));
            (c, size)
        } else {
            (usize::MAX, [0.35, 0.35, rng.random_range(0.9..2.2)])
        };
        let x = rng.random_range(cfg.place_x[0]..cfg.place_x[1]);
        let y = rng.random_range(-cfg.place_y..cfg.place_y);
        let center = [x, y, cfg.ground_z + size[2] / 2.0].map(quantize_f32);
        let bx = Box3D::axis_aligned(center, size.map(quantize_f32), class_id)?;
        let Some(hull) = fully_visible(&proj, &bx, cfg) else { continue };
        if placed.iter().any(|p| !footprints_clear(&p.bx, &bx, 0.5)) {
            continue;
        }
        placed.push(Placed { bx, hull, labeled });
    }

    let mut points = Vec::new();
    for p in &placed {
        let (dropout, min_points) = if p.labeled {
            (cfg.classes[p.bx.class_id].dropout, cfg.min_points)
        } else {
            (0.5, 0)
        };
        sample_surface(&mut rng, &p.bx, cfg.surface_density, dropout, min_points, &mut points);
    }
    let noise = Normal::new(0.0, 0.03).expect("valid std");
    let r_min: f64 = 2.0;
    let r_max = cfg.lidar_range[0];
    let mut ground = Vec::with_capacity(cfg.ground_points);
    while ground.len() < cfg.ground_points {
        // log-uniform radius: density falls off with squared distance
        let r = r_min * (r_max / r_min).powf(rng.random::<f64>());
        let theta = rng.random_range(-std::f64::consts::FRAC_PI_2..std::f64::consts::FRAC_PI_2);
        let (x, y) = (r * theta.cos(), r * theta.sin());
        let z = cfg.ground_z + noise.sample(&mut rng);
        let i: f64 = rng.random_range(0.0..1.0);
        if x <= r_max && y.abs() <= cfg.lidar_range[1] {
            ground.push([x, y, z, i].map(quantize_f32));
        }
    }
    let room = cfg.point_budget.saturating_sub(points.len());
    points.extend(ground.into_iter().take(room));

    let image = render(&mut rng, cfg, &placed);
    let mut gt_boxes3d = Vec::new();
    let mut gt_boxes2d = Vec::new();
    for p in placed.iter().filter(|p| p.labeled) {
        gt_boxes2d.push(project_box3d(&proj, &p.bx, (cfg.image_width, cfg.image_height))?);
        gt_boxes3d.push(p.bx);
    }
    Ok(Scene {
        points,
        image,
        gt_boxes3d,
        gt_boxes2d,
        projection: proj,
        seed,
        ground_z: cfg.ground_z,
        config_hash: cfg.hash(),
    })
}

fn parse_err(file: &str, field: &str, msg: impl Into<String>) -> AlignError {
    AlignError::Parse {
        file: file.into(),
        field: field.into(),
        msg: msg.into(),
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| AlignError::io(path, e))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| AlignError::io(path, e))
}

/// Writes `scene.json`, `points.f32` and `image.ppm` into `dir`.
pub fn save_scene(scene: &Scene, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| AlignError::io(dir, e))?;
    let (w, h) = scene.image_size();
    let objects: Vec<Value> = scene
        .gt_boxes3d
        .iter()
        .zip(&scene.gt_boxes2d)
        .map(|(b3, b2)| {
            json!({
                "class_id": b3.class_id,
                "center": b3.center,
                "size": b3.size,
                "yaw": b3.yaw,
                "box2d": [b2.u_min, b2.v_min, b2.u_max, b2.v_max],
            })
        })
        .collect();
    let meta = json!({
        "seed": scene.seed,
        "rng": RNG_NAME,
        "config_hash": scene.config_hash,
        "image_width": w,
        "image_height": h,
        "num_points": scene.points.len(),
        "ground_z": scene.ground_z,
        "projection": scene.projection.to_row_major(),
        "objects": objects,
    });
    let text = serde_json::to_string_pretty(&meta)?;
    write_file(&dir.join("scene.json"), text.as_bytes())?;

    let mut pts = Vec::with_capacity(scene.points.len() * 16);
    for p in &scene.points {
        for v in p {
            pts.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    write_file(&dir.join("points.f32"), &pts)?;

    let mut ppm = format!("P6\n{w} {h}\n255\n").into_bytes();
    let img = scene.image.data();
    for v in 0..h {
        for u in 0..w {
            for c in 0..3 {
                ppm.push((img[(c * h + v) * w + u] * 255.0).round() as u8);
            }
        }
    }
    write_file(&dir.join("image.ppm"), &ppm)
}

fn field<'a>(v: &'a Value, name: &str, file: &str) -> Result<&'a Value> {
    v.get(name).ok_or_else(|| parse_err(file, name, "missing"))
}

fn as_f64(v: &Value, name: &str, file: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| parse_err(file, name, "expected a number"))
}

fn as_usize(v: &Value, name: &str, file: &str) -> Result<usize> {
    v.as_u64().map(|x| x as usize).ok_or_else(|| parse_err(file, name, "expected a non-negative integer"))
}

fn as_array<const N: usize>(v: &Value, name: &str, file: &str) -> Result<[f64; N]> {
    let arr = v.as_array().ok_or_else(|| parse_err(file, name, "expected an array"))?;
    if arr.len() != N {
        return Err(parse_err(file, name, format!("expected {N} numbers, got {}", arr.len())));
    }
    let mut out = [0.0; N];
    for (o, x) in out.iter_mut().zip(arr) {
        *o = as_f64(x, name, file)?;
    }
    Ok(out)
}

fn parse_ppm(bytes: &[u8], w: usize, h: usize) -> Result<Tensor> {
    const FILE: &str = "image.ppm";
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(parse_err(FILE, "header", "truncated header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).to_string());
    }
    pos += 1;
    if tokens[0] != "P6" {
        return Err(parse_err(FILE, "magic", format!("expected P6, got {}", tokens[0])));
    }
    let dims: Vec<usize> = tokens[1..3].iter().map(|t| t.parse().unwrap_or(0)).collect();
    if dims != [w, h] {
        return Err(parse_err(FILE, "size", format!("expected {w}x{h}, got {}x{}", tokens[1], tokens[2])));
    }
    if tokens[3] != "255" {
        return Err(parse_err(FILE, "maxval", "only 8-bit images are supported"));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 3 * w * h {
        return Err(parse_err(FILE, "pixels", format!("expected {} bytes, got {}", 3 * w * h, payload.len())));
    }
    let mut data = vec![0.0; 3 * w * h];
    for v in 0..h {
        for u in 0..w {
            for c in 0..3 {
                data[(c * h + v) * w + u] = payload[(v * w + u) * 3 + c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data).map_err(|e| parse_err(FILE, "pixels", e.to_string()))
}

pub fn load_scene(dir: &Path) -> Result<Scene> {
    const META: &str = "scene.json";
    let text = read_file(&dir.join(META))?;
    let meta: Value = serde_json::from_slice(&text).map_err(|e| parse_err(META, "<root>", e.to_string()))?;
    let seed = field(&meta, "seed", META)?
        .as_u64()
        .ok_or_else(|| parse_err(META, "seed", "expected u64"))?;
    let config_hash = field(&meta, "config_hash", META)?
        .as_str()
        .ok_or_else(|| parse_err(META, "config_hash", "expected a string"))?
        .to_string();
    let w = as_usize(field(&meta, "image_width", META)?, "image_width", META)?;
    let h = as_usize(field(&meta, "image_height", META)?, "image_height", META)?;
    let num_points = as_usize(field(&meta, "num_points", META)?, "num_points", META)?;
    let ground_z = as_f64(field(&meta, "ground_z", META)?, "ground_z", META)?;
    let projection = CameraProjection::from_row_major(&as_array::<12>(field(&meta, "projection", META)?, "projection", META)?)
        .map_err(|e| parse_err(META, "projection", e.to_string()))?;
    let objects = field(&meta, "objects", META)?
        .as_array()
        .ok_or_else(|| parse_err(META, "objects", "expected an array"))?;
    let mut gt_boxes3d = Vec::with_capacity(objects.len());
    let mut gt_boxes2d = Vec::with_capacity(objects.len());
    for o in objects {
        let class_id = as_usize(field(o, "class_id", META)?, "class_id", META)?;
        let center = as_array::<3>(field(o, "center", META)?, "center", META)?;
        let size = as_array::<3>(field(o, "size", META)?, "size", META)?;
        let yaw = as_f64(field(o, "yaw", META)?, "yaw", META)?;
        let b2 = as_array::<4>(field(o, "box2d", META)?, "box2d", META)?;
        gt_boxes3d.push(Box3D::new(center, size, yaw, class_id).map_err(|e| parse_err(META, "size", e.to_string()))?);
        gt_boxes2d.push(Box2D::new(b2[0], b2[1], b2[2], b2[3], class_id).map_err(|e| parse_err(META, "box2d", e.to_string()))?);
    }

    let raw = read_file(&dir.join("points.f32"))?;
    if raw.len() % 16 != 0 || raw.len() / 16 != num_points {
        return Err(parse_err(
            "points.f32",
            "points",
            format!("expected {num_points} points ({} bytes), got {} bytes", num_points * 16, raw.len()),
        ));
    }
    let points = raw
        .chunks_exact(16)
        .map(|c| std::array::from_fn(|i| f32::from_le_bytes(c[i * 4..i * 4 + 4].try_into().unwrap()) as f64))
        .collect();
    let image = parse_ppm(&read_file(&dir.join("image.ppm"))?, w, h)?;
    Ok(Scene {
        points,
        image,
        gt_boxes3d,
        gt_boxes2d,
        projection,
        seed,
        ground_z,
        config_hash,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub rng: String,
    pub config_hash: String,
    pub config: SceneConfig,
    pub train: Vec<String>,
    pub eval: Vec<String>,
}

/// Per-scene seed derived from the dataset seed.
pub fn scene_seed(dataset_seed: u64, index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = dataset_seed.wrapping_add((index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Writes `n_scenes` scene directories plus `manifest.json`; the first
/// `n_train` scenes form the training split.
pub fn generate_dataset(out: &Path, n_scenes: usize, n_train: usize, seed: u64, cfg: &SceneConfig) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| AlignError::io(out, e))?;
    let mut names = Vec::with_capacity(n_scenes);
    for i in 0..n_scenes {
        let name = format!("scene_{i:05}");
        let scene = generate_scene(scene_seed(seed, i), cfg)?;
        save_scene(&scene, &out.join(&name))?;
        names.push(name);
    }
    let split = n_train.min(n_scenes);
    let manifest = Manifest {
        seed,
        rng: RNG_NAME.into(),
        config_hash: cfg.hash(),
        config: cfg.clone(),
        eval: names.split_off(split),
        train: names,
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    write_file(&out.join("manifest.json"), text.as_bytes())?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = read_file(&path)?;
    serde_json::from_slice(&text).map_err(|e| parse_err("manifest.json", "<root>", e.to_string()))
}

/// Loads every scene of the named split, in manifest order.
pub fn load_split(dir: &Path, names: &[String]) -> Result<Vec<Scene>> {
    names.iter().map(|n| load_scene(&dir.join(n))).collect()
}

/// Fraction of the projected box's area overlapping another box; used to
/// report occlusion between ground-truth objects.
pub fn box_overlap_ratio(a: &Box2D, b: &Box2D) -> f64 {
    if a.area() <= 0.0 {
        0.0
    } else {
        a.overlap(b) / a.area()
    }
}
