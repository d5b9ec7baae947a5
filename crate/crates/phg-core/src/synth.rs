//! Procedural multi-modal scene generator with exact ground truth.
//!
//! A scene is a flat textured "world" (heightfield + class regions) viewed
//! through a window that translates by an integer pixel step per frame, so
//! optical flow is known exactly. Ground truth depth is a smooth transform
//! of the heightfield and ground truth normals are the analytic heightfield
//! gradient normals, which makes the SVD plane-fit recoverable up to window
//! curvature. Expert simulators produce corrupted versions of the ground
//! truth (blob label flips, smooth depth noise + bias) so that derivation
//! and ensembling have something realistic to clean up.

use std::collections::BTreeSet;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{PhgError, Result};
use crate::modality::{ModalityRole, ModalitySet, ModalitySpec};
use crate::phgt::{self, PhgtData};
use crate::pipeline::{ClassMapping, DerivationKind, DerivationNode};
use crate::tensor::{ClassMap, Tensor};

// --------------------------------------------------------------------------
// taxonomies

/// Fine-grained 16-class source taxonomy the semantic experts vote in.
pub const SOURCE_CLASS_COUNT: usize = 16;

pub const SOURCE_CLASS_NAMES: [&str; 16] = [
    "meadow",
    "cropfield",
    "dirt",
    "conifer",
    "broadleaf",
    "shrub",
    "house",
    "apartment",
    "asphalt",
    "gravel",
    "vehicle",
    "fence",
    "lake",
    "river",
    "sky",
    "ridge",
];

/// Collapse table from the 16 source classes onto the 8 evaluation classes
/// (land, forest, residential, road, little-objects, water, sky, hill).
pub const SOURCE_TO_TARGET: [u8; 16] = [0, 0, 0, 1, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 7];

/// The source->target collapse as a reusable mapping.
pub fn source_to_target_mapping() -> ClassMapping {
    ClassMapping::table("synth16", SOURCE_TO_TARGET.to_vec(), 8)
        .expect("static table is well-formed")
}

/// Base albedo per source class; shading and sensor noise are applied on top.
/// Some pairs are deliberately close (shrub/meadow, ridge/gravel) so that
/// RGB alone stays ambiguous.
pub const SOURCE_PALETTE: [[f32; 3]; 16] = [
    [0.35, 0.62, 0.25], // meadow
    [0.62, 0.58, 0.28], // cropfield
    [0.52, 0.42, 0.30], // dirt
    [0.10, 0.35, 0.18], // conifer
    [0.18, 0.48, 0.20], // broadleaf
    [0.30, 0.55, 0.28], // shrub
    [0.70, 0.45, 0.35], // house
    [0.60, 0.60, 0.62], // apartment
    [0.25, 0.25, 0.28], // asphalt
    [0.55, 0.52, 0.48], // gravel
    [0.75, 0.20, 0.20], // vehicle
    [0.45, 0.35, 0.25], // fence
    [0.15, 0.30, 0.65], // lake
    [0.22, 0.40, 0.70], // river
    [0.65, 0.78, 0.92], // sky
    [0.58, 0.55, 0.52], // ridge
];

/// Ground classes assigned to voronoi regions (water/sky/hill come from the
/// heightfield bands instead, little objects are scattered separately).
const REGION_CLASSES: [u8; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];

// --------------------------------------------------------------------------
// scene spec

/// Everything needed to regenerate a scene byte-for-byte.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSceneSpec {
    pub seed: u64,
    /// Number of frames, at least 3 (temporal metrics need interior frames).
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// Octaves of value noise in the heightfield.
    pub octaves: usize,
    /// Voronoi region count for the ground-class layout.
    pub regions: usize,
    /// Small rectangles of vehicle/fence scattered over the ground.
    pub objects: usize,
    /// Integer camera translation per frame step, in pixels.
    pub step_x: i32,
    pub step_y: i32,
    /// Uniform per-pixel sensor noise amplitude on RGB.
    pub rgb_noise: f32,
    /// Number of blob corruptions per semantic expert per frame.
    pub expert_flip_blobs: usize,
    /// Maximum blob radius for expert corruptions.
    pub expert_blob_radius: usize,
    /// Amplitude of the smooth noise field added by the depth expert.
    pub depth_noise: f32,
    /// Systematic offset of the depth expert.
    pub depth_bias: f32,
}

impl SyntheticSceneSpec {
    pub fn new(seed: u64) -> SyntheticSceneSpec {
        SyntheticSceneSpec {
            seed,
            frames: 5,
            height: 64,
            width: 96,
            octaves: 4,
            regions: 24,
            objects: 12,
            step_x: 3,
            step_y: 2,
            rgb_noise: 0.10,
            expert_flip_blobs: 6,
            expert_blob_radius: 5,
            depth_noise: 0.05,
            depth_bias: 0.03,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames < 3 {
            return Err(PhgError::Config(format!(
                "scene needs at least 3 frames, got {}",
                self.frames
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(PhgError::Config(format!(
                "scene must be at least 16x16, got {}x{}",
                self.height, self.width
            )));
        }
        if self.octaves == 0 || self.regions == 0 {
            return Err(PhgError::Config("octaves and regions must be positive".into()));
        }
        if self.step_x.unsigned_abs() as usize >= self.width
            || self.step_y.unsigned_abs() as usize >= self.height
        {
            return Err(PhgError::Config(format!(
                "camera step ({}, {}) larger than the frame",
                self.step_x, self.step_y
            )));
        }
        if !(self.rgb_noise.is_finite() && self.depth_noise.is_finite() && self.depth_bias.is_finite())
        {
            return Err(PhgError::Config("noise parameters must be finite".into()));
        }
        if self.rgb_noise < 0.0 || self.depth_noise < 0.0 {
            return Err(PhgError::Config("noise amplitudes must be non-negative".into()));
        }
        Ok(())
    }
}

// --------------------------------------------------------------------------
// value noise

/// One octave of value noise: random lattice values interpolated with a
/// smoothstep, so the field is C1 and its gradient is well-behaved.
fn value_noise_octave(rng: &mut ChaCha8Rng, h: usize, w: usize, cell: usize) -> Vec<f64> {
    let cell = cell.max(2);
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let lattice: Vec<f64> = (0..gh * gw).map(|_| rng.gen::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let fy = y as f64 / cell as f64;
        let gy = fy.floor() as usize;
        let ty = fy - gy as f64;
        let sy = ty * ty * (3.0 - 2.0 * ty);
        for x in 0..w {
            let fx = x as f64 / cell as f64;
            let gx = fx.floor() as usize;
            let tx = fx - gx as f64;
            let sx = tx * tx * (3.0 - 2.0 * tx);
            let v00 = lattice[gy * gw + gx];
            let v01 = lattice[gy * gw + gx + 1];
            let v10 = lattice[(gy + 1) * gw + gx];
            let v11 = lattice[(gy + 1) * gw + gx + 1];
            let top = v00 + (v01 - v00) * sx;
            let bot = v10 + (v11 - v10) * sx;
            out[y * w + x] = top + (bot - top) * sy;
        }
    }
    out
}

/// Fractal sum of value-noise octaves, min-max normalized to [0, 1].
/// The finest octave is kept at 6 px so the surface stays smooth enough for
/// window-based plane fits to track the analytic gradient.
fn fractal_noise(rng: &mut ChaCha8Rng, h: usize, w: usize, octaves: usize) -> Vec<f64> {
    let base_cell = (h.max(w) / 5).max(8);
    let mut field = vec![0.0; h * w];
    let mut amp = 1.0;
    for o in 0..octaves {
        let cell = (base_cell >> o).max(6);
        let octave = value_noise_octave(rng, h, w, cell);
        for (f, v) in field.iter_mut().zip(octave.iter()) {
            *f += amp * v;
        }
        amp *= 0.5;
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    for f in field.iter_mut() {
        *f = (*f - lo) / span;
    }
    field
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

// rng stream ids, one per independent random decision in the generator
const STREAM_TERRAIN: u64 = 1;
const STREAM_MOISTURE: u64 = 2;
const STREAM_REGIONS: u64 = 3;
const STREAM_OBJECTS: u64 = 4;
const STREAM_RGB_BASE: u64 = 100; // + frame index
const STREAM_SEM_EXPERT_BASE: u64 = 1000; // + expert * 100 + frame index
const STREAM_DEPTH_EXPERT: u64 = 2000;

// --------------------------------------------------------------------------
// world construction

/// The generated world; frames are integer-offset crops of these arrays.
struct World {
    h: usize,
    w: usize,
    /// Per-frame window origin (x, y) into the world arrays.
    origins: Vec<(usize, usize)>,
    height_field: Vec<f64>,
    source: Vec<u8>,
    depth: Vec<f64>,
    /// Encoded normals, 3 channels world-sized, from the analytic gradient.
    normals: [Vec<f32>; 3],
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let idx = ((sorted.len() - 1) as f64 * q).round() as usize;
    sorted[idx]
}

fn build_world(spec: &SyntheticSceneSpec) -> World {
    let t = spec.frames;
    let ext_x = spec.step_x.unsigned_abs() as usize * (t - 1);
    let ext_y = spec.step_y.unsigned_abs() as usize * (t - 1);
    let ww = spec.width + ext_x + 2;
    // reserve room for the sky band on top of the camera extent
    let sky_rows = (spec.height / 5).max(3) + if spec.step_y > 0 { ext_y } else { 0 };
    let wh = spec.height + ext_y + 2 + sky_rows - sky_rows.min(spec.height / 5);
    let wh = wh.max(spec.height + ext_y + 2);
    let base_x = 1 + if spec.step_x < 0 { ext_x } else { 0 };
    let base_y = 1 + if spec.step_y < 0 { ext_y } else { 0 };
    let origins: Vec<(usize, usize)> = (0..t)
        .map(|i| {
            let ox = base_x as i64 + spec.step_x as i64 * i as i64;
            let oy = base_y as i64 + spec.step_y as i64 * i as i64;
            (ox as usize, oy as usize)
        })
        .collect();

    let mut terrain_rng = stream_rng(spec.seed, STREAM_TERRAIN);
    let height_field = fractal_noise(&mut terrain_rng, wh, ww, spec.octaves);
    let mut moisture_rng = stream_rng(spec.seed, STREAM_MOISTURE);
    let moisture = fractal_noise(&mut moisture_rng, wh, ww, spec.octaves.min(3));

    // voronoi ground regions, classes cycled through a shuffled deck
    let mut region_rng = stream_rng(spec.seed, STREAM_REGIONS);
    let sites: Vec<(f64, f64)> = (0..spec.regions)
        .map(|_| (region_rng.gen::<f64>() * ww as f64, region_rng.gen::<f64>() * wh as f64))
        .collect();
    let region_class: Vec<u8> = (0..spec.regions)
        .map(|i| {
            let shift = region_rng.gen_range(0..REGION_CLASSES.len());
            let _ = shift; // keep the stream moving even though the pick below is cyclic
            REGION_CLASSES[(i + shift) % REGION_CLASSES.len()]
        })
        .collect();

    // water/hill levels as quantiles of the ground part of the heightfield
    let mut ground_heights: Vec<f64> = (sky_rows..wh)
        .flat_map(|y| (0..ww).map(move |x| (y, x)))
        .map(|(y, x)| height_field[y * ww + x])
        .collect();
    ground_heights.sort_by(f64::total_cmp);
    let water_level = quantile(&ground_heights, 0.18);
    let hill_level = quantile(&ground_heights, 0.90);

    let mut source = vec![0u8; wh * ww];
    for y in 0..wh {
        for x in 0..ww {
            let i = y * ww + x;
            source[i] = if y < sky_rows {
                14 // sky
            } else {
                let h = height_field[i];
                if h <= water_level {
                    if moisture[i] > 0.5 { 13 } else { 12 } // river / lake
                } else if h >= hill_level {
                    15 // ridge
                } else {
                    let mut best = 0usize;
                    let mut best_d = f64::INFINITY;
                    for (s, &(sx, sy)) in sites.iter().enumerate() {
                        let d = (sx - x as f64).powi(2) + (sy - y as f64).powi(2);
                        if d < best_d {
                            best_d = d;
                            best = s;
                        }
                    }
                    region_class[best]
                }
            };
        }
    }

    // scatter little objects (vehicles and fences) on the ground
    let mut object_rng = stream_rng(spec.seed, STREAM_OBJECTS);
    for i in 0..spec.objects {
        let oh = object_rng.gen_range(2..4usize);
        let ow = object_rng.gen_range(2..6usize);
        let oy = object_rng.gen_range(sky_rows..wh.saturating_sub(oh).max(sky_rows + 1));
        let ox = object_rng.gen_range(0..ww.saturating_sub(ow).max(1));
        let class = if i % 2 == 0 { 10 } else { 11 }; // vehicle / fence
        for y in oy..(oy + oh).min(wh) {
            for x in ox..(ox + ow).min(ww) {
                if source[y * ww + x] != 14 {
                    source[y * ww + x] = class;
                }
            }
        }
    }

    // guarantee every evaluation class shows up somewhere in the visible
    // union; stamp a small patch of a representative source class if not
    let mut visible = vec![false; 8];
    for &(ox, oy) in &origins {
        for y in oy..oy + spec.height {
            for x in ox..ox + spec.width {
                visible[SOURCE_TO_TARGET[source[y * ww + x] as usize] as usize] = true;
            }
        }
    }
    const REPRESENTATIVE: [u8; 8] = [0, 3, 6, 8, 10, 12, 14, 15];
    let (f0x, f0y) = origins[0];
    let stamp_y = f0y + spec.height / 2;
    for (target, seen) in visible.iter().enumerate() {
        if !seen {
            let sx = f0x + 3 + 5 * target;
            for y in stamp_y..(stamp_y + 3).min(wh) {
                for x in sx..(sx + 3).min(ww) {
                    source[y * ww + x] = REPRESENTATIVE[target];
                }
            }
        }
    }

    // depth: smooth transform of the heightfield (high ground is close to
    // the aerial camera); sky sits past the landing-depth cutoff
    let mut depth = vec![0.0f64; wh * ww];
    for y in 0..wh {
        for x in 0..ww {
            let i = y * ww + x;
            depth[i] = if y < sky_rows { 0.97 } else { 0.08 + 0.84 * (1.0 - height_field[i]) };
        }
    }

    // analytic normals from the depth gradient, z scaled like the SVD
    // plane fit (max of frame height/width); encoded as (n + 1) / 2
    let zs = spec.height.max(spec.width) as f64;
    let mut normals = [vec![0.0f32; wh * ww], vec![0.0f32; wh * ww], vec![0.0f32; wh * ww]];
    for y in 0..wh {
        for x in 0..ww {
            let i = y * ww + x;
            let (nx, ny, nz) = if y < sky_rows {
                (0.0, 0.0, 1.0)
            } else {
                let ddx = if x == 0 {
                    depth[i + 1] - depth[i]
                } else if x == ww - 1 {
                    depth[i] - depth[i - 1]
                } else {
                    (depth[i + 1] - depth[i - 1]) / 2.0
                };
                let ddy = if y == 0 {
                    depth[i + ww] - depth[i]
                } else if y == wh - 1 {
                    depth[i] - depth[i - ww]
                } else {
                    (depth[i + ww] - depth[i - ww]) / 2.0
                };
                let (gx, gy) = (ddx * zs, ddy * zs);
                let norm = (gx * gx + gy * gy + 1.0).sqrt();
                (-gx / norm, -gy / norm, 1.0 / norm)
            };
            normals[0][i] = ((nx + 1.0) / 2.0) as f32;
            normals[1][i] = ((ny + 1.0) / 2.0) as f32;
            normals[2][i] = ((nz + 1.0) / 2.0) as f32;
        }
    }

    World { h: wh, w: ww, origins, height_field, source, depth, normals }
}

impl World {
    fn crop_f64(&self, data: &[f64], frame: usize, fh: usize, fw: usize) -> Vec<f32> {
        let (ox, oy) = self.origins[frame];
        let mut out = Vec::with_capacity(fh * fw);
        for y in oy..oy + fh {
            for x in ox..ox + fw {
                out.push(data[y * self.w + x] as f32);
            }
        }
        out
    }

    fn crop_u8(&self, data: &[u8], frame: usize, fh: usize, fw: usize) -> Vec<u8> {
        let (ox, oy) = self.origins[frame];
        let mut out = Vec::with_capacity(fh * fw);
        for y in oy..oy + fh {
            for x in ox..ox + fw {
                out.push(data[y * self.w + x]);
            }
        }
        out
    }

    fn crop_f32(&self, data: &[f32], frame: usize, fh: usize, fw: usize) -> Vec<f32> {
        let (ox, oy) = self.origins[frame];
        let mut out = Vec::with_capacity(fh * fw);
        for y in oy..oy + fh {
            for x in ox..ox + fw {
                out.push(data[y * self.w + x]);
            }
        }
        out
    }
}

// --------------------------------------------------------------------------
// scene generation

/// Modality directory names written by `gen_scene`.
pub const GROUND_TRUTH_MODALITIES: [&str; 7] =
    ["rgb", "gt-semantic", "gt-source", "gt-depth", "gt-normals", "flow-fwd", "flow-bwd"];

/// Files written by a generation step.
#[derive(Debug, Clone, PartialEq)]
pub struct GenReport {
    pub files_written: usize,
}

fn frame_name(index: usize) -> String {
    format!("{index:06}.phgt")
}

fn write_modality(dir: &Path, modality: &str, frame: usize, data: &PhgtData) -> Result<()> {
    let sub = dir.join(modality);
    std::fs::create_dir_all(&sub).map_err(|e| PhgError::io(&sub, e))?;
    phgt::write_phgt(&sub.join(frame_name(frame)), data)
}

/// Generate a full scene directory with exact ground truth: `rgb`,
/// `gt-semantic` (8 classes), `gt-source` (16 classes), `gt-depth`,
/// `gt-normals`, and exact `flow-fwd`/`flow-bwd` from the camera step.
pub fn gen_scene(dir: &Path, spec: &SyntheticSceneSpec) -> Result<GenReport> {
    spec.validate()?;
    let world = build_world(spec);
    let (fh, fw) = (spec.height, spec.width);
    let mut files = 0usize;

    for t in 0..spec.frames {
        // rgb: palette by source class, shaded by terrain height, plus
        // per-frame sensor noise (the world itself stays fixed)
        let source = world.crop_u8(&world.source, t, fh, fw);
        let heights = world.crop_f64(&world.height_field, t, fh, fw);
        let mut rgb_rng = stream_rng(spec.seed, STREAM_RGB_BASE + t as u64);
        let mut rgb = vec![0.0f32; 3 * fh * fw];
        for i in 0..fh * fw {
            let class = source[i] as usize;
            let shade = if class == 14 { 1.0 } else { 0.72 + 0.55 * (heights[i] - 0.5) };
            for c in 0..3 {
                let noise = (rgb_rng.gen::<f32>() * 2.0 - 1.0) * spec.rgb_noise;
                rgb[c * fh * fw + i] = (SOURCE_PALETTE[class][c] * shade + noise).clamp(0.0, 1.0);
            }
        }
        write_modality(dir, "rgb", t, &PhgtData::F32(Tensor::new(vec![3, fh, fw], rgb)?))?;
        files += 1;

        let target: Vec<u8> = source.iter().map(|&s| SOURCE_TO_TARGET[s as usize]).collect();
        write_modality(dir, "gt-semantic", t, &PhgtData::U8(ClassMap::new(fh, fw, target)?))?;
        write_modality(dir, "gt-source", t, &PhgtData::U8(ClassMap::new(fh, fw, source)?))?;
        files += 2;

        let depth = world.crop_f64(&world.depth, t, fh, fw);
        write_modality(dir, "gt-depth", t, &PhgtData::F32(Tensor::new(vec![fh, fw], depth)?))?;
        files += 1;

        let mut normals = Vec::with_capacity(3 * fh * fw);
        for c in 0..3 {
            normals.extend(world.crop_f32(&world.normals[c], t, fh, fw));
        }
        write_modality(
            dir,
            "gt-normals",
            t,
            &PhgtData::F32(Tensor::new(vec![3, fh, fw], normals)?),
        )?;
        files += 1;

        // exact flow from the camera translation: a world point seen at x in
        // frame t appears at x - step_x in frame t+1
        if t + 1 < spec.frames {
            let mut flow = vec![0.0f32; 2 * fh * fw];
            flow[..fh * fw].fill(-spec.step_x as f32);
            flow[fh * fw..].fill(-spec.step_y as f32);
            write_modality(dir, "flow-fwd", t, &PhgtData::F32(Tensor::new(vec![2, fh, fw], flow)?))?;
            files += 1;
        }
        if t > 0 {
            let mut flow = vec![0.0f32; 2 * fh * fw];
            flow[..fh * fw].fill(spec.step_x as f32);
            flow[fh * fw..].fill(spec.step_y as f32);
            write_modality(dir, "flow-bwd", t, &PhgtData::F32(Tensor::new(vec![2, fh, fw], flow)?))?;
            files += 1;
        }
    }
    Ok(GenReport { files_written: files })
}

// --------------------------------------------------------------------------
// expert simulation

/// Names of the simulated expert modalities.
pub const EXPERT_MODALITIES: [&str; 4] =
    ["sem_expert_a", "sem_expert_b", "sem_expert_c", "depth_expert"];

/// Corrupt a source-taxonomy map with `blobs` disk-shaped label flips.
fn corrupt_map(map: &mut [u8], h: usize, w: usize, blobs: usize, max_radius: usize, rng: &mut ChaCha8Rng) {
    for _ in 0..blobs {
        let cy = rng.gen_range(0..h) as i64;
        let cx = rng.gen_range(0..w) as i64;
        let r = rng.gen_range(2..=max_radius.max(2)) as i64;
        // flip the whole blob to one random wrong class
        let wrong = rng.gen_range(0..SOURCE_CLASS_COUNT as u8);
        for y in (cy - r).max(0)..=(cy + r).min(h as i64 - 1) {
            for x in (cx - r).max(0)..=(cx + r).min(w as i64 - 1) {
                if (y - cy).pow(2) + (x - cx).pow(2) <= r * r {
                    map[y as usize * w + x as usize] = wrong;
                }
            }
        }
    }
}

/// Simulate three blob-corrupted semantic experts over the 16-class source
/// taxonomy and one depth expert with smooth world-anchored noise plus a
/// systematic bias. Reads `gt-source` and `gt-depth`; with all noise
/// parameters at zero the experts reproduce the ground truth exactly.
pub fn simulate_experts(dir: &Path, spec: &SyntheticSceneSpec) -> Result<GenReport> {
    spec.validate()?;
    let mut files = 0usize;

    // the depth expert's error field lives in world coordinates so its
    // mistakes are consistent from frame to frame, like a real monodepth net
    let world = build_world(spec);
    let mut depth_rng = stream_rng(spec.seed, STREAM_DEPTH_EXPERT);
    let noise_field = fractal_noise(&mut depth_rng, world.h, world.w, 3);

    for t in 0..spec.frames {
        let src_path = dir.join("gt-source").join(frame_name(t));
        let gt_source = phgt::read_class_map(&src_path)?;
        let (h, w) = (gt_source.height(), gt_source.width());

        for (e, name) in ["sem_expert_a", "sem_expert_b", "sem_expert_c"].iter().enumerate() {
            let mut rng =
                stream_rng(spec.seed, STREAM_SEM_EXPERT_BASE + e as u64 * 100 + t as u64);
            let mut data = gt_source.data().to_vec();
            corrupt_map(
                &mut data,
                h,
                w,
                spec.expert_flip_blobs,
                spec.expert_blob_radius,
                &mut rng,
            );
            write_modality(dir, name, t, &PhgtData::U8(ClassMap::new(h, w, data)?))?;
            files += 1;
        }

        let gt_depth = phgt::read_tensor(&dir.join("gt-depth").join(frame_name(t)))?;
        let noise = world.crop_f64(&noise_field, t, h, w);
        let expert: Vec<f32> = gt_depth
            .data()
            .iter()
            .zip(noise.iter())
            .map(|(&d, &n)| {
                (d + spec.depth_bias + (n * 2.0 - 1.0) * spec.depth_noise).clamp(0.0, 1.0)
            })
            .collect();
        write_modality(dir, "depth_expert", t, &PhgtData::F32(Tensor::new(vec![h, w], expert)?))?;
        files += 1;
    }
    Ok(GenReport { files_written: files })
}

// --------------------------------------------------------------------------
// standard derivation graph and modality set

/// The derivation graph used throughout: median-filter the semantic experts,
/// collapse to the evaluation taxonomy, binarize task-specific groups, and
/// build the geometric safe-landing stack from the depth expert.
pub fn standard_derivations() -> Vec<DerivationNode> {
    let tax = "synth16";
    let node = |name: &str, kind: DerivationKind| DerivationNode { name: name.into(), kind };
    let binary = |name: &str, classes: Vec<u8>| {
        node(
            name,
            DerivationKind::Binarize {
                source: "sem_median".into(),
                mapping: ClassMapping::binary(tax, SOURCE_CLASS_COUNT, classes)
                    .expect("static class sets are valid"),
            },
        )
    };
    vec![
        node(
            "sem_median",
            DerivationKind::Median {
                sources: vec!["sem_expert_a".into(), "sem_expert_b".into(), "sem_expert_c".into()],
            },
        ),
        node(
            "sem_expert8",
            DerivationKind::ConvertClasses {
                source: "sem_median".into(),
                mapping: source_to_target_mapping(),
            },
        ),
        binary("vegetation", vec![0, 3, 4, 5]),
        binary("sky_and_water", vec![12, 13, 14]),
        binary("containing", vec![0, 1, 2, 8, 9, 12, 13]),
        binary("transportation", vec![8, 9, 10]),
        binary("buildings", vec![6, 7, 11]),
        binary("landable_classes", vec![0, 1, 2, 8, 9]),
        node(
            "buildings_nearby",
            DerivationKind::BuildingsNearby {
                buildings: "buildings".into(),
                depth: "depth_expert".into(),
                threshold: 0.3,
            },
        ),
        node(
            "normals_svd",
            DerivationKind::NormalsSvd { depth: "depth_expert".into(), window: 5 },
        ),
        node(
            "safe_landing_geo",
            DerivationKind::SafeLandingGeo {
                normals: "normals_svd".into(),
                depth: "depth_expert".into(),
                up_channel: 2,
            },
        ),
        node(
            "safe_landing_sem",
            DerivationKind::And { a: "safe_landing_geo".into(), b: "landable_classes".into() },
        ),
    ]
}

/// The modality layout used by the models: RGB input, the derived expert
/// modalities as maskable intermediates, ground truth as outputs. Modality
/// names double as scene subdirectory names.
pub fn standard_modality_set() -> ModalitySet {
    use ModalityRole::{Input, Intermediate, Output};
    ModalitySet::new(vec![
        ModalitySpec::continuous("rgb", Input, 3),
        ModalitySpec::continuous("depth_expert", Intermediate, 1),
        ModalitySpec::categorical("sem_expert8", Intermediate, 8),
        ModalitySpec::continuous("normals_svd", Intermediate, 3),
        ModalitySpec::categorical("vegetation", Intermediate, 2),
        ModalitySpec::categorical("sky_and_water", Intermediate, 2),
        ModalitySpec::categorical("containing", Intermediate, 2),
        ModalitySpec::categorical("transportation", Intermediate, 2),
        ModalitySpec::categorical("buildings", Intermediate, 2),
        ModalitySpec::categorical("buildings_nearby", Intermediate, 2),
        ModalitySpec::categorical("safe_landing_geo", Intermediate, 2),
        ModalitySpec::categorical("safe_landing_sem", Intermediate, 2),
        ModalitySpec::categorical("gt-semantic", Output, 8),
        ModalitySpec::continuous("gt-depth", Output, 1),
        ModalitySpec::continuous("gt-normals", Output, 3),
    ])
    .expect("static modality set is valid")
}

/// Sanity check used by tests and the CLI: collapse `gt-source` and compare
/// with the stored `gt-semantic`; they must agree exactly.
pub fn check_taxonomy_consistency(dir: &Path, frames: usize) -> Result<()> {
    let mapping = source_to_target_mapping();
    for t in 0..frames {
        let source = phgt::read_class_map(&dir.join("gt-source").join(frame_name(t)))?;
        let target = phgt::read_class_map(&dir.join("gt-semantic").join(frame_name(t)))?;
        let collapsed = crate::pipeline::convert_classes(&source, &mapping)?;
        if collapsed.data() != target.data() {
            return Err(PhgError::Data(format!(
                "frame {t}: gt-semantic does not match collapsed gt-source"
            )));
        }
    }
    Ok(())
}

/// Load one frame of every modality in the set into a bundle. Rank-2 float
/// maps on disk (depth and friends) come back as single-channel tensors.
pub fn load_bundle(
    dir: &Path,
    set: &ModalitySet,
    frame: usize,
) -> Result<crate::modality::ModalityBundle> {
    let entries = read_bundle_entries(dir, set, frame, true)?;
    crate::modality::ModalityBundle::new(set, entries)
}

/// Load only the network-facing modalities (inputs + intermediates); output
/// files — the reference data — are neither read nor required to exist.
pub fn load_inference_bundle(
    dir: &Path,
    set: &ModalitySet,
    frame: usize,
) -> Result<crate::modality::ModalityBundle> {
    let entries = read_bundle_entries(dir, set, frame, false)?;
    crate::modality::ModalityBundle::for_inference(set, entries)
}

fn read_bundle_entries(
    dir: &Path,
    set: &ModalitySet,
    frame: usize,
    include_outputs: bool,
) -> Result<std::collections::BTreeMap<String, crate::modality::ModalityData>> {
    use crate::modality::{ModalityData, ModalityRole};
    let mut entries = std::collections::BTreeMap::new();
    for spec in set.specs() {
        if !include_outputs && spec.role == ModalityRole::Output {
            continue;
        }
        let path = dir.join(&spec.name).join(frame_name(frame));
        let value = match phgt::read_phgt(&path)? {
            PhgtData::F32(t) => {
                let t = if t.rank() == 2 {
                    let (h, w) = (t.dims()[0], t.dims()[1]);
                    t.reshape(vec![1, h, w])?
                } else {
                    t
                };
                ModalityData::Continuous(t)
            }
            PhgtData::U8(m) => ModalityData::Categorical(m),
        };
        entries.insert(spec.name.clone(), value);
    }
    Ok(entries)
}

/// Distinct evaluation classes present across a scene's `gt-semantic` maps.
pub fn present_classes(dir: &Path, frames: usize) -> Result<BTreeSet<u8>> {
    let mut seen = BTreeSet::new();
    for t in 0..frames {
        let map = phgt::read_class_map(&dir.join("gt-semantic").join(frame_name(t)))?;
        seen.extend(map.data().iter().copied());
    }
    Ok(seen)
}
