//! Derivation pipeline: a DAG of per-frame modality derivations (class-set
//! binarizations, 8-class conversion, median-of-experts, SVD camera normals,
//! safe-landing and buildings-nearby composites, statistics matching),
//! executed in topological order with content-hash idempotence.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Vector3};
use sha2::{Digest, Sha256};

use crate::error::{PhgError, Result};
use crate::phgt::{self, PhgtData};
use crate::tensor::{ClassMap, Tensor};

// --------------------------------------------------------------------------
// class mappings

/// Maps a source taxonomy onto either a binary map (membership in a class
/// set) or the 8-class target taxonomy (full lookup table).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMapping {
    pub source_taxonomy: String,
    pub source_classes: usize,
    kind: MappingKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum MappingKind {
    /// Sorted, deduplicated source class indices mapping to "true".
    Binary(Vec<u8>),
    /// table[source_class] = target class, over a fixed target class count.
    Table { table: Vec<u8>, target_classes: usize },
}

impl ClassMapping {
    pub fn binary(taxonomy: &str, source_classes: usize, mut set: Vec<u8>) -> Result<ClassMapping> {
        if source_classes == 0 || source_classes > 256 {
            return Err(PhgError::Config(format!(
                "taxonomy '{taxonomy}' with {source_classes} classes"
            )));
        }
        for &c in &set {
            if c as usize >= source_classes {
                return Err(PhgError::Config(format!(
                    "mapping set contains class {c}, taxonomy '{taxonomy}' has {source_classes}"
                )));
            }
        }
        set.sort_unstable();
        set.dedup();
        Ok(ClassMapping {
            source_taxonomy: taxonomy.to_string(),
            source_classes,
            kind: MappingKind::Binary(set),
        })
    }

    pub fn table(taxonomy: &str, table: Vec<u8>, target_classes: usize) -> Result<ClassMapping> {
        if table.is_empty() || table.len() > 256 {
            return Err(PhgError::Config(format!(
                "conversion table for '{taxonomy}' has {} entries",
                table.len()
            )));
        }
        for (src, &tgt) in table.iter().enumerate() {
            if tgt as usize >= target_classes {
                return Err(PhgError::Config(format!(
                    "table sends class {src} to {tgt}, target has {target_classes} classes"
                )));
            }
        }
        Ok(ClassMapping {
            source_taxonomy: taxonomy.to_string(),
            source_classes: table.len(),
            kind: MappingKind::Table { table, target_classes },
        })
    }

    pub fn is_binary(&self) -> bool {
        matches!(self.kind, MappingKind::Binary(_))
    }

    /// For binary mappings: the complement set over the same taxonomy.
    pub fn complement(&self) -> Result<ClassMapping> {
        let MappingKind::Binary(set) = &self.kind else {
            return Err(PhgError::Config("complement of a non-binary mapping".into()));
        };
        let rest: Vec<u8> =
            (0..self.source_classes as u16).map(|c| c as u8).filter(|c| !set.contains(c)).collect();
        ClassMapping::binary(&self.source_taxonomy, self.source_classes, rest)
    }

    /// Target class a source class maps to; binary mappings yield 1 for
    /// members of the set and 0 otherwise.
    pub fn target_of(&self, source: u8) -> Option<u8> {
        if source as usize >= self.source_classes {
            return None;
        }
        Some(match &self.kind {
            MappingKind::Binary(set) => u8::from(set.binary_search(&source).is_ok()),
            MappingKind::Table { table, .. } => table[source as usize],
        })
    }

    /// Class count of the target taxonomy (2 for binary mappings).
    pub fn target_classes(&self) -> usize {
        match &self.kind {
            MappingKind::Binary(_) => 2,
            MappingKind::Table { target_classes, .. } => *target_classes,
        }
    }

    /// Stable description used in content hashes.
    fn describe(&self) -> String {
        match &self.kind {
            MappingKind::Binary(set) => {
                format!("binary[{}/{}]{:?}", self.source_taxonomy, self.source_classes, set)
            }
            MappingKind::Table { table, target_classes } => {
                format!(
                    "table[{}/{}->{}]{:?}",
                    self.source_taxonomy, self.source_classes, target_classes, table
                )
            }
        }
    }
}

/// Pixel true (1) iff its source class belongs to the mapping's set.
pub fn binarize(map: &ClassMap, mapping: &ClassMapping) -> Result<ClassMap> {
    let MappingKind::Binary(set) = &mapping.kind else {
        return Err(PhgError::Config("binarize needs a binary mapping".into()));
    };
    map.check_labels(mapping.source_classes, "binarize input")?;
    let data = map.data().iter().map(|c| u8::from(set.binary_search(c).is_ok())).collect();
    ClassMap::new(map.height(), map.width(), data)
}

/// Full source → target class conversion through the lookup table.
pub fn convert_classes(map: &ClassMap, mapping: &ClassMapping) -> Result<ClassMap> {
    let MappingKind::Table { table, .. } = &mapping.kind else {
        return Err(PhgError::Config("convert_classes needs a table mapping".into()));
    };
    map.check_labels(mapping.source_classes, "convert input")?;
    let data = map.data().iter().map(|&c| table[c as usize]).collect();
    ClassMap::new(map.height(), map.width(), data)
}

// --------------------------------------------------------------------------
// per-frame derivations

/// Per-pixel median of class indices. Wants an odd number (>= 3) of maps so
/// the median is an actual input value; with three experts where two agree,
/// the median is the majority class.
pub fn median_of_experts(maps: &[ClassMap]) -> Result<ClassMap> {
    if maps.len() < 3 || maps.len() % 2 == 0 {
        return Err(PhgError::Config(format!(
            "median wants an odd number >= 3 of maps, got {}",
            maps.len()
        )));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    for (i, m) in maps.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(PhgError::Shape(format!(
                "median input {i} is {}x{}, input 0 is {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    let mut out = ClassMap::filled(h, w, 0);
    let mut vals = vec![0u8; maps.len()];
    for i in 0..h * w {
        for (j, m) in maps.iter().enumerate() {
            vals[j] = m.data()[i];
        }
        vals.sort_unstable();
        out.data_mut()[i] = vals[vals.len() / 2];
    }
    Ok(out)
}

/// Mean and population standard deviation of one tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TensorStats {
    pub mean: f64,
    pub std: f64,
}

impl TensorStats {
    pub fn of(t: &Tensor) -> TensorStats {
        let (mean, std) = t.mean_std();
        TensorStats { mean, std }
    }
}

/// Renormalize: (x − μ_src)/σ_src · σ_tgt + μ_tgt, elementwise.
pub fn match_distribution(x: &Tensor, src: TensorStats, tgt: TensorStats) -> Result<Tensor> {
    if !(src.std > 0.0) || !src.std.is_finite() {
        return Err(PhgError::Numeric(format!(
            "match_distribution: source std {} not positive",
            src.std
        )));
    }
    let data = x
        .data()
        .iter()
        .map(|&v| (((v as f64 - src.mean) / src.std) * tgt.std + tgt.mean) as f32)
        .collect();
    Tensor::new(x.dims().to_vec(), data)
}

/// View a depth tensor as one [H, W] plane; accepts rank 2 or [1, H, W].
fn depth_plane(depth: &Tensor) -> Result<(usize, usize, &[f32])> {
    match depth.dims()[..] {
        [h, w] => Ok((h, w, depth.data())),
        [1, h, w] => Ok((h, w, depth.data())),
        ref d => Err(PhgError::Shape(format!("depth tensor has dims {d:?}, want [H,W]"))),
    }
}

fn check_unit_range(vals: &[f32], ctx: &str) -> Result<()> {
    for &v in vals {
        if !(0.0..=1.0).contains(&v) {
            return Err(PhgError::Data(format!("{ctx}: value {v} outside [0,1]")));
        }
    }
    Ok(())
}

/// Camera normals from a depth map by windowed plane fitting: gather the
/// window's 3-D points (x, y, depth·z_scale) at unit pixel spacing, center
/// them, and take the least-singular direction of the covariance. z_scale is
/// max(H, W) so depth relief is comparable to the spatial extent. Normals
/// are oriented n_z ≥ 0 (toward the viewer) and encoded v = (n+1)/2; a
/// degenerate window (points collinear) encodes (0, 0, 1) → (0.5, 0.5, 1.0).
pub fn normals_from_depth_svd(depth: &Tensor, window: usize) -> Result<Tensor> {
    if window < 3 || window % 2 == 0 {
        return Err(PhgError::Config(format!("normals window {window} must be odd and >= 3")));
    }
    let (h, w, d) = depth_plane(depth)?;
    depth.check_finite("normals input depth")?;
    check_unit_range(d, "normals input depth")?;
    let z_scale = h.max(w) as f64;
    let r = window / 2;

    let mut out = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        let y0 = y.saturating_sub(r);
        let y1 = (y + r).min(h - 1);
        for x in 0..w {
            let x0 = x.saturating_sub(r);
            let x1 = (x + r).min(w - 1);

            // Mean of the window's 3-D points.
            let mut mean = Vector3::zeros();
            let mut n_pts = 0.0f64;
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    mean += Vector3::new(xx as f64, yy as f64, d[yy * w + xx] as f64 * z_scale);
                    n_pts += 1.0;
                }
            }
            mean /= n_pts;

            // Unnormalized covariance; eigenvectors are scale-free.
            let mut cov = Matrix3::zeros();
            for yy in y0..=y1 {
                for xx in x0..=x1 {
                    let p = Vector3::new(xx as f64, yy as f64, d[yy * w + xx] as f64 * z_scale)
                        - mean;
                    cov += p * p.transpose();
                }
            }

            let eig = cov.symmetric_eigen();
            let mut idx = [0usize, 1, 2];
            idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
            let lambda_max = eig.eigenvalues[idx[2]].max(0.0);
            // Collinear points leave two (near-)zero directions: the plane
            // is underdetermined, fall back to straight-up.
            let n = if eig.eigenvalues[idx[1]] <= 1e-12 * lambda_max.max(1.0) {
                Vector3::new(0.0, 0.0, 1.0)
            } else {
                let mut n = eig.eigenvectors.column(idx[0]).into_owned();
                n.normalize_mut();
                // Face the viewer: positive z, with deterministic tie-breaks
                // for vertical planes.
                if n.z < 0.0
                    || (n.z == 0.0 && (n.x < 0.0 || (n.x == 0.0 && n.y < 0.0)))
                {
                    n = -n;
                }
                n
            };
            out.set3(0, y, x, ((n.x + 1.0) / 2.0) as f32);
            out.set3(1, y, x, ((n.y + 1.0) / 2.0) as f32);
            out.set3(2, y, x, ((n.z + 1.0) / 2.0) as f32);
        }
    }
    Ok(out)
}

/// Geometric landing check over encoded normal channels and depth:
/// up-channel > 0.8 AND (sum of the other two channels) < 1.2 AND
/// depth <= 0.9. `up_channel` selects which encoded channel is vertical.
pub fn safe_landing_geometric(
    normals: &Tensor,
    depth: &Tensor,
    up_channel: usize,
) -> Result<ClassMap> {
    let (c, h, w) = normals.chw();
    if c != 3 {
        return Err(PhgError::Shape(format!("normals have {c} channels, want 3")));
    }
    if up_channel >= 3 {
        return Err(PhgError::Config(format!("up channel {up_channel} out of range")));
    }
    let (dh, dw, d) = depth_plane(depth)?;
    if (dh, dw) != (h, w) {
        return Err(PhgError::Shape(format!(
            "depth {dh}x{dw} vs normals {h}x{w}"
        )));
    }
    check_unit_range(normals.data(), "safe-landing normals")?;
    check_unit_range(d, "safe-landing depth")?;
    let others: [usize; 2] = match up_channel {
        0 => [1, 2],
        1 => [0, 2],
        _ => [0, 1],
    };
    let mut out = ClassMap::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let up = normals.at3(up_channel, y, x);
            let rest = normals.at3(others[0], y, x) + normals.at3(others[1], y, x);
            let ok = up > 0.8 && rest < 1.2 && d[y * w + x] <= 0.9;
            out.set(y, x, u8::from(ok));
        }
    }
    Ok(out)
}

/// Buildings that are close: building pixels with depth strictly below the
/// threshold (0.3 in the reference setup).
pub fn buildings_nearby(buildings: &ClassMap, depth: &Tensor, threshold: f32) -> Result<ClassMap> {
    buildings.check_labels(2, "buildings map")?;
    let (h, w, d) = depth_plane(depth)?;
    if (buildings.height(), buildings.width()) != (h, w) {
        return Err(PhgError::Shape(format!(
            "buildings {}x{} vs depth {h}x{w}",
            buildings.height(),
            buildings.width()
        )));
    }
    check_unit_range(d, "buildings-nearby depth")?;
    let data = buildings
        .data()
        .iter()
        .zip(d)
        .map(|(&b, &z)| u8::from(b == 1 && z < threshold))
        .collect();
    ClassMap::new(h, w, data)
}

/// Pixelwise AND of two binary maps.
pub fn and_maps(a: &ClassMap, b: &ClassMap) -> Result<ClassMap> {
    a.check_labels(2, "and lhs")?;
    b.check_labels(2, "and rhs")?;
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(PhgError::Shape(format!(
            "and: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x & y).collect();
    ClassMap::new(a.height(), a.width(), data)
}

// --------------------------------------------------------------------------
// derivation DAG

/// One derivation, reading named modalities (other nodes or files already on
/// disk) and producing the modality named after the node.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivationNode {
    pub name: String,
    pub kind: DerivationKind,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DerivationKind {
    Binarize { source: String, mapping: ClassMapping },
    ConvertClasses { source: String, mapping: ClassMapping },
    Median { sources: Vec<String> },
    NormalsSvd { depth: String, window: usize },
    SafeLandingGeo { normals: String, depth: String, up_channel: usize },
    BuildingsNearby { buildings: String, depth: String, threshold: f32 },
    And { a: String, b: String },
    MatchDistribution { source: String, target: TensorStats },
}

impl DerivationNode {
    pub fn dependencies(&self) -> Vec<&str> {
        match &self.kind {
            DerivationKind::Binarize { source, .. }
            | DerivationKind::ConvertClasses { source, .. }
            | DerivationKind::MatchDistribution { source, .. } => vec![source],
            DerivationKind::Median { sources } => sources.iter().map(|s| s.as_str()).collect(),
            DerivationKind::NormalsSvd { depth, .. } => vec![depth],
            DerivationKind::SafeLandingGeo { normals, depth, .. } => vec![normals, depth],
            DerivationKind::BuildingsNearby { buildings, depth, .. } => vec![buildings, depth],
            DerivationKind::And { a, b } => vec![a, b],
        }
    }

    /// Stable content-hash description of the derivation parameters.
    fn describe(&self) -> String {
        match &self.kind {
            DerivationKind::Binarize { source, mapping } => {
                format!("binarize({source}, {})", mapping.describe())
            }
            DerivationKind::ConvertClasses { source, mapping } => {
                format!("convert({source}, {})", mapping.describe())
            }
            DerivationKind::Median { sources } => format!("median{sources:?}"),
            DerivationKind::NormalsSvd { depth, window } => {
                format!("normals_svd({depth}, window={window})")
            }
            DerivationKind::SafeLandingGeo { normals, depth, up_channel } => {
                format!("safe_landing_geo({normals}, {depth}, up={up_channel})")
            }
            DerivationKind::BuildingsNearby { buildings, depth, threshold } => {
                format!("buildings_nearby({buildings}, {depth}, thr={threshold})")
            }
            DerivationKind::And { a, b } => format!("and({a}, {b})"),
            DerivationKind::MatchDistribution { source, target } => {
                format!("match_distribution({source}, mean={}, std={})", target.mean, target.std)
            }
        }
    }
}

/// Execution order: every node after its in-graph dependencies, ready nodes
/// taken in name order (deterministic). Dependencies that are not node names
/// are external inputs and never block. Cycles are reported by name.
pub fn topo_order(nodes: &[DerivationNode]) -> Result<Vec<usize>> {
    let mut by_name: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, n) in nodes.iter().enumerate() {
        if by_name.insert(n.name.as_str(), i).is_some() {
            return Err(PhgError::Config(format!("duplicate derivation node '{}'", n.name)));
        }
    }
    let mut remaining: BTreeMap<&str, usize> = by_name.clone();
    let mut done: Vec<bool> = vec![false; nodes.len()];
    let mut order = Vec::with_capacity(nodes.len());
    while !remaining.is_empty() {
        let ready: Vec<(&str, usize)> = remaining
            .iter()
            .filter(|(_, &i)| {
                nodes[i]
                    .dependencies()
                    .iter()
                    .all(|d| by_name.get(d).map(|&j| done[j]).unwrap_or(true))
            })
            .map(|(n, &i)| (*n, i))
            .collect();
        if ready.is_empty() {
            return Err(cycle_error(nodes, &remaining));
        }
        for (name, i) in ready {
            remaining.remove(name);
            done[i] = true;
            order.push(i);
        }
    }
    Ok(order)
}

/// Walk unresolved dependencies from the smallest blocked node until a node
/// repeats, and render that loop.
fn cycle_error(nodes: &[DerivationNode], remaining: &BTreeMap<&str, usize>) -> PhgError {
    let mut path: Vec<&str> = Vec::new();
    let mut cur = *remaining.keys().next().expect("nonempty");
    loop {
        if let Some(pos) = path.iter().position(|n| *n == cur) {
            let mut names: Vec<&str> = path[pos..].to_vec();
            names.push(cur);
            return PhgError::Cycle(format!("derivation cycle: {}", names.join(" -> ")));
        }
        path.push(cur);
        let idx = remaining[cur];
        cur = nodes[idx]
            .dependencies()
            .into_iter()
            .find(|d| remaining.contains_key(d))
            .expect("blocked node has an unresolved in-graph dependency");
    }
}

// --------------------------------------------------------------------------
// pipeline execution over a scene directory

#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub written: Vec<PathBuf>,
    pub skipped: usize,
}

const MANIFEST_FILE: &str = ".derived-manifest";

/// Run every derivation for every frame of a scene laid out as
/// `scene/<modality>/<frame>.phgt`. Frame stems come from `scene/rgb/`.
/// Re-runs skip any output whose recorded content hash (derivation
/// parameters + dependency bytes) is unchanged and whose file still exists.
pub fn run_pipeline(scene_dir: &Path, nodes: &[DerivationNode]) -> Result<PipelineReport> {
    if nodes.is_empty() {
        return Ok(PipelineReport::default());
    }
    let order = topo_order(nodes)?;
    let frames = discover_frames(scene_dir)?;
    let mut manifest = load_manifest(scene_dir)?;

    let mut report = PipelineReport::default();
    for frame in &frames {
        // (value, content hash) per modality, for this frame.
        let mut cache: HashMap<String, (PhgtData, String)> = HashMap::new();
        for &idx in &order {
            let node = &nodes[idx];
            let mut hasher = Sha256::new();
            hasher.update(node.describe().as_bytes());
            let mut inputs = Vec::new();
            for dep in node.dependencies() {
                let (val, hash) = load_modality(scene_dir, dep, frame, &mut cache)?;
                hasher.update(b"\0");
                hasher.update(hash.as_bytes());
                inputs.push(val);
            }
            let key = hex(&hasher.finalize());
            let rel = format!("{}/{frame}.phgt", node.name);
            let out_path = scene_dir.join(&rel);
            if out_path.is_file() && manifest.get(&rel).map(String::as_str) == Some(key.as_str()) {
                report.skipped += 1;
                continue;
            }

            let value = eval_node(node, &inputs)?;
            let bytes = phgt::to_bytes(&value);
            if let Some(parent) = out_path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| PhgError::io(parent, e))?;
            }
            phgt::write_atomic(&out_path, &bytes)?;
            cache.insert(node.name.clone(), (value, hex(&Sha256::digest(&bytes))));
            manifest.insert(rel, key);
            report.written.push(out_path);
        }
    }
    save_manifest(scene_dir, &manifest)?;
    Ok(report)
}

fn discover_frames(scene_dir: &Path) -> Result<Vec<String>> {
    let rgb = scene_dir.join("rgb");
    if !rgb.is_dir() {
        return Err(PhgError::Data(format!(
            "scene {} has no rgb/ directory to enumerate frames from",
            scene_dir.display()
        )));
    }
    let mut frames = Vec::new();
    for entry in std::fs::read_dir(&rgb).map_err(|e| PhgError::io(&rgb, e))? {
        let entry = entry.map_err(|e| PhgError::io(&rgb, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("phgt") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                frames.push(stem.to_string());
            }
        }
    }
    frames.sort();
    Ok(frames)
}

fn load_modality(
    scene_dir: &Path,
    name: &str,
    frame: &str,
    cache: &mut HashMap<String, (PhgtData, String)>,
) -> Result<(PhgtData, String)> {
    if let Some(hit) = cache.get(name) {
        return Ok(hit.clone());
    }
    let path = scene_dir.join(name).join(format!("{frame}.phgt"));
    if !path.is_file() {
        return Err(PhgError::Data(format!(
            "frame {frame}: missing dependency file {}",
            path.display()
        )));
    }
    let bytes = std::fs::read(&path).map_err(|e| PhgError::io(&path, e))?;
    let value = phgt::from_bytes(&bytes, &path)?;
    let entry = (value, hex(&Sha256::digest(&bytes)));
    cache.insert(name.to_string(), entry.clone());
    Ok(entry)
}

fn eval_node(node: &DerivationNode, inputs: &[PhgtData]) -> Result<PhgtData> {
    let as_map = |i: usize, what: &str| -> Result<&ClassMap> {
        match &inputs[i] {
            PhgtData::U8(m) => Ok(m),
            PhgtData::F32(_) => Err(PhgError::Data(format!(
                "node '{}': {what} must be a class map",
                node.name
            ))),
        }
    };
    let as_tensor = |i: usize, what: &str| -> Result<&Tensor> {
        match &inputs[i] {
            PhgtData::F32(t) => Ok(t),
            PhgtData::U8(_) => Err(PhgError::Data(format!(
                "node '{}': {what} must be a float tensor",
                node.name
            ))),
        }
    };
    match &node.kind {
        DerivationKind::Binarize { mapping, .. } => {
            Ok(PhgtData::U8(binarize(as_map(0, "source")?, mapping)?))
        }
        DerivationKind::ConvertClasses { mapping, .. } => {
            Ok(PhgtData::U8(convert_classes(as_map(0, "source")?, mapping)?))
        }
        DerivationKind::Median { sources } => {
            let maps: Vec<ClassMap> = (0..sources.len())
                .map(|i| as_map(i, "median input").cloned())
                .collect::<Result<_>>()?;
            Ok(PhgtData::U8(median_of_experts(&maps)?))
        }
        DerivationKind::NormalsSvd { window, .. } => {
            Ok(PhgtData::F32(normals_from_depth_svd(as_tensor(0, "depth")?, *window)?))
        }
        DerivationKind::SafeLandingGeo { up_channel, .. } => Ok(PhgtData::U8(
            safe_landing_geometric(as_tensor(0, "normals")?, as_tensor(1, "depth")?, *up_channel)?,
        )),
        DerivationKind::BuildingsNearby { threshold, .. } => Ok(PhgtData::U8(buildings_nearby(
            as_map(0, "buildings")?,
            as_tensor(1, "depth")?,
            *threshold,
        )?)),
        DerivationKind::And { .. } => {
            Ok(PhgtData::U8(and_maps(as_map(0, "lhs")?, as_map(1, "rhs")?)?))
        }
        DerivationKind::MatchDistribution { target, .. } => {
            let x = as_tensor(0, "source")?;
            Ok(PhgtData::F32(match_distribution(x, TensorStats::of(x), *target)?))
        }
    }
}

fn load_manifest(scene_dir: &Path) -> Result<BTreeMap<String, String>> {
    let path = scene_dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Ok(BTreeMap::new());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| PhgError::io(&path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        if let Some((rel, hash)) = line.split_once('\t') {
            out.insert(rel.to_string(), hash.to_string());
        }
    }
    Ok(out)
}

fn save_manifest(scene_dir: &Path, manifest: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (rel, hash) in manifest {
        let _ = writeln!(text, "{rel}\t{hash}");
    }
    phgt::write_atomic(&scene_dir.join(MANIFEST_FILE), text.as_bytes())
}

fn hex(digest: &[u8]) -> String {
    let mut s = String::with_capacity(digest.len() * 2);
    for b in digest {
        let _ = write!(s, "{b:02x}");
    }
    s
}
