//! Directory-layout helpers shared by the subcommands.
//!
//! Scenes are laid out as `scene/<modality>/NNNNNN.phgt`. Commands accept
//! either a single scene directory or a directory of scenes; the probe
//! modality (or candidate files) decides which case applies.

use std::path::{Path, PathBuf};

use phg_core::config::ConfigDoc;
use phg_core::error::{PhgError, Result};
use phg_core::metrics::ClassWeights;
use phg_core::modality::{ModalityKind, ModalityRole, ModalitySet};

/// `000001.phgt`-style name for a frame index.
pub fn frame_file(index: usize) -> String {
    format!("{index:06}.phgt")
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| PhgError::io(dir, e))? {
        entries.push(entry.map_err(|e| PhgError::io(dir, e))?.path());
    }
    entries.sort();
    Ok(entries)
}

/// Frame indices of one scene, from the numeric stems under
/// `scene/<modality>/`, ascending.
pub fn frame_indices(scene: &Path, modality: &str) -> Result<Vec<usize>> {
    let dir = scene.join(modality);
    let mut frames = Vec::new();
    for path in sorted_entries(&dir)? {
        if path.extension().is_some_and(|e| e == "phgt") {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
            let idx: usize = stem.parse().map_err(|_| PhgError::Format {
                path: path.clone(),
                reason: "frame stem is not a number".into(),
            })?;
            frames.push(idx);
        }
    }
    if frames.is_empty() {
        return Err(PhgError::Data(format!("no frames under {}", dir.display())));
    }
    frames.sort_unstable();
    Ok(frames)
}

/// Scene directories under `root`, as (name, path) sorted by name. When
/// `root` itself contains the probe modality it is treated as a single
/// scene named after its final path component.
pub fn discover_scenes(root: &Path, probe: &str) -> Result<Vec<(String, PathBuf)>> {
    if root.join(probe).is_dir() {
        return Ok(vec![(dir_name(root), root.to_path_buf())]);
    }
    let mut scenes = Vec::new();
    for path in sorted_entries(root)? {
        if path.join(probe).is_dir() {
            scenes.push((dir_name(&path), path));
        }
    }
    if scenes.is_empty() {
        return Err(PhgError::Data(format!(
            "no scene directories with a '{probe}' modality under {}",
            root.display()
        )));
    }
    Ok(scenes)
}

fn has_candidates(dir: &Path) -> bool {
    std::fs::read_dir(dir).map_or(false, |entries| {
        entries
            .flatten()
            .any(|e| e.path().extension().is_some_and(|x| x == "phgc"))
    })
}

/// Candidate-set scenes: directories holding `.phgc` files, same single- or
/// multi-scene convention as `discover_scenes`.
pub fn discover_candidate_scenes(root: &Path) -> Result<Vec<(String, PathBuf)>> {
    if has_candidates(root) {
        return Ok(vec![(dir_name(root), root.to_path_buf())]);
    }
    let mut scenes = Vec::new();
    for path in sorted_entries(root)? {
        if path.is_dir() && has_candidates(&path) {
            scenes.push((dir_name(&path), path));
        }
    }
    if scenes.is_empty() {
        return Err(PhgError::Data(format!(
            "no candidate (.phgc) files under {}",
            root.display()
        )));
    }
    Ok(scenes)
}

/// Sorted `.phgc` files of one candidate scene.
pub fn candidate_files(scene: &Path) -> Result<Vec<PathBuf>> {
    let files: Vec<PathBuf> = sorted_entries(scene)?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "phgc"))
        .collect();
    if files.is_empty() {
        return Err(PhgError::Data(format!("no .phgc files in {}", scene.display())));
    }
    Ok(files)
}

fn dir_name(path: &Path) -> String {
    path.file_name()
        .and_then(|n| n.to_str())
        .unwrap_or("scene")
        .to_string()
}

/// Class weights: the shipped aerial defaults, or a `[class-weights]`
/// section with `values = w0,w1,...` from a config file.
pub fn load_weights(path: Option<&Path>) -> Result<ClassWeights> {
    let Some(path) = path else {
        return Ok(ClassWeights::aerial8());
    };
    let text = std::fs::read_to_string(path).map_err(|e| PhgError::io(path, e))?;
    let doc = ConfigDoc::parse(&text)?;
    let section = doc.require_section("class-weights")?;
    let values: Vec<f64> = section
        .require("values")?
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| PhgError::Config(format!("bad class weight '{}'", v.trim())))
        })
        .collect::<Result<_>>()?;
    ClassWeights::new(values)
}

/// The categorical output a command evaluates by default: the first one in
/// the modality set's declaration order.
pub fn default_output(set: &ModalitySet) -> Result<String> {
    set.specs()
        .iter()
        .find(|s| {
            s.role == ModalityRole::Output && matches!(s.kind, ModalityKind::Categorical { .. })
        })
        .map(|s| s.name.clone())
        .ok_or_else(|| PhgError::Config("modality set has no categorical output".into()))
}

/// Parse a config document from a file.
pub fn read_config(path: &Path) -> Result<ConfigDoc> {
    let text = std::fs::read_to_string(path).map_err(|e| PhgError::io(path, e))?;
    ConfigDoc::parse(&text)
}

/// Write text output atomically, or print it when no path was given.
pub fn emit(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => phg_core::phgt::write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}
