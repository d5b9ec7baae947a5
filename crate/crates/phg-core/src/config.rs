//! Flat key-value experiment configuration.
//!
//! Grammar (one statement per line):
//!   - `[section-name]` opens a section; names match `[A-Za-z0-9_.-]+`
//!   - `key = value` inside a section; keys match the same set, values run
//!     to end of line and are trimmed
//!   - `#` starts a whole-line comment; blank lines are ignored
//!   - no nesting, no duplicate section names, no duplicate keys per section
//!
//! Serialization is canonical (stable order, `key = value`, one blank line
//! between sections) so configs can be hashed and diffed. Domain types that
//! appear in config files (modality sets, derivation graphs, scene specs)
//! get encode/decode helpers here.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{PhgError, Result};
use crate::modality::{ModalityKind, ModalityRole, ModalitySet, ModalitySpec};
use crate::pipeline::{ClassMapping, DerivationKind, DerivationNode, TensorStats};
use crate::synth::SyntheticSceneSpec;

fn valid_name(s: &str) -> bool {
    !s.is_empty()
        && s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigSection {
    pub name: String,
    entries: Vec<(String, String)>,
}

impl ConfigSection {
    pub fn new(name: &str) -> ConfigSection {
        ConfigSection { name: name.to_string(), entries: Vec::new() }
    }

    pub fn set(&mut self, key: &str, value: impl Display) -> &mut Self {
        let value = value.to_string();
        debug_assert!(valid_name(key), "bad config key '{key}'");
        if let Some(e) = self.entries.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            self.entries.push((key.to_string(), value));
        }
        self
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| {
            PhgError::Config(format!("section [{}] is missing key '{key}'", self.name))
        })
    }

    /// Required key parsed into a target type.
    pub fn parse_as<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.require(key)?;
        raw.parse::<T>().map_err(|_| {
            PhgError::Config(format!(
                "section [{}], key '{key}': cannot parse '{raw}'",
                self.name
            ))
        })
    }

    /// Optional key with a default; a present key must still parse.
    pub fn parse_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(_) => self.parse_as(key),
        }
    }

    /// Comma-separated list parsed element-wise (empty value → empty list).
    pub fn parse_list<T: FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let raw = self.require(key)?;
        if raw.is_empty() {
            return Ok(Vec::new());
        }
        raw.split(',')
            .map(|part| {
                part.trim().parse::<T>().map_err(|_| {
                    PhgError::Config(format!(
                        "section [{}], key '{key}': cannot parse element '{}'",
                        self.name,
                        part.trim()
                    ))
                })
            })
            .collect()
    }

    pub fn entries(&self) -> &[(String, String)] {
        &self.entries
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ConfigDoc {
    sections: Vec<ConfigSection>,
}

impl ConfigDoc {
    pub fn new() -> ConfigDoc {
        ConfigDoc::default()
    }

    pub fn push(&mut self, section: ConfigSection) -> &mut Self {
        self.sections.push(section);
        self
    }

    pub fn sections(&self) -> &[ConfigSection] {
        &self.sections
    }

    pub fn section(&self, name: &str) -> Option<&ConfigSection> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn require_section(&self, name: &str) -> Result<&ConfigSection> {
        self.section(name)
            .ok_or_else(|| PhgError::Config(format!("missing config section [{name}]")))
    }

    /// Sections whose name starts with `prefix.`, in file order.
    pub fn sections_with_prefix<'a>(
        &'a self,
        prefix: &'a str,
    ) -> impl Iterator<Item = &'a ConfigSection> + 'a {
        self.sections.iter().filter(move |s| {
            s.name.len() > prefix.len() + 1
                && s.name.starts_with(prefix)
                && s.name.as_bytes()[prefix.len()] == b'.'
        })
    }

    pub fn parse(text: &str) -> Result<ConfigDoc> {
        let mut doc = ConfigDoc::new();
        let mut current: Option<ConfigSection> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let lineno = lineno + 1;
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(inner) = line.strip_prefix('[') {
                let name = inner.strip_suffix(']').ok_or_else(|| {
                    PhgError::Config(format!("line {lineno}: unterminated section header"))
                })?;
                if !valid_name(name) {
                    return Err(PhgError::Config(format!(
                        "line {lineno}: invalid section name '{name}'"
                    )));
                }
                if doc.section(name).is_some() || current.as_ref().is_some_and(|c| c.name == name)
                {
                    return Err(PhgError::Config(format!(
                        "line {lineno}: duplicate section [{name}]"
                    )));
                }
                if let Some(done) = current.take() {
                    doc.sections.push(done);
                }
                current = Some(ConfigSection::new(name));
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PhgError::Config(format!("line {lineno}: expected 'key = value', got '{line}'"))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !valid_name(key) {
                return Err(PhgError::Config(format!("line {lineno}: invalid key '{key}'")));
            }
            let section = current.as_mut().ok_or_else(|| {
                PhgError::Config(format!("line {lineno}: key '{key}' outside any section"))
            })?;
            if section.get(key).is_some() {
                return Err(PhgError::Config(format!(
                    "line {lineno}: duplicate key '{key}' in [{}]",
                    section.name
                )));
            }
            section.entries.push((key.to_string(), value.to_string()));
        }
        if let Some(done) = current.take() {
            doc.sections.push(done);
        }
        Ok(doc)
    }

    /// Canonical text form; `parse(render(doc)) == doc` for valid docs.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (i, section) in self.sections.iter().enumerate() {
            if i > 0 {
                out.push('\n');
            }
            out.push_str(&format!("[{}]\n", section.name));
            for (k, v) in &section.entries {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<ConfigDoc> {
        let text = std::fs::read_to_string(path).map_err(|e| PhgError::io(path, e))?;
        ConfigDoc::parse(&text)
            .map_err(|e| PhgError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::phgt::write_atomic(path, self.render().as_bytes())
    }
}

// --------------------------------------------------------------------------
// modality sets

/// Encode a modality set as ordered `[modality.<name>]` sections.
pub fn encode_modality_set(set: &ModalitySet) -> Vec<ConfigSection> {
    set.specs()
        .iter()
        .map(|spec| {
            let mut s = ConfigSection::new(&format!("modality.{}", spec.name));
            s.set(
                "role",
                match spec.role {
                    ModalityRole::Input => "input",
                    ModalityRole::Intermediate => "intermediate",
                    ModalityRole::Output => "output",
                },
            );
            match spec.kind {
                ModalityKind::Continuous { channels } => {
                    s.set("kind", "continuous");
                    s.set("channels", channels);
                }
                ModalityKind::Categorical { classes } => {
                    s.set("kind", "categorical");
                    s.set("classes", classes);
                }
            }
            s
        })
        .collect()
}

/// Rebuild a modality set from `[modality.<name>]` sections, in file order.
pub fn decode_modality_set(doc: &ConfigDoc) -> Result<ModalitySet> {
    let mut specs = Vec::new();
    for section in doc.sections_with_prefix("modality") {
        let name = &section.name["modality.".len()..];
        let role = match section.require("role")? {
            "input" => ModalityRole::Input,
            "intermediate" => ModalityRole::Intermediate,
            "output" => ModalityRole::Output,
            other => {
                return Err(PhgError::Config(format!(
                    "[{}]: unknown role '{other}'",
                    section.name
                )))
            }
        };
        let spec = match section.require("kind")? {
            "continuous" => ModalitySpec::continuous(name, role, section.parse_as("channels")?),
            "categorical" => ModalitySpec::categorical(name, role, section.parse_as("classes")?),
            other => {
                return Err(PhgError::Config(format!(
                    "[{}]: unknown kind '{other}'",
                    section.name
                )))
            }
        };
        specs.push(spec);
    }
    if specs.is_empty() {
        return Err(PhgError::Config("config declares no [modality.*] sections".into()));
    }
    ModalitySet::new(specs)
}

// --------------------------------------------------------------------------
// derivation graphs

fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Encode a derivation graph as ordered `[derive.<name>]` sections.
pub fn encode_derivations(nodes: &[DerivationNode]) -> Vec<ConfigSection> {
    nodes
        .iter()
        .map(|node| {
            let mut s = ConfigSection::new(&format!("derive.{}", node.name));
            match &node.kind {
                DerivationKind::Binarize { source, mapping } => {
                    s.set("op", "binarize");
                    s.set("source", source);
                    s.set("taxonomy", &mapping.source_taxonomy);
                    s.set("source_classes", mapping.source_classes);
                    let set: Vec<u8> = (0..mapping.source_classes as u8)
                        .filter(|&c| mapping.target_of(c) == Some(1))
                        .collect();
                    s.set("classes", join_list(&set));
                }
                DerivationKind::ConvertClasses { source, mapping } => {
                    s.set("op", "convert");
                    s.set("source", source);
                    s.set("taxonomy", &mapping.source_taxonomy);
                    let table: Vec<u8> = (0..mapping.source_classes as u8)
                        .map(|c| mapping.target_of(c).expect("table mapping is total"))
                        .collect();
                    s.set("table", join_list(&table));
                    s.set("target_classes", mapping.target_classes());
                }
                DerivationKind::Median { sources } => {
                    s.set("op", "median");
                    s.set("sources", sources.join(","));
                }
                DerivationKind::NormalsSvd { depth, window } => {
                    s.set("op", "normals_svd");
                    s.set("depth", depth);
                    s.set("window", window);
                }
                DerivationKind::SafeLandingGeo { normals, depth, up_channel } => {
                    s.set("op", "safe_landing_geo");
                    s.set("normals", normals);
                    s.set("depth", depth);
                    s.set("up_channel", up_channel);
                }
                DerivationKind::BuildingsNearby { buildings, depth, threshold } => {
                    s.set("op", "buildings_nearby");
                    s.set("buildings", buildings);
                    s.set("depth", depth);
                    s.set("threshold", threshold);
                }
                DerivationKind::And { a, b } => {
                    s.set("op", "and");
                    s.set("a", a);
                    s.set("b", b);
                }
                DerivationKind::MatchDistribution { source, target } => {
                    s.set("op", "match_distribution");
                    s.set("source", source);
                    s.set("mean", target.mean);
                    s.set("std", target.std);
                }
            }
            s
        })
        .collect()
}

/// Rebuild a derivation graph from `[derive.<name>]` sections, in file order.
pub fn decode_derivations(doc: &ConfigDoc) -> Result<Vec<DerivationNode>> {
    let mut nodes = Vec::new();
    for section in doc.sections_with_prefix("derive") {
        let name = section.name["derive.".len()..].to_string();
        let kind = match section.require("op")? {
            "binarize" => DerivationKind::Binarize {
                source: section.require("source")?.to_string(),
                mapping: ClassMapping::binary(
                    section.require("taxonomy")?,
                    section.parse_as("source_classes")?,
                    section.parse_list("classes")?,
                )?,
            },
            "convert" => DerivationKind::ConvertClasses {
                source: section.require("source")?.to_string(),
                mapping: ClassMapping::table(
                    section.require("taxonomy")?,
                    section.parse_list("table")?,
                    section.parse_as("target_classes")?,
                )?,
            },
            "median" => DerivationKind::Median {
                sources: section
                    .require("sources")?
                    .split(',')
                    .map(|s| s.trim().to_string())
                    .collect(),
            },
            "normals_svd" => DerivationKind::NormalsSvd {
                depth: section.require("depth")?.to_string(),
                window: section.parse_as("window")?,
            },
            "safe_landing_geo" => DerivationKind::SafeLandingGeo {
                normals: section.require("normals")?.to_string(),
                depth: section.require("depth")?.to_string(),
                up_channel: section.parse_as("up_channel")?,
            },
            "buildings_nearby" => DerivationKind::BuildingsNearby {
                buildings: section.require("buildings")?.to_string(),
                depth: section.require("depth")?.to_string(),
                threshold: section.parse_as("threshold")?,
            },
            "and" => DerivationKind::And {
                a: section.require("a")?.to_string(),
                b: section.require("b")?.to_string(),
            },
            "match_distribution" => DerivationKind::MatchDistribution {
                source: section.require("source")?.to_string(),
                target: TensorStats {
                    mean: section.parse_as("mean")?,
                    std: section.parse_as("std")?,
                },
            },
            other => {
                return Err(PhgError::Config(format!(
                    "[{}]: unknown derivation op '{other}'",
                    section.name
                )))
            }
        };
        nodes.push(DerivationNode { name, kind });
    }
    Ok(nodes)
}

// --------------------------------------------------------------------------
// scene specs

/// Encode a scene spec as a `[scene]` section.
pub fn encode_scene_spec(spec: &SyntheticSceneSpec) -> ConfigSection {
    let mut s = ConfigSection::new("scene");
    s.set("seed", spec.seed);
    s.set("frames", spec.frames);
    s.set("height", spec.height);
    s.set("width", spec.width);
    s.set("octaves", spec.octaves);
    s.set("regions", spec.regions);
    s.set("objects", spec.objects);
    s.set("step_x", spec.step_x);
    s.set("step_y", spec.step_y);
    s.set("rgb_noise", spec.rgb_noise);
    s.set("expert_flip_blobs", spec.expert_flip_blobs);
    s.set("expert_blob_radius", spec.expert_blob_radius);
    s.set("depth_noise", spec.depth_noise);
    s.set("depth_bias", spec.depth_bias);
    s
}

/// Decode a `[scene]` section; missing keys fall back to the defaults for
/// the given seed, so spec files only need to state what they change.
pub fn decode_scene_spec(section: &ConfigSection) -> Result<SyntheticSceneSpec> {
    let seed = section.parse_as("seed")?;
    let d = SyntheticSceneSpec::new(seed);
    let spec = SyntheticSceneSpec {
        seed,
        frames: section.parse_or("frames", d.frames)?,
        height: section.parse_or("height", d.height)?,
        width: section.parse_or("width", d.width)?,
        octaves: section.parse_or("octaves", d.octaves)?,
        regions: section.parse_or("regions", d.regions)?,
        objects: section.parse_or("objects", d.objects)?,
        step_x: section.parse_or("step_x", d.step_x)?,
        step_y: section.parse_or("step_y", d.step_y)?,
        rgb_noise: section.parse_or("rgb_noise", d.rgb_noise)?,
        expert_flip_blobs: section.parse_or("expert_flip_blobs", d.expert_flip_blobs)?,
        expert_blob_radius: section.parse_or("expert_blob_radius", d.expert_blob_radius)?,
        depth_noise: section.parse_or("depth_noise", d.depth_noise)?,
        depth_bias: section.parse_or("depth_bias", d.depth_bias)?,
    };
    spec.validate()?;
    Ok(spec)
}
