//! Modality sets, hyper-edge masks and bundle masking.
//!
//! A modality plays one of three roles. Inputs are always visible.
//! Intermediates may be masked (zero-filled, no indicator channel) — every
//! subset of visible intermediates is one hyper-edge of the underlying
//! pseudo-hypergraph. Outputs are always masked on the input side: the
//! network may never see the thing it predicts.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{PhgError, Result};
use crate::tensor::{ClassMap, Tensor};

/// Maximum number of intermediates `enumerate_masks` accepts (2^20 patterns).
pub const MAX_ENUMERATED_INTERMEDIATES: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityRole {
    Input,
    Intermediate,
    Output,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModalityKind {
    /// Real-valued planes with a fixed channel count.
    Continuous { channels: usize },
    /// Per-pixel class indices; enters channel concatenation one-hot.
    Categorical { classes: usize },
}

impl ModalityKind {
    /// Width this modality occupies in a channel concatenation.
    pub fn channels(&self) -> usize {
        match *self {
            ModalityKind::Continuous { channels } => channels,
            ModalityKind::Categorical { classes } => classes,
        }
    }
}

/// One declared modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySpec {
    pub name: String,
    pub role: ModalityRole,
    pub kind: ModalityKind,
}

impl ModalitySpec {
    pub fn continuous(name: &str, role: ModalityRole, channels: usize) -> Self {
        ModalitySpec { name: name.into(), role, kind: ModalityKind::Continuous { channels } }
    }

    pub fn categorical(name: &str, role: ModalityRole, classes: usize) -> Self {
        ModalitySpec { name: name.into(), role, kind: ModalityKind::Categorical { classes } }
    }
}

/// An ordered set of modalities. Declaration order fixes the channel layout
/// of `apply_mask` and the bit order of hyper-edge masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModalitySet {
    specs: Vec<ModalitySpec>,
}

impl ModalitySet {
    pub fn new(specs: Vec<ModalitySpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(PhgError::Config("modality set is empty".into()));
        }
        for (i, s) in specs.iter().enumerate() {
            if s.name.is_empty() {
                return Err(PhgError::Config(format!("modality {i} has an empty name")));
            }
            if s.kind.channels() == 0 {
                return Err(PhgError::Config(format!("modality '{}' has zero channels", s.name)));
            }
            if let ModalityKind::Categorical { classes } = s.kind {
                if !(2..=256).contains(&classes) {
                    return Err(PhgError::Config(format!(
                        "modality '{}': class count {classes} outside [2, 256]",
                        s.name
                    )));
                }
            }
            if specs[..i].iter().any(|o| o.name == s.name) {
                return Err(PhgError::Config(format!("duplicate modality name '{}'", s.name)));
            }
        }
        if !specs.iter().any(|s| s.role == ModalityRole::Input) {
            return Err(PhgError::Config("modality set declares no input".into()));
        }
        if !specs.iter().any(|s| s.role == ModalityRole::Output) {
            return Err(PhgError::Config("modality set declares no output".into()));
        }
        Ok(ModalitySet { specs })
    }

    pub fn specs(&self) -> &[ModalitySpec] {
        &self.specs
    }

    pub fn get(&self, name: &str) -> Option<&ModalitySpec> {
        self.specs.iter().find(|s| s.name == name)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.specs.iter().filter(|s| s.role == ModalityRole::Input)
    }

    /// Intermediates in declaration order; index in this sequence is the
    /// modality's bit position in a `HyperEdgeMask`.
    pub fn intermediates(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.specs.iter().filter(|s| s.role == ModalityRole::Intermediate)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &ModalitySpec> {
        self.specs.iter().filter(|s| s.role == ModalityRole::Output)
    }

    pub fn intermediate_count(&self) -> usize {
        self.intermediates().count()
    }

    /// Total channels a masked concatenation carries:
    /// sum over inputs + sum over intermediates.
    pub fn input_channel_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.role != ModalityRole::Output)
            .map(|s| s.kind.channels())
            .sum()
    }
}

/// Visibility pattern over the intermediates of a set: one hyper-edge.
/// `visible[i]` refers to the i-th intermediate in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct HyperEdgeMask {
    pub visible: Vec<bool>,
}

impl HyperEdgeMask {
    pub fn all_visible(set: &ModalitySet) -> Self {
        HyperEdgeMask { visible: vec![true; set.intermediate_count()] }
    }

    pub fn all_masked(set: &ModalitySet) -> Self {
        HyperEdgeMask { visible: vec![false; set.intermediate_count()] }
    }

    /// Bit pattern with intermediate i at bit i (1 = visible).
    pub fn bits(&self) -> u32 {
        self.visible
            .iter()
            .enumerate()
            .fold(0u32, |acc, (i, &v)| if v { acc | (1 << i) } else { acc })
    }

    pub fn from_bits(bits: u32, len: usize) -> Self {
        HyperEdgeMask { visible: (0..len).map(|i| bits & (1 << i) != 0).collect() }
    }

    pub fn visible_count(&self) -> usize {
        self.visible.iter().filter(|&&v| v).count()
    }

    fn check_len(&self, set: &ModalitySet) -> Result<()> {
        if self.visible.len() != set.intermediate_count() {
            return Err(PhgError::Shape(format!(
                "mask covers {} intermediates, set has {}",
                self.visible.len(),
                set.intermediate_count()
            )));
        }
        Ok(())
    }
}

/// Draw one hyper-edge: each intermediate is independently visible with
/// probability `p_visible`. Inputs/outputs are not represented in the mask.
pub fn sample_mask<R: Rng>(set: &ModalitySet, p_visible: f64, rng: &mut R) -> Result<HyperEdgeMask> {
    if !(0.0..=1.0).contains(&p_visible) {
        return Err(PhgError::Config(format!("p_visible {p_visible} outside [0, 1]")));
    }
    let visible = (0..set.intermediate_count()).map(|_| rng.gen_bool(p_visible)).collect();
    Ok(HyperEdgeMask { visible })
}

/// All hyper-edges of the set, in ascending bit-pattern order. The pattern
/// with every intermediate masked (the inputs-only edge) is included only
/// when `allow_all_masked` is set. Refuses sets with more than
/// `MAX_ENUMERATED_INTERMEDIATES` intermediates.
pub fn enumerate_masks(set: &ModalitySet, allow_all_masked: bool) -> Result<Vec<HyperEdgeMask>> {
    let k = set.intermediate_count();
    if k > MAX_ENUMERATED_INTERMEDIATES {
        return Err(PhgError::Config(format!(
            "enumerate_masks: {k} intermediates would enumerate 2^{k} patterns \
             (cap is {MAX_ENUMERATED_INTERMEDIATES})"
        )));
    }
    let start = if allow_all_masked { 0u32 } else { 1u32 };
    Ok((start..(1u32 << k)).map(|bits| HyperEdgeMask::from_bits(bits, k)).collect())
}

/// Per-modality payload inside a bundle.
#[derive(Debug, Clone, PartialEq)]
pub enum ModalityData {
    Continuous(Tensor),
    Categorical(ClassMap),
}

/// All modalities of one frame at a shared resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ModalityBundle {
    h: usize,
    w: usize,
    data: BTreeMap<String, ModalityData>,
}

impl ModalityBundle {
    /// Validates: every set modality present exactly once, uniform H x W,
    /// channel/label counts matching the declaration.
    pub fn new(set: &ModalitySet, entries: BTreeMap<String, ModalityData>) -> Result<Self> {
        Self::build(set, entries, true)
    }

    /// Like `new`, but output modalities may be absent: a frame being
    /// predicted has no reference data. Whatever is present still validates.
    pub fn for_inference(set: &ModalitySet, entries: BTreeMap<String, ModalityData>) -> Result<Self> {
        Self::build(set, entries, false)
    }

    fn build(
        set: &ModalitySet,
        entries: BTreeMap<String, ModalityData>,
        require_outputs: bool,
    ) -> Result<Self> {
        for name in entries.keys() {
            if set.get(name).is_none() {
                return Err(PhgError::Data(format!("bundle has undeclared modality '{name}'")));
            }
        }
        let mut hw: Option<(usize, usize)> = None;
        for spec in set.specs() {
            let entry = match entries.get(&spec.name) {
                Some(e) => e,
                None if !require_outputs && spec.role == ModalityRole::Output => continue,
                None => {
                    return Err(PhgError::Data(format!(
                        "bundle is missing modality '{}'",
                        spec.name
                    )))
                }
            };
            let (eh, ew) = match (entry, &spec.kind) {
                (ModalityData::Continuous(t), ModalityKind::Continuous { channels }) => {
                    let (c, h, w) = t.chw();
                    if c != *channels {
                        return Err(PhgError::Data(format!(
                            "modality '{}': {c} channels, declared {channels}",
                            spec.name
                        )));
                    }
                    (h, w)
                }
                (ModalityData::Categorical(m), ModalityKind::Categorical { classes }) => {
                    m.check_labels(*classes, &spec.name)?;
                    (m.height(), m.width())
                }
                _ => {
                    return Err(PhgError::Data(format!(
                        "modality '{}': payload kind does not match declaration",
                        spec.name
                    )))
                }
            };
            match hw {
                None => hw = Some((eh, ew)),
                Some((h, w)) if (h, w) != (eh, ew) => {
                    return Err(PhgError::Data(format!(
                        "modality '{}' is {eh}x{ew}, bundle is {h}x{w}",
                        spec.name
                    )));
                }
                _ => {}
            }
        }
        let (h, w) = hw.expect("validated set is non-empty");
        Ok(ModalityBundle { h, w, data: entries })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, name: &str) -> Option<&ModalityData> {
        self.data.get(name)
    }

    pub fn continuous(&self, name: &str) -> Result<&Tensor> {
        match self.data.get(name) {
            Some(ModalityData::Continuous(t)) => Ok(t),
            Some(_) => Err(PhgError::Data(format!("modality '{name}' is categorical"))),
            None => Err(PhgError::Data(format!("no modality '{name}' in bundle"))),
        }
    }

    pub fn categorical(&self, name: &str) -> Result<&ClassMap> {
        match self.data.get(name) {
            Some(ModalityData::Categorical(m)) => Ok(m),
            Some(_) => Err(PhgError::Data(format!("modality '{name}' is continuous"))),
            None => Err(PhgError::Data(format!("no modality '{name}' in bundle"))),
        }
    }

    /// Replace one modality's payload (used by augmentation); the caller is
    /// responsible for re-validating shapes via `ModalityBundle::new` when
    /// constructing from scratch.
    pub fn insert(&mut self, name: String, data: ModalityData) {
        self.data.insert(name, data);
    }
}

/// Concatenate the network-facing modalities of a bundle into one
/// `[C_total, H, W]` tensor under a hyper-edge mask.
///
/// Channel layout follows set declaration order over inputs and
/// intermediates (outputs are never part of the network input). Masked
/// intermediates contribute zero-filled blocks of their full width;
/// categorical modalities are one-hot encoded.
pub fn apply_mask(
    bundle: &ModalityBundle,
    set: &ModalitySet,
    mask: &HyperEdgeMask,
) -> Result<Tensor> {
    mask.check_len(set)?;
    let (h, w) = (bundle.height(), bundle.width());
    let c_total = set.input_channel_count();
    let mut out = Tensor::zeros(&[c_total, h, w]);
    let mut offset = 0usize;
    let mut inter_idx = 0usize;
    for spec in set.specs() {
        let width = spec.kind.channels();
        let visible = match spec.role {
            ModalityRole::Input => true,
            ModalityRole::Intermediate => {
                let v = mask.visible[inter_idx];
                inter_idx += 1;
                v
            }
            ModalityRole::Output => continue,
        };
        if visible {
            let plane: Tensor = match bundle.get(&spec.name).expect("bundle validated") {
                ModalityData::Continuous(t) => t.clone(),
                ModalityData::Categorical(m) => m.to_one_hot(spec.kind.channels())?,
            };
            out.data_mut()[offset * h * w..(offset + width) * h * w]
                .copy_from_slice(plane.data());
        }
        offset += width;
    }
    debug_assert_eq!(offset, c_total);
    Ok(out)
}
