//! The shared multi-modal multi-task CNN and its training loop.
//!
//! One small UNet trunk reads the concatenated (masked) modality channels;
//! a 1x1 head per output modality maps the top features to that task. The
//! same network realizes every hyper-edge: masking the input concatenation
//! selects which edge a forward pass computes. Training samples one mask
//! per sample per step ("1Rand") or keeps everything visible ("1All") and
//! averages the per-task losses.
//!
//! Two forward implementations exist on purpose: a plain one for inference
//! (no activation storage) and a taped one for training. Both walk the same
//! layer list and share the conv kernel, and a test pins them bit-identical.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{decode_modality_set, encode_modality_set, ConfigDoc, ConfigSection};
use crate::error::{PhgError, Result};
use crate::metrics::{benchmark, l2_metric, ClassWeights};
use crate::modality::{
    apply_mask, sample_mask, HyperEdgeMask, ModalityBundle, ModalityData, ModalityKind,
    ModalitySet,
};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::phgt::{Container, PhgtData};
use crate::tape::{conv2d_plain, NodeId, Tape};
use crate::tensor::{ClassMap, Tensor};

// --------------------------------------------------------------------------
// model sizes

/// Parameter-count ladder. Widths are tuned so the standard modality set
/// lands within a few percent of the nominal sizes (a test audits this).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSize {
    S150k,
    S430k,
    S1M,
    S4M,
}

impl ModelSize {
    pub fn width(self) -> usize {
        match self {
            ModelSize::S150k => 18,
            ModelSize::S430k => 30,
            ModelSize::S1M => 49,
            ModelSize::S4M => 98,
        }
    }

    pub fn target_params(self) -> usize {
        match self {
            ModelSize::S150k => 150_000,
            ModelSize::S430k => 430_000,
            ModelSize::S1M => 1_100_000,
            ModelSize::S4M => 4_400_000,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelSize::S150k => "150k",
            ModelSize::S430k => "430k",
            ModelSize::S1M => "1.1m",
            ModelSize::S4M => "4.4m",
        }
    }

    pub fn parse(s: &str) -> Result<ModelSize> {
        match s {
            "150k" => Ok(ModelSize::S150k),
            "430k" => Ok(ModelSize::S430k),
            "1.1m" | "1m" => Ok(ModelSize::S1M),
            "4.4m" | "4m" => Ok(ModelSize::S4M),
            other => Err(PhgError::Config(format!(
                "unknown model size '{other}' (expected 150k, 430k, 1.1m or 4.4m)"
            ))),
        }
    }
}

// --------------------------------------------------------------------------
// architecture

#[derive(Debug, Clone, PartialEq)]
struct ConvDef {
    name: String,
    ci: usize,
    co: usize,
    k: usize,
    pad: usize,
    relu: bool,
}

/// Trunk + head layer list for a given input width. Index positions are
/// fixed: 0..10 trunk convs, 10.. heads in output declaration order.
fn layer_defs(set: &ModalitySet, w: usize) -> Vec<ConvDef> {
    let cin = set.input_channel_count();
    let conv = |name: &str, ci: usize, co: usize| ConvDef {
        name: name.to_string(),
        ci,
        co,
        k: 3,
        pad: 1,
        relu: true,
    };
    let mut defs = vec![
        conv("trunk.enc0a", cin, w),
        conv("trunk.enc0b", w, w),
        conv("trunk.enc1a", w, 2 * w),
        conv("trunk.enc1b", 2 * w, 2 * w),
        conv("trunk.mid_a", 2 * w, 4 * w),
        conv("trunk.mid_b", 4 * w, 4 * w),
        conv("trunk.dec1a", 6 * w, 2 * w),
        conv("trunk.dec1b", 2 * w, 2 * w),
        conv("trunk.dec0a", 3 * w, w),
        conv("trunk.dec0b", w, w),
    ];
    for out in set.outputs() {
        defs.push(ConvDef {
            name: format!("head.{}", out.name),
            ci: w,
            co: out.kind.channels(),
            k: 1,
            pad: 0,
            relu: false,
        });
    }
    defs
}

const TRUNK_LAYERS: usize = 10;

#[derive(Debug, Clone, PartialEq)]
struct ParamSpec {
    name: String,
    dims: Vec<usize>,
    offset: usize,
}

/// The shared network: modality set, width, and one flat parameter vector
/// addressed through a stable name -> (offset, dims) layout.
#[derive(Debug, Clone)]
pub struct PhgModel {
    set: ModalitySet,
    width: usize,
    defs: Vec<ConvDef>,
    layout: Vec<ParamSpec>,
    data: Vec<f32>,
}

impl PhgModel {
    pub fn new(set: &ModalitySet, size: ModelSize, seed: u64) -> Result<PhgModel> {
        PhgModel::with_width(set, size.width(), seed)
    }

    /// Build with an explicit trunk width (tests use tiny widths).
    pub fn with_width(set: &ModalitySet, width: usize, seed: u64) -> Result<PhgModel> {
        if width == 0 {
            return Err(PhgError::Config("model width must be positive".into()));
        }
        let defs = layer_defs(set, width);
        let mut layout = Vec::with_capacity(defs.len() * 2);
        let mut offset = 0usize;
        for def in &defs {
            let kdims = vec![def.co, def.ci, def.k, def.k];
            let klen: usize = kdims.iter().product();
            layout.push(ParamSpec { name: format!("{}.kernel", def.name), dims: kdims, offset });
            offset += klen;
            layout.push(ParamSpec {
                name: format!("{}.bias", def.name),
                dims: vec![def.co],
                offset,
            });
            offset += def.co;
        }
        let mut data = vec![0.0f32; offset];
        // He-style uniform init on kernels, zero biases
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (def, pair) in defs.iter().zip(layout.chunks(2)) {
            let fan_in = (def.ci * def.k * def.k) as f64;
            let bound = (6.0 / fan_in).sqrt() as f32;
            let spec = &pair[0];
            let len: usize = spec.dims.iter().product();
            for v in &mut data[spec.offset..spec.offset + len] {
                *v = (rng.gen::<f32>() * 2.0 - 1.0) * bound;
            }
        }
        Ok(PhgModel { set: set.clone(), width, defs, layout, data })
    }

    pub fn set(&self) -> &ModalitySet {
        &self.set
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn param_count(&self) -> usize {
        self.data.len()
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.layout.iter().map(|p| p.name.as_str())
    }

    /// (offset, length) of each parameter in the flat vector, layout order.
    pub(crate) fn param_spans(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.layout.iter().map(|p| (p.offset, p.dims.iter().product()))
    }

    pub fn params_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn params_flat_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Replace the whole flat parameter vector (e.g. restore a checkpoint).
    pub fn load_flat(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.data.len() {
            return Err(PhgError::Shape(format!(
                "checkpoint has {} params, model needs {}",
                params.len(),
                self.data.len()
            )));
        }
        self.data.copy_from_slice(params);
        Ok(())
    }

    fn spec_of(&self, name: &str) -> Option<&ParamSpec> {
        self.layout.iter().find(|p| p.name == name)
    }

    /// Copy of one named parameter tensor.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        let spec = self.spec_of(name)?;
        let len: usize = spec.dims.iter().product();
        Tensor::new(spec.dims.clone(), self.data[spec.offset..spec.offset + len].to_vec()).ok()
    }

    pub fn set_param(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let spec = self
            .spec_of(name)
            .ok_or_else(|| PhgError::Config(format!("no parameter named '{name}'")))?
            .clone();
        if spec.dims != value.dims() {
            return Err(PhgError::Shape(format!(
                "parameter '{name}' has dims {:?}, got {:?}",
                spec.dims,
                value.dims()
            )));
        }
        let len: usize = spec.dims.iter().product();
        self.data[spec.offset..spec.offset + len].copy_from_slice(value.data());
        Ok(())
    }

    /// Zero every head's weights and biases (untrained-output contract).
    pub fn zero_heads(&mut self) {
        let names: Vec<String> = self
            .layout
            .iter()
            .filter(|p| p.name.starts_with("head."))
            .map(|p| p.name.clone())
            .collect();
        for name in names {
            let spec = self.spec_of(&name).unwrap();
            let (off, len) = (spec.offset, spec.dims.iter().product::<usize>());
            self.data[off..off + len].fill(0.0);
        }
    }

    fn kernel_slice(&self, layer: usize) -> &[f32] {
        let spec = &self.layout[2 * layer];
        let len: usize = spec.dims.iter().product();
        &self.data[spec.offset..spec.offset + len]
    }

    fn bias_slice(&self, layer: usize) -> &[f32] {
        let spec = &self.layout[2 * layer + 1];
        &self.data[spec.offset..spec.offset + spec.dims[0]]
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(PhgError::Shape(format!(
                "trunk pools twice; spatial dims must be positive multiples of 4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn check_input(&self, input: &Tensor) -> Result<(usize, usize)> {
        let (c, h, w) = if input.rank() == 3 {
            input.chw()
        } else {
            return Err(PhgError::Shape(format!(
                "model input must be [C,H,W], got {:?}",
                input.dims()
            )));
        };
        if c != self.set.input_channel_count() {
            return Err(PhgError::Shape(format!(
                "model expects {} input channels, got {c}",
                self.set.input_channel_count()
            )));
        }
        self.check_spatial(h, w)?;
        Ok((h, w))
    }

    /// Inference forward over an already-assembled `[C,H,W]` input.
    /// Returns raw head outputs (logits for categorical tasks).
    pub fn forward_input(&self, input: &Tensor) -> Result<BTreeMap<String, Tensor>> {
        let (h, w) = self.check_input(input)?;
        let conv = |layer: usize, inp: &[f32], hh: usize, ww: usize| -> Vec<f32> {
            let def = &self.defs[layer];
            let mut out = conv2d_plain(
                inp,
                def.ci,
                hh,
                ww,
                self.kernel_slice(layer),
                def.co,
                def.k,
                def.k,
                Some(self.bias_slice(layer)),
                def.pad,
            );
            if def.relu {
                for v in &mut out {
                    *v = v.max(0.0);
                }
            }
            out
        };
        let wdt = self.width;
        let e0 = conv(1, &conv(0, input.data(), h, w), h, w);
        let p1 = max_pool2_plain(&e0, wdt, h, w);
        let (h1, w1) = (h / 2, w / 2);
        let e1 = conv(3, &conv(2, &p1, h1, w1), h1, w1);
        let p2 = max_pool2_plain(&e1, 2 * wdt, h1, w1);
        let (h2, w2) = (h1 / 2, w1 / 2);
        let m = conv(5, &conv(4, &p2, h2, w2), h2, w2);
        let u1 = concat2(&upsample2_plain(&m, 4 * wdt, h2, w2), &e1);
        let d1 = conv(7, &conv(6, &u1, h1, w1), h1, w1);
        let u0 = concat2(&upsample2_plain(&d1, 2 * wdt, h1, w1), &e0);
        let d0 = conv(9, &conv(8, &u0, h, w), h, w);

        let mut out = BTreeMap::new();
        for (i, spec) in self.set.outputs().enumerate() {
            let layer = TRUNK_LAYERS + i;
            let logits = conv(layer, &d0, h, w);
            out.insert(
                spec.name.clone(),
                Tensor::new(vec![self.defs[layer].co, h, w], logits)?,
            );
        }
        Ok(out)
    }

    /// Inference forward for a bundle under a hyper-edge mask.
    pub fn forward(
        &self,
        bundle: &ModalityBundle,
        mask: &HyperEdgeMask,
    ) -> Result<BTreeMap<String, Tensor>> {
        let input = apply_mask(bundle, &self.set, mask)?;
        self.forward_input(&input)
    }

    /// Taped forward used by training. Returns the head output nodes plus
    /// the parameter nodes aligned with the layout (kernel, bias per layer).
    pub(crate) fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Tensor,
    ) -> Result<(BTreeMap<String, NodeId>, Vec<NodeId>)> {
        self.check_input(&input)?;
        let mut param_ids = Vec::with_capacity(self.layout.len());
        for spec in &self.layout {
            let len: usize = spec.dims.iter().product();
            let t = Tensor::new(
                spec.dims.clone(),
                self.data[spec.offset..spec.offset + len].to_vec(),
            )?;
            param_ids.push(tape.parameter(t));
        }
        let conv = |tape: &mut Tape, layer: usize, x: NodeId| -> Result<NodeId> {
            let def = &self.defs[layer];
            let y = tape.conv2d(x, param_ids[2 * layer], Some(param_ids[2 * layer + 1]), def.pad)?;
            Ok(if def.relu { tape.relu(y) } else { y })
        };
        let x = tape.constant(input);
        let e0 = {
            let t = conv(tape, 0, x)?;
            conv(tape, 1, t)?
        };
        let p1 = tape.max_pool2(e0)?;
        let e1 = {
            let t = conv(tape, 2, p1)?;
            conv(tape, 3, t)?
        };
        let p2 = tape.max_pool2(e1)?;
        let m = {
            let t = conv(tape, 4, p2)?;
            conv(tape, 5, t)?
        };
        let up1 = tape.upsample_nearest2(m)?;
        let u1 = tape.concat_channels(&[up1, e1])?;
        let d1 = {
            let t = conv(tape, 6, u1)?;
            conv(tape, 7, t)?
        };
        let up0 = tape.upsample_nearest2(d1)?;
        let u0 = tape.concat_channels(&[up0, e0])?;
        let d0 = {
            let t = conv(tape, 8, u0)?;
            conv(tape, 9, t)?
        };
        let mut heads = BTreeMap::new();
        for (i, spec) in self.set.outputs().enumerate() {
            heads.insert(spec.name.clone(), conv(tape, TRUNK_LAYERS + i, d0)?);
        }
        Ok((heads, param_ids))
    }

    // -- persistence --------------------------------------------------------

    /// Config echo stored inside checkpoints.
    fn meta_doc(&self) -> ConfigDoc {
        let mut doc = ConfigDoc::new();
        let mut model = ConfigSection::new("model");
        model.set("width", self.width);
        doc.push(model);
        for s in encode_modality_set(&self.set) {
            doc.push(s);
        }
        doc
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = Container::new();
        c.insert_text("meta", &self.meta_doc().render());
        for spec in &self.layout {
            let len: usize = spec.dims.iter().product();
            let t = Tensor::new(
                spec.dims.clone(),
                self.data[spec.offset..spec.offset + len].to_vec(),
            )?;
            c.insert_tensor(&format!("param.{}", spec.name), PhgtData::F32(t));
        }
        c.write(path)
    }

    pub fn load(path: &Path) -> Result<PhgModel> {
        let c = Container::read(path)?;
        let meta = c.text("meta").ok_or_else(|| PhgError::Format {
            path: path.to_path_buf(),
            reason: "checkpoint has no 'meta' entry".into(),
        })?;
        let doc = ConfigDoc::parse(meta)?;
        let set = decode_modality_set(&doc)?;
        let width = doc.require_section("model")?.parse_as("width")?;
        let mut model = PhgModel::with_width(&set, width, 0)?;
        for spec in model.layout.clone() {
            let entry = c.tensor(&format!("param.{}", spec.name)).ok_or_else(|| {
                PhgError::Format {
                    path: path.to_path_buf(),
                    reason: format!("checkpoint is missing parameter '{}'", spec.name),
                }
            })?;
            let PhgtData::F32(t) = entry else {
                return Err(PhgError::Format {
                    path: path.to_path_buf(),
                    reason: format!("parameter '{}' is not an f32 tensor", spec.name),
                });
            };
            model.set_param(&spec.name, t)?;
        }
        Ok(model)
    }
}

// plain counterparts of the tape's pooling/upsampling, same scan order

fn max_pool2_plain(inp: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = inp[(ci * h + 2 * oy) * w + 2 * ox];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = inp[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                    if v > best {
                        best = v;
                    }
                }
                out[(ci * oh + oy) * ow + ox] = best;
            }
        }
    }
    out
}

fn upsample2_plain(inp: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; c * oh * ow];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let v = inp[(ci * h + y) * w + x];
                let base = (ci * oh + 2 * y) * ow + 2 * x;
                out[base] = v;
                out[base + 1] = v;
                out[base + ow] = v;
                out[base + ow + 1] = v;
            }
        }
    }
    out
}

fn concat2(a: &[f32], b: &[f32]) -> Vec<f32> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

/// Per-pixel softmax over channels of a `[K,H,W]` logits tensor, computed
/// exactly like the tape's softmax (max-shifted, f64 denominator).
pub fn softmax_probs(logits: &Tensor) -> Result<Tensor> {
    let (k, h, w) = if logits.rank() == 3 {
        logits.chw()
    } else {
        return Err(PhgError::Shape(format!("softmax expects [K,H,W], got {:?}", logits.dims())));
    };
    let inp = logits.data();
    let plane = h * w;
    let mut data = vec![0.0f32; k * plane];
    for p in 0..plane {
        let mut maxv = f32::NEG_INFINITY;
        for c in 0..k {
            maxv = maxv.max(inp[c * plane + p]);
        }
        let mut denom = 0.0f64;
        for c in 0..k {
            denom += ((inp[c * plane + p] - maxv) as f64).exp();
        }
        for c in 0..k {
            data[c * plane + p] = (((inp[c * plane + p] - maxv) as f64).exp() / denom) as f32;
        }
    }
    Tensor::new(vec![k, h, w], data)
}

// plain loss mirrors of the tape losses (same accumulation order)

fn cross_entropy_plain(logits: &Tensor, target: &ClassMap) -> Result<f64> {
    let (k, h, w) = logits.chw();
    if target.height() != h || target.width() != w {
        return Err(PhgError::Shape("cross_entropy: size mismatch".into()));
    }
    target.check_labels(k, "cross_entropy_plain")?;
    let data = logits.data();
    let plane = h * w;
    let mut acc = 0.0f64;
    for p in 0..plane {
        let mut maxv = f32::NEG_INFINITY;
        for c in 0..k {
            maxv = maxv.max(data[c * plane + p]);
        }
        let mut denom = 0.0f64;
        for c in 0..k {
            denom += ((data[c * plane + p] - maxv) as f64).exp();
        }
        let t = target.data()[p] as usize;
        acc += denom.ln() + maxv as f64 - data[t * plane + p] as f64;
    }
    Ok(acc / plane as f64)
}

fn l2_plain(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.dims() != target.dims() {
        return Err(PhgError::Shape("l2: size mismatch".into()));
    }
    let acc: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(acc / pred.len().max(1) as f64)
}

// --------------------------------------------------------------------------
// training configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    OneAll,
    OneRand,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<TrainMode> {
        match s {
            "1all" => Ok(TrainMode::OneAll),
            "1rand" => Ok(TrainMode::OneRand),
            other => Err(PhgError::Config(format!(
                "unknown train mode '{other}' (expected 1all or 1rand)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TrainMode::OneAll => "1all",
            TrainMode::OneRand => "1rand",
        }
    }
}

/// How the shared-best checkpoint is picked from the per-epoch log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SelectionMetric {
    /// Minimize validation loss (mean of task losses).
    ValLoss,
    /// Optimize one task's validation metric (max for categorical tasks,
    /// min for continuous ones).
    Task(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub p_visible: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Maximum linear crop fraction for augmentation, 0 disables, at most 0.5.
    pub crop: f64,
    pub seed: u64,
    pub optim: AdamWConfig,
    pub selection: SelectionMetric,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            mode: TrainMode::OneRand,
            p_visible: 0.5,
            epochs: 10,
            batch_size: 2,
            crop: 0.5,
            seed: 0,
            optim: AdamWConfig::default(),
            selection: SelectionMetric::ValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_visible) {
            return Err(PhgError::Config(format!("p_visible {} outside [0,1]", self.p_visible)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(PhgError::Config("epochs and batch_size must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.crop) {
            return Err(PhgError::Config(format!("crop fraction {} outside [0, 0.5]", self.crop)));
        }
        self.optim.validate()
    }

    /// "1All" is the p_visible = 1 corner of the masking rule.
    pub fn effective_p_visible(&self) -> f64 {
        match self.mode {
            TrainMode::OneAll => 1.0,
            TrainMode::OneRand => self.p_visible,
        }
    }

    pub fn to_section(&self) -> ConfigSection {
        let mut s = ConfigSection::new("train");
        s.set("mode", self.mode.name());
        s.set("p_visible", self.p_visible);
        s.set("epochs", self.epochs);
        s.set("batch_size", self.batch_size);
        s.set("crop", self.crop);
        s.set("seed", self.seed);
        s.set("lr_min", self.optim.lr_min);
        s.set("lr_max", self.optim.lr_max);
        s.set("lr_period", self.optim.lr_period);
        s.set("beta1", self.optim.beta1);
        s.set("beta2", self.optim.beta2);
        s.set("eps", self.optim.eps);
        s.set("weight_decay", self.optim.weight_decay);
        s.set(
            "selection",
            match &self.selection {
                SelectionMetric::ValLoss => "val_loss".to_string(),
                SelectionMetric::Task(t) => format!("task:{t}"),
            },
        );
        s
    }

    pub fn from_section(s: &ConfigSection) -> Result<TrainConfig> {
        let d = TrainConfig::default();
        let selection = match s.get("selection") {
            None | Some("val_loss") => SelectionMetric::ValLoss,
            Some(v) => match v.strip_prefix("task:") {
                Some(task) => SelectionMetric::Task(task.to_string()),
                None => {
                    return Err(PhgError::Config(format!(
                        "selection must be 'val_loss' or 'task:<name>', got '{v}'"
                    )))
                }
            },
        };
        let config = TrainConfig {
            mode: TrainMode::parse(s.get("mode").unwrap_or("1rand"))?,
            p_visible: s.parse_or("p_visible", d.p_visible)?,
            epochs: s.parse_or("epochs", d.epochs)?,
            batch_size: s.parse_or("batch_size", d.batch_size)?,
            crop: s.parse_or("crop", d.crop)?,
            seed: s.parse_or("seed", d.seed)?,
            optim: AdamWConfig {
                lr_min: s.parse_or("lr_min", d.optim.lr_min)?,
                lr_max: s.parse_or("lr_max", d.optim.lr_max)?,
                lr_period: s.parse_or("lr_period", d.optim.lr_period)?,
                beta1: s.parse_or("beta1", d.optim.beta1)?,
                beta2: s.parse_or("beta2", d.optim.beta2)?,
                eps: s.parse_or("eps", d.optim.eps)?,
                weight_decay: s.parse_or("weight_decay", d.optim.weight_decay)?,
            },
            selection,
        };
        config.validate()?;
        Ok(config)
    }
}

// --------------------------------------------------------------------------
// augmentation

/// Random crop (up to the configured linear fraction) followed by a rescale
/// back to the original size. One spatial transform per call, applied to
/// every modality: bilinear for continuous, nearest for categorical.
pub fn augment_bundle(
    bundle: &ModalityBundle,
    set: &ModalitySet,
    max_crop: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ModalityBundle> {
    let (h, w) = (bundle.height(), bundle.width());
    let s = 1.0 - rng.gen::<f64>() * max_crop;
    let ch = ((h as f64 * s).round() as usize).clamp(4, h);
    let cw = ((w as f64 * s).round() as usize).clamp(4, w);
    let y0 = rng.gen_range(0..=h - ch);
    let x0 = rng.gen_range(0..=w - cw);

    let mut entries = BTreeMap::new();
    for spec in set.specs() {
        let value = match bundle.get(&spec.name).expect("bundle validated against set") {
            ModalityData::Continuous(t) => {
                ModalityData::Continuous(t.crop(y0, x0, ch, cw)?.resize_bilinear(h, w))
            }
            ModalityData::Categorical(m) => {
                ModalityData::Categorical(m.crop(y0, x0, ch, cw)?.resize_nearest(h, w))
            }
        };
        entries.insert(spec.name.clone(), value);
    }
    ModalityBundle::new(set, entries)
}

// --------------------------------------------------------------------------
// training guard

thread_local! {
    static TRAINING_DEPTH: std::cell::Cell<usize> = const { std::cell::Cell::new(0) };
}

/// RAII marker: while one is alive on this thread, evaluation-only oracles
/// refuse to run. Training entry points hold one for their whole duration.
pub struct TrainingScope(());

pub fn enter_training() -> TrainingScope {
    TRAINING_DEPTH.with(|d| d.set(d.get() + 1));
    TrainingScope(())
}

pub fn training_active() -> bool {
    TRAINING_DEPTH.with(|d| d.get() > 0)
}

impl Drop for TrainingScope {
    fn drop(&mut self) {
        TRAINING_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

// --------------------------------------------------------------------------
// trainer

/// A named scene: an ordered list of per-frame bundles.
#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub frames: Vec<ModalityBundle>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Per-task validation metric: weighted-IoU score for categorical tasks
    /// (higher is better), L2x100 for continuous ones (lower is better).
    pub task_metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone)]
pub struct TaskBest {
    pub epoch: usize,
    pub value: f64,
    pub params: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub log: Vec<EpochLog>,
    /// Epoch whose checkpoint the model was left at (selection metric).
    pub best_epoch: usize,
    pub per_task_best: BTreeMap<String, TaskBest>,
}

impl FitReport {
    /// Epoch log as CSV: epoch, train/val loss, then task metrics sorted by
    /// task name.
    pub fn log_csv(&self) -> String {
        let mut tasks: Vec<&String> = self
            .log
            .first()
            .map(|e| e.task_metrics.keys().collect())
            .unwrap_or_default();
        tasks.sort();
        let mut out = String::from("epoch,train_loss,val_loss");
        for t in &tasks {
            out.push_str(&format!(",{t}"));
        }
        out.push('\n');
        for e in &self.log {
            out.push_str(&format!("{},{:.6},{:.6}", e.epoch, e.train_loss, e.val_loss));
            for t in &tasks {
                out.push_str(&format!(",{:.6}", e.task_metrics[*t]));
            }
            out.push('\n');
        }
        out
    }
}

/// Owns the model during training: optimizer state plus two independent rng
/// streams (masks and data order/augmentation), so a 1Rand run at p=1
/// consumes masks without disturbing the data stream and stays bit-identical
/// to 1All.
pub struct Trainer {
    pub model: PhgModel,
    pub config: TrainConfig,
    opt: OptimizerState,
    mask_rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: PhgModel, config: TrainConfig) -> Result<Trainer> {
        config.validate()?;
        let opt = OptimizerState::new(config.optim.clone(), model.param_count())?;
        let mut mask_rng = ChaCha8Rng::seed_from_u64(config.seed);
        mask_rng.set_stream(1);
        let mut data_rng = ChaCha8Rng::seed_from_u64(config.seed);
        data_rng.set_stream(2);
        Ok(Trainer { model, config, opt, mask_rng, data_rng })
    }

    /// One optimizer step on a batch: per-sample hyper-edge mask, per-task
    /// losses averaged in task-name order, per-sample gradients averaged in
    /// batch order (f64), one AdamW update. Returns the batch loss.
    pub fn train_step(&mut self, batch: &[&ModalityBundle]) -> Result<f64> {
        let _guard = enter_training();
        if batch.is_empty() {
            return Err(PhgError::Config("train_step: empty batch".into()));
        }
        let p = self.config.effective_p_visible();
        let mut masks = Vec::with_capacity(batch.len());
        for _ in batch {
            masks.push(match self.config.mode {
                TrainMode::OneAll => HyperEdgeMask::all_visible(self.model.set()),
                TrainMode::OneRand => sample_mask(self.model.set(), p, &mut self.mask_rng)?,
            });
        }
        let inputs: Vec<Tensor> = batch
            .iter()
            .zip(&masks)
            .map(|(b, m)| apply_mask(b, self.model.set(), m))
            .collect::<Result<_>>()?;

        // gradients per sample in parallel, then a fixed-order average so
        // the result is independent of thread scheduling
        let model = &self.model;
        let per_sample: Vec<(f64, Vec<f32>)> = inputs
            .into_par_iter()
            .zip(batch.par_iter())
            .map(|(input, bundle)| sample_loss_and_grads(model, input, bundle))
            .collect::<Result<_>>()?;

        let n = per_sample.len();
        let mut grad_acc = vec![0.0f64; self.model.param_count()];
        let mut loss_acc = 0.0f64;
        for (loss, grads) in &per_sample {
            loss_acc += loss;
            for (a, g) in grad_acc.iter_mut().zip(grads.iter()) {
                *a += *g as f64;
            }
        }
        let loss = loss_acc / n as f64;
        if !loss.is_finite() {
            return Err(PhgError::Numeric(format!(
                "training loss became {loss} at optimizer step {}",
                self.opt.step_count()
            )));
        }
        let grads: Vec<f32> = grad_acc.iter().map(|g| (*g / n as f64) as f32).collect();
        self.opt.adamw_step(self.model.params_flat_mut(), &grads)?;
        Ok(loss)
    }

    /// Validation pass with the all-visible mask: mean task loss plus the
    /// per-task metrics (categorical: benchmark score, continuous: L2x100).
    pub fn validate_on(&self, scenes: &[Scene]) -> Result<(f64, BTreeMap<String, f64>)> {
        validate_model(&self.model, scenes)
    }

    /// Full training loop: shuffled batches with augmentation, one log row
    /// per epoch, best-checkpoint tracking. Leaves the model at the
    /// selection-best epoch's parameters.
    pub fn fit(&mut self, train: &[Scene], val: &[Scene]) -> Result<FitReport> {
        let _guard = enter_training();
        if train.is_empty() || val.is_empty() {
            return Err(PhgError::Config("fit: train and val sets must be nonempty".into()));
        }
        for t in train {
            if val.iter().any(|v| v.name == t.name) {
                return Err(PhgError::Config(format!(
                    "fit: scene '{}' appears in both train and val",
                    t.name
                )));
            }
        }
        let frames: Vec<(usize, usize)> = train
            .iter()
            .enumerate()
            .flat_map(|(si, s)| (0..s.frames.len()).map(move |fi| (si, fi)))
            .collect();
        if frames.is_empty() {
            return Err(PhgError::Config("fit: no training frames".into()));
        }

        let mut log = Vec::with_capacity(self.config.epochs);
        let mut best: Option<(usize, f64, Vec<f32>)> = None; // epoch, key, params
        let mut per_task_best: BTreeMap<String, TaskBest> = BTreeMap::new();
        let task_dirs: BTreeMap<String, bool> = self
            .model
            .set()
            .outputs()
            .map(|s| (s.name.clone(), matches!(s.kind, ModalityKind::Categorical { .. })))
            .collect();

        for epoch in 0..self.config.epochs {
            let mut order = frames.clone();
            order.shuffle(&mut self.data_rng);
            let mut loss_sum = 0.0f64;
            let mut sample_count = 0usize;
            for chunk in order.chunks(self.config.batch_size) {
                let mut augmented: Vec<ModalityBundle> = Vec::with_capacity(chunk.len());
                for &(si, fi) in chunk {
                    let bundle = &train[si].frames[fi];
                    augmented.push(if self.config.crop > 0.0 {
                        augment_bundle(bundle, self.model.set(), self.config.crop, &mut self.data_rng)?
                    } else {
                        bundle.clone()
                    });
                }
                let refs: Vec<&ModalityBundle> = augmented.iter().collect();
                let loss = self.train_step(&refs)?;
                loss_sum += loss * refs.len() as f64;
                sample_count += refs.len();
            }
            let train_loss = loss_sum / sample_count as f64;
            let (val_loss, task_metrics) = self.validate_on(val)?;

            // selection key: lower is better; categorical metrics are negated
            let key = match &self.config.selection {
                SelectionMetric::ValLoss => val_loss,
                SelectionMetric::Task(t) => {
                    let v = *task_metrics.get(t).ok_or_else(|| {
                        PhgError::Config(format!("selection task '{t}' is not an output"))
                    })?;
                    if task_dirs[t] {
                        -v
                    } else {
                        v
                    }
                }
            };
            if best.as_ref().is_none_or(|(_, k, _)| key < *k) {
                best = Some((epoch, key, self.model.params_flat().to_vec()));
            }
            for (task, &value) in &task_metrics {
                let better = per_task_best.get(task).is_none_or(|b| {
                    if task_dirs[task] {
                        value > b.value
                    } else {
                        value < b.value
                    }
                });
                if better {
                    per_task_best.insert(
                        task.clone(),
                        TaskBest { epoch, value, params: self.model.params_flat().to_vec() },
                    );
                }
            }
            log.push(EpochLog { epoch, train_loss, val_loss, task_metrics });
        }

        let (best_epoch, _, best_params) = best.expect("at least one epoch ran");
        self.model.load_flat(&best_params)?;
        Ok(FitReport { log, best_epoch, per_task_best })
    }
}

/// Loss and flat gradient for one (input, bundle) pair on a fresh tape.
fn sample_loss_and_grads(
    model: &PhgModel,
    input: Tensor,
    bundle: &ModalityBundle,
) -> Result<(f64, Vec<f32>)> {
    let mut tape = Tape::new();
    let (heads, param_ids) = model.forward_on_tape(&mut tape, input)?;
    // per-task losses in task-name order (declaration-order invariant)
    let mut losses = Vec::with_capacity(heads.len());
    for (task, node) in &heads {
        let spec = model.set().get(task).expect("head names come from the set");
        let loss = match spec.kind {
            ModalityKind::Categorical { .. } => {
                tape.cross_entropy_loss(*node, bundle.categorical(task)?)?
            }
            ModalityKind::Continuous { .. } => tape.l2_loss(*node, bundle.continuous(task)?)?,
        };
        losses.push(loss);
    }
    let total = tape.mean_scalars(&losses)?;
    let loss = tape.scalar(total)?;
    let grads = tape.backward(total)?;
    let mut flat = vec![0.0f32; model.param_count()];
    for (spec, id) in model.layout.iter().zip(param_ids) {
        if let Some(g) = grads.get(id) {
            let len: usize = spec.dims.iter().product();
            flat[spec.offset..spec.offset + len].copy_from_slice(g);
        }
    }
    Ok((loss, flat))
}

/// Validation pass shared by the trainer and the CLI: all-visible forward,
/// mean task loss, benchmark-style categorical scores, L2x100 regression.
pub fn validate_model(model: &PhgModel, scenes: &[Scene]) -> Result<(f64, BTreeMap<String, f64>)> {
    if scenes.is_empty() {
        return Err(PhgError::Config("validate: no scenes".into()));
    }
    let mask = HyperEdgeMask::all_visible(model.set());
    let mut loss_acc = 0.0f64;
    let mut frame_count = 0usize;
    // categorical: per-scene (pred, gt) pairs for the benchmark formula
    let mut cat_pairs: BTreeMap<String, Vec<(String, Vec<(ClassMap, ClassMap)>)>> = BTreeMap::new();
    let mut cont_acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();

    for scene in scenes {
        for bundle in &scene.frames {
            let outs = model.forward(bundle, &mask)?;
            let mut task_losses = Vec::new();
            for (task, pred) in &outs {
                let spec = model.set().get(task).expect("output spec");
                match spec.kind {
                    ModalityKind::Categorical { .. } => {
                        let gt = bundle.categorical(task)?;
                        task_losses.push(cross_entropy_plain(pred, gt)?);
                        let pred_map = ClassMap::from_argmax(pred);
                        // scenes are walked in order, so the current scene is
                        // always the last entry if it exists at all
                        let entry = cat_pairs.entry(task.clone()).or_default();
                        match entry.last_mut() {
                            Some((n, v)) if n == &scene.name => v.push((pred_map, gt.clone())),
                            _ => entry.push((scene.name.clone(), vec![(pred_map, gt.clone())])),
                        }
                    }
                    ModalityKind::Continuous { .. } => {
                        let target = bundle.continuous(task)?;
                        task_losses.push(l2_plain(pred, target)?);
                        let e = cont_acc.entry(task.clone()).or_insert((0.0, 0));
                        e.0 += l2_metric(pred, target, None)?;
                        e.1 += 1;
                    }
                }
            }
            loss_acc += task_losses.iter().sum::<f64>() / task_losses.len() as f64;
            frame_count += 1;
        }
    }

    let mut metrics = BTreeMap::new();
    for (task, scenes_pairs) in cat_pairs {
        let classes = match model.set().get(&task).unwrap().kind {
            ModalityKind::Categorical { classes } => classes,
            _ => unreachable!(),
        };
        let weights = if classes == 8 {
            ClassWeights::aerial8()
        } else {
            ClassWeights::uniform(classes)?
        };
        let report = benchmark(&scenes_pairs, &weights)?;
        metrics.insert(task, report.final_score);
    }
    for (task, (sum, n)) in cont_acc {
        metrics.insert(task, sum / n as f64);
    }
    Ok((loss_acc / frame_count as f64, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modality::{ModalityRole, ModalitySpec};
    use crate::synth::standard_modality_set;

    fn tiny_set() -> ModalitySet {
        use ModalityRole::{Input, Intermediate, Output};
        ModalitySet::new(vec![
            ModalitySpec::continuous("rgb", Input, 3),
            ModalitySpec::continuous("depth-est", Intermediate, 1),
            ModalitySpec::categorical("sem-est", Intermediate, 4),
            ModalitySpec::categorical("gt-sem", Output, 4),
            ModalitySpec::continuous("gt-depth", Output, 1),
        ])
        .unwrap()
    }

    fn rand_bundle(set: &ModalitySet, h: usize, w: usize, seed: u64) -> ModalityBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut entries = BTreeMap::new();
        for spec in set.specs() {
            let data = match spec.kind {
                ModalityKind::Continuous { channels } => ModalityData::Continuous(
                    Tensor::new(
                        vec![channels, h, w],
                        (0..channels * h * w).map(|_| rng.gen::<f32>()).collect(),
                    )
                    .unwrap(),
                ),
                ModalityKind::Categorical { classes } => ModalityData::Categorical(
                    ClassMap::new(h, w, (0..h * w).map(|_| rng.gen_range(0..classes as u8)).collect())
                        .unwrap(),
                ),
            };
            entries.insert(spec.name.clone(), data);
        }
        ModalityBundle::new(set, entries).unwrap()
    }

    fn scenes_from(set: &ModalitySet, names: &[&str], frames: usize, seed: u64) -> Vec<Scene> {
        names
            .iter()
            .enumerate()
            .map(|(i, n)| Scene {
                name: n.to_string(),
                frames: (0..frames)
                    .map(|f| rand_bundle(set, 16, 16, seed + (i * 100 + f) as u64))
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn parameter_ladder_lands_on_the_advertised_sizes() {
        let set = standard_modality_set();
        for size in [ModelSize::S150k, ModelSize::S430k, ModelSize::S1M, ModelSize::S4M] {
            let m = PhgModel::new(&set, size, 0).unwrap();
            let target = size.target_params() as f64;
            let got = m.param_count() as f64;
            let rel = ((got - target) / target).abs();
            assert!(rel < 0.05, "{}: {got} params vs target {target} ({rel:.3} off)", size.name());
        }
    }

    #[test]
    fn parameter_layout_is_contiguous_and_named() {
        let m = PhgModel::new(&standard_modality_set(), ModelSize::S150k, 3).unwrap();
        let names: Vec<&str> = m.param_names().collect();
        assert_eq!(names[0], "trunk.enc0a.kernel");
        assert_eq!(names[1], "trunk.enc0a.bias");
        assert!(names.contains(&"head.gt-semantic.kernel"));
        assert!(names.contains(&"head.gt-normals.bias"));
        let mut offset = 0usize;
        for spec in &m.layout {
            assert_eq!(spec.offset, offset, "hole before {}", spec.name);
            offset += spec.dims.iter().product::<usize>();
        }
        assert_eq!(offset, m.param_count());
        // round trip one named parameter through the accessor pair
        let k = m.param("trunk.mid_a.kernel").unwrap();
        assert_eq!(k.dims(), &[72, 36, 3, 3]);
    }

    #[test]
    fn plain_and_taped_forwards_agree_bitwise() {
        let set = tiny_set();
        let model = PhgModel::with_width(&set, 6, 11).unwrap();
        let bundle = rand_bundle(&set, 16, 24, 7);
        let input = apply_mask(&bundle, &set, &HyperEdgeMask::all_visible(&set)).unwrap();

        let plain = model.forward_input(&input).unwrap();
        let mut tape = Tape::new();
        let (heads, _) = model.forward_on_tape(&mut tape, input).unwrap();
        assert_eq!(plain.len(), heads.len());
        for (task, t) in &plain {
            let taped = tape.tensor(heads[task]);
            assert_eq!(t.dims(), taped.dims());
            assert_eq!(t.data(), taped.data(), "task {task} diverged between paths");
        }
    }

    #[test]
    fn zeroed_heads_emit_exactly_zero() {
        let set = tiny_set();
        let mut model = PhgModel::with_width(&set, 5, 2).unwrap();
        model.zero_heads();
        let bundle = rand_bundle(&set, 16, 16, 1);
        let outs = model.forward(&bundle, &HyperEdgeMask::all_visible(&set)).unwrap();
        for (task, t) in outs {
            assert!(t.data().iter().all(|&v| v == 0.0), "head {task} left residue");
        }
    }

    #[test]
    fn masking_matches_a_prezeroed_bundle() {
        // Zero-filling a continuous intermediate by hand must be
        // indistinguishable from masking it. (Categorical intermediates have
        // no bundle-side equivalent: no class map one-hots to all zeros.)
        let set = tiny_set();
        let model = PhgModel::with_width(&set, 6, 4).unwrap();
        let bundle = rand_bundle(&set, 16, 16, 9);

        let mut masked = HyperEdgeMask::all_visible(&set);
        masked.visible[0] = false; // depth-est

        let mut prezeroed = bundle.clone();
        prezeroed.insert(
            "depth-est".to_string(),
            ModalityData::Continuous(Tensor::zeros(&[1, 16, 16])),
        );

        let a = apply_mask(&bundle, &set, &masked).unwrap();
        let b = apply_mask(&prezeroed, &set, &HyperEdgeMask::all_visible(&set)).unwrap();
        assert_eq!(a.data(), b.data());

        let outs_a = model.forward_input(&a).unwrap();
        let outs_b = model.forward_input(&b).unwrap();
        for (task, t) in &outs_a {
            assert_eq!(t.data(), outs_b[task].data());
        }
    }

    #[test]
    fn masked_channels_receive_exactly_zero_kernel_gradients() {
        let set = tiny_set();
        let model = PhgModel::with_width(&set, 6, 13).unwrap();
        let bundle = rand_bundle(&set, 16, 16, 3);
        let mut mask = HyperEdgeMask::all_visible(&set);
        mask.visible[0] = false; // depth-est occupies input channel 3
        let input = apply_mask(&bundle, &set, &mask).unwrap();
        let (_, grads) = sample_loss_and_grads(&model, input, &bundle).unwrap();

        // enc0a.kernel is [6, 8, 3, 3] at offset 0; channel column 3 is the
        // masked block and must carry a bitwise-zero gradient
        let (ci, kk) = (8, 9);
        let mut rgb_nonzero = 0usize;
        for o in 0..6 {
            for k in 0..kk {
                assert_eq!(grads[(o * ci + 3) * kk + k], 0.0);
                for c in 0..3 {
                    if grads[(o * ci + c) * kk + k] != 0.0 {
                        rgb_nonzero += 1;
                    }
                }
            }
        }
        assert!(rgb_nonzero > 0, "visible channels should receive gradient");
    }

    #[test]
    fn loss_ignores_output_declaration_order() {
        use ModalityRole::{Input, Intermediate, Output};
        let set_a = tiny_set();
        let set_b = ModalitySet::new(vec![
            ModalitySpec::continuous("rgb", Input, 3),
            ModalitySpec::continuous("depth-est", Intermediate, 1),
            ModalitySpec::categorical("sem-est", Intermediate, 4),
            ModalitySpec::continuous("gt-depth", Output, 1), // swapped
            ModalitySpec::categorical("gt-sem", Output, 4),
        ])
        .unwrap();

        let model_a = PhgModel::with_width(&set_a, 6, 1).unwrap();
        let mut model_b = PhgModel::with_width(&set_b, 6, 2).unwrap();
        for name in model_a.param_names().map(String::from).collect::<Vec<_>>() {
            model_b.set_param(&name, &model_a.param(&name).unwrap()).unwrap();
        }

        let bundle_a = rand_bundle(&set_a, 16, 16, 5);
        let mut entries = BTreeMap::new();
        for spec in set_b.specs() {
            entries.insert(spec.name.clone(), bundle_a.get(&spec.name).unwrap().clone());
        }
        let bundle_b = ModalityBundle::new(&set_b, entries).unwrap();

        let input_a = apply_mask(&bundle_a, &set_a, &HyperEdgeMask::all_visible(&set_a)).unwrap();
        let input_b = apply_mask(&bundle_b, &set_b, &HyperEdgeMask::all_visible(&set_b)).unwrap();
        assert_eq!(input_a.data(), input_b.data(), "input layout must not depend on outputs");

        let (loss_a, grads_a) = sample_loss_and_grads(&model_a, input_a, &bundle_a).unwrap();
        let (loss_b, grads_b) = sample_loss_and_grads(&model_b, input_b, &bundle_b).unwrap();
        // task losses average in name order, so the loss is exactly equal
        assert_eq!(loss_a, loss_b);
        // gradients agree only up to summation order: the heads hand their
        // contributions to the trunk in declaration order, which reassociates
        // the float additions. Trunk params occupy the same flat prefix.
        let trunk_len = model_a
            .layout
            .iter()
            .filter(|s| s.name.starts_with("trunk."))
            .map(|s| s.dims.iter().product::<usize>())
            .sum::<usize>();
        for i in 0..trunk_len {
            let (a, b) = (grads_a[i], grads_b[i]);
            assert!((a - b).abs() <= 1e-6 + 1e-4 * a.abs(), "trunk grad {i}: {a} vs {b}");
        }
    }

    #[test]
    fn taped_loss_matches_plain_recomputation() {
        let set = tiny_set();
        let model = PhgModel::with_width(&set, 6, 21).unwrap();
        let bundle = rand_bundle(&set, 16, 16, 22);
        let input = apply_mask(&bundle, &set, &HyperEdgeMask::all_visible(&set)).unwrap();
        let (taped, _) = sample_loss_and_grads(&model, input.clone(), &bundle).unwrap();

        let outs = model.forward_input(&input).unwrap();
        // tasks average in name order: gt-depth (l2) then gt-sem (ce)
        let l2 = l2_plain(&outs["gt-depth"], bundle.continuous("gt-depth").unwrap()).unwrap();
        let ce = cross_entropy_plain(&outs["gt-sem"], bundle.categorical("gt-sem").unwrap()).unwrap();
        assert_eq!(taped, (l2 + ce) / 2.0);
    }

    #[test]
    fn model_rejects_bad_input_shapes() {
        let set = tiny_set();
        let model = PhgModel::with_width(&set, 4, 0).unwrap();
        // 18 is not a multiple of 4
        assert!(model.forward_input(&Tensor::zeros(&[8, 18, 20])).is_err());
        // wrong channel count
        assert!(model.forward_input(&Tensor::zeros(&[7, 16, 16])).is_err());
        assert!(PhgModel::with_width(&set, 0, 0).is_err());
    }

    #[test]
    fn one_rand_at_p_one_reproduces_one_all_bitwise() {
        let set = tiny_set();
        let train = scenes_from(&set, &["a", "b"], 2, 10);
        let val = scenes_from(&set, &["v"], 1, 90);

        let mut reports = Vec::new();
        let mut params = Vec::new();
        for mode in [TrainMode::OneAll, TrainMode::OneRand] {
            let config = TrainConfig {
                mode,
                p_visible: 1.0,
                epochs: 2,
                batch_size: 2,
                crop: 0.3,
                seed: 5,
                ..TrainConfig::default()
            };
            let model = PhgModel::with_width(&set, 6, 40).unwrap();
            let mut trainer = Trainer::new(model, config).unwrap();
            let report = trainer.fit(&train, &val).unwrap();
            reports.push(report.log);
            params.push(trainer.model.params_flat().to_vec());
        }
        assert_eq!(reports[0], reports[1]);
        assert_eq!(params[0], params[1]);
    }

    #[test]
    fn fit_is_deterministic_and_restores_the_best_epoch() {
        let set = tiny_set();
        let train = scenes_from(&set, &["a", "b"], 2, 300);
        let val = scenes_from(&set, &["v"], 2, 400);
        let config = TrainConfig {
            epochs: 3,
            batch_size: 3,
            crop: 0.25,
            seed: 8,
            ..TrainConfig::default()
        };

        let run = |cfg: TrainConfig| {
            let model = PhgModel::with_width(&set, 6, 77).unwrap();
            let mut trainer = Trainer::new(model, cfg).unwrap();
            let report = trainer.fit(&train, &val).unwrap();
            (report, trainer.model.params_flat().to_vec())
        };
        let (r1, p1) = run(config.clone());
        let (r2, p2) = run(config);
        assert_eq!(r1.log, r2.log);
        assert_eq!(p1, p2);

        // selection defaults to validation loss
        let best = r1
            .log
            .iter()
            .min_by(|a, b| a.val_loss.partial_cmp(&b.val_loss).unwrap())
            .unwrap();
        assert_eq!(r1.best_epoch, best.epoch);
        // every output task reports a metric, and per-task bests honor the
        // metric direction (max for categorical, min for continuous)
        for log in &r1.log {
            assert!(log.task_metrics.contains_key("gt-sem"));
            assert!(log.task_metrics.contains_key("gt-depth"));
        }
        let sem_best = r1.per_task_best["gt-sem"].value;
        let depth_best = r1.per_task_best["gt-depth"].value;
        for log in &r1.log {
            assert!(log.task_metrics["gt-sem"] <= sem_best);
            assert!(log.task_metrics["gt-depth"] >= depth_best);
        }
        let csv = r1.log_csv();
        assert!(csv.starts_with("epoch,train_loss,val_loss,gt-depth,gt-sem"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn training_overfits_a_single_frame() {
        let set = tiny_set();
        let bundle = rand_bundle(&set, 16, 16, 55);
        let config = TrainConfig {
            mode: TrainMode::OneAll,
            crop: 0.0,
            optim: AdamWConfig {
                lr_min: 5e-3,
                lr_max: 5e-3,
                weight_decay: 0.0,
                ..AdamWConfig::default()
            },
            ..TrainConfig::default()
        };
        let model = PhgModel::with_width(&set, 10, 4).unwrap();
        let mut trainer = Trainer::new(model, config).unwrap();
        let initial = trainer.train_step(&[&bundle]).unwrap();
        let mut last = initial;
        for _ in 0..200 {
            last = trainer.train_step(&[&bundle]).unwrap();
        }
        assert!(
            last < 0.1 * initial,
            "no overfit: loss went {initial:.4} -> {last:.4} in 200 steps"
        );
    }

    #[test]
    fn augmentation_keeps_shape_and_label_domain() {
        let set = tiny_set();
        let bundle = rand_bundle(&set, 16, 24, 77);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let aug1 = augment_bundle(&bundle, &set, 0.5, &mut rng).unwrap();
        let aug2 = augment_bundle(&bundle, &set, 0.5, &mut rng).unwrap();
        for aug in [&aug1, &aug2] {
            assert_eq!((aug.height(), aug.width()), (16, 24));
            let sem = aug.categorical("gt-sem").unwrap();
            assert!(sem.data().iter().all(|&c| c < 4));
        }
        // two draws from one stream should differ somewhere
        assert_ne!(aug1.continuous("rgb").unwrap().data(), aug2.continuous("rgb").unwrap().data());
    }

    #[test]
    fn checkpoints_round_trip_through_containers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.phgc");
        let set = tiny_set();
        let model = PhgModel::with_width(&set, 6, 123).unwrap();
        model.save(&path).unwrap();
        let loaded = PhgModel::load(&path).unwrap();
        assert_eq!(loaded.width(), 6);
        assert_eq!(loaded.set(), &set);
        assert_eq!(loaded.params_flat(), model.params_flat());

        let bundle = rand_bundle(&set, 16, 16, 6);
        let mask = HyperEdgeMask::all_visible(&set);
        let a = model.forward(&bundle, &mask).unwrap();
        let b = loaded.forward(&bundle, &mask).unwrap();
        for (task, t) in &a {
            assert_eq!(t.data(), b[task].data());
        }
    }

    #[test]
    fn train_config_round_trips_through_config_sections() {
        let config = TrainConfig {
            mode: TrainMode::OneRand,
            p_visible: 0.4,
            epochs: 7,
            batch_size: 3,
            crop: 0.25,
            seed: 9,
            optim: AdamWConfig { lr_max: 3e-3, lr_period: 40, ..AdamWConfig::default() },
            selection: SelectionMetric::Task("gt-sem".into()),
        };
        let mut doc = ConfigDoc::new();
        doc.push(config.to_section());
        let parsed = ConfigDoc::parse(&doc.render()).unwrap();
        let back = TrainConfig::from_section(parsed.require_section("train").unwrap()).unwrap();
        assert_eq!(back, config);

        // defaults: an empty section is a valid 1rand config
        let empty = ConfigSection::new("train");
        let d = TrainConfig::from_section(&empty).unwrap();
        assert_eq!(d.mode, TrainMode::OneRand);
        assert_eq!(d.selection, SelectionMetric::ValLoss);

        assert!(TrainMode::parse("2rand").is_err());
        assert!(ModelSize::parse("9M").is_err());
        assert_eq!(ModelSize::parse("1m").unwrap(), ModelSize::S1M);
    }
}
