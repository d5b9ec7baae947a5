//! Pseudo-label selection and student distillation.
//!
//! The random-masking ensemble doubles as a teacher: its aggregate over a
//! frame is a pseudo-label, and the agreement between individual candidates
//! and that aggregate ("consistency") predicts — without any reference data
//! — how trustworthy the pseudo-label is. Frames are kept by percentile,
//! globally or per scene, and a reference-free student (inputs only, no
//! intermediate modalities) trains against the teacher's class
//! probabilities with a forward KL loss. The student never touches
//! reference files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::ensemble::{aggregate_mean, frame_weighted_iou, nrand_predict, CandidateSet, Similarity};
use crate::error::{PhgError, Result};
use crate::metrics::{weighted_miou_scene_with, AbsentClassPolicy, ClassWeights, ConfusionAccumulator};
use crate::modality::{
    apply_mask, HyperEdgeMask, ModalityBundle, ModalityKind, ModalitySet, ModalitySpec,
};
use crate::model::{enter_training, PhgModel};
use crate::optim::{AdamWConfig, OptimizerState};
use crate::phgt::write_atomic;
use crate::tape::Tape;
use crate::tensor::{ClassMap, Tensor};

// --------------------------------------------------------------------------
// frame consistency

/// How strongly one frame's candidates agree with their own ensemble, plus
/// (in evaluation settings) how good the ensemble actually is.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameConsistency {
    pub scene: String,
    pub frame: String,
    /// Mean candidate-to-ensemble similarity, in [0, 1].
    pub similarity: f64,
    /// Ensemble argmax vs reference, benchmark formula (0..100), when a
    /// reference map was supplied.
    pub gt_score: Option<f64>,
}

/// Weighted IoU with absent classes dropped and weights renormalized: the
/// right reading for similarity, where a prediction identical to the
/// reference must score 1 even if the frame misses classes.
fn renormalized_iou(pred: &ClassMap, reference: &ClassMap, weights: &ClassWeights) -> Result<f64> {
    let mut acc = ConfusionAccumulator::new(weights.len())?;
    acc.accumulate(pred, reference)?;
    weighted_miou_scene_with(&acc, weights, AbsentClassPolicy::SkipRenormalize)
}

/// Mean similarity of each candidate's argmax to the full-set ensemble
/// argmax. Identical candidates score exactly 1.
pub fn frame_consistency(
    cands: &CandidateSet,
    output: &str,
    scene: &str,
    similarity: Similarity,
    weights: &ClassWeights,
    gt: Option<&ClassMap>,
) -> Result<FrameConsistency> {
    let n = cands.len();
    if n < 2 {
        return Err(PhgError::Config("frame_consistency needs at least two candidates".into()));
    }
    let all: Vec<usize> = (0..n).collect();
    let ensemble = ClassMap::from_argmax(&aggregate_mean(cands, &all)?[output]);

    let mut acc = 0.0f64;
    for i in 0..n {
        let map = cands.candidate_map(i, output)?;
        acc += match similarity {
            Similarity::Accuracy => 1.0 - map.disagreement(&ensemble)?,
            Similarity::WeightedIou => renormalized_iou(&map, &ensemble, weights)? / 100.0,
        };
    }
    let gt_score = match gt {
        Some(reference) => Some(frame_weighted_iou(&ensemble, reference, weights)?),
        None => None,
    };
    Ok(FrameConsistency {
        scene: scene.to_string(),
        frame: cands.frame().to_string(),
        similarity: acc / n as f64,
        gt_score,
    })
}

// --------------------------------------------------------------------------
// percentile selection

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// One percentile cut over all frames; weak scenes may lose everything.
    GlobalPercentile,
    /// The cut applies inside each scene, so every scene keeps a share.
    PerScenePercentile,
}

impl SelectionMode {
    pub fn parse(s: &str) -> Result<SelectionMode> {
        match s {
            "global" => Ok(SelectionMode::GlobalPercentile),
            "per-scene" => Ok(SelectionMode::PerScenePercentile),
            other => Err(PhgError::Config(format!(
                "unknown selection mode '{other}' (expected global or per-scene)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SelectionMode::GlobalPercentile => "global",
            SelectionMode::PerScenePercentile => "per-scene",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelectionPolicy {
    pub mode: SelectionMode,
    /// Percentage of frames to keep, in (0, 100].
    pub keep_percent: f64,
}

impl SelectionPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.keep_percent > 0.0 && self.keep_percent <= 100.0) {
            return Err(PhgError::Config(format!(
                "keep percentage {} outside (0, 100]",
                self.keep_percent
            )));
        }
        Ok(())
    }
}

/// How many of `n` frames a keep-percentage retains (always at least one).
fn keep_count(n: usize, percent: f64) -> usize {
    ((n as f64 * percent / 100.0).ceil() as usize).clamp(1, n)
}

/// Top slice of `indices` by similarity (descending, ties to the earlier
/// frame), returned in ascending index order.
fn top_by_similarity(consistencies: &[FrameConsistency], indices: &[usize], k: usize) -> Vec<usize> {
    let mut order = indices.to_vec();
    order.sort_by(|&a, &b| {
        consistencies[b]
            .similarity
            .partial_cmp(&consistencies[a].similarity)
            .unwrap()
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Keep the most self-consistent frames. Returns indices into the input,
/// ascending. Global mode cuts one percentile over everything; per-scene
/// mode guarantees every scene keeps ⌈N%⌉ of its own frames.
pub fn select_pseudolabels(
    consistencies: &[FrameConsistency],
    policy: &SelectionPolicy,
) -> Result<Vec<usize>> {
    policy.validate()?;
    if consistencies.is_empty() {
        return Err(PhgError::Config("select_pseudolabels over no frames".into()));
    }
    match policy.mode {
        SelectionMode::GlobalPercentile => {
            let all: Vec<usize> = (0..consistencies.len()).collect();
            let k = keep_count(all.len(), policy.keep_percent);
            Ok(top_by_similarity(consistencies, &all, k))
        }
        SelectionMode::PerScenePercentile => {
            let mut by_scene: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, c) in consistencies.iter().enumerate() {
                by_scene.entry(&c.scene).or_default().push(i);
            }
            let mut kept = Vec::new();
            for indices in by_scene.values() {
                let k = keep_count(indices.len(), policy.keep_percent);
                kept.extend(top_by_similarity(consistencies, indices, k));
            }
            kept.sort_unstable();
            Ok(kept)
        }
    }
}

// --------------------------------------------------------------------------
// consistency-vs-quality correlation

#[derive(Debug, Clone)]
pub struct CorrelationReport {
    /// Pearson correlation between similarity and reference score; `None`
    /// when either side has zero variance.
    pub r: Option<f64>,
    /// (scene, frame, similarity, reference score) per point.
    pub rows: Vec<(String, String, f64, f64)>,
}

impl CorrelationReport {
    /// Scatter-plot CSV: one row per frame.
    pub fn to_csv(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let io_err = |e: csv::Error| PhgError::Data(format!("csv: {e}"));
        wtr.write_record(["scene", "frame", "similarity", "gt_iou"]).map_err(io_err)?;
        for (scene, frame, sim, gt) in &self.rows {
            wtr.write_record([scene.as_str(), frame.as_str(), &format!("{sim:.9}"), &format!("{gt:.6}")])
                .map_err(io_err)?;
        }
        let bytes = wtr.into_inner().map_err(|e| PhgError::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| PhgError::Data(format!("csv utf8: {e}")))
    }
}

/// Pearson correlation between per-frame similarity and ensemble quality,
/// over every consistency entry that carries a reference score.
pub fn correlation_report(consistencies: &[FrameConsistency]) -> Result<CorrelationReport> {
    let rows: Vec<(String, String, f64, f64)> = consistencies
        .iter()
        .filter_map(|c| {
            c.gt_score.map(|g| (c.scene.clone(), c.frame.clone(), c.similarity, g))
        })
        .collect();
    if rows.len() < 3 {
        return Err(PhgError::Config(format!(
            "correlation needs at least 3 scored frames, got {}",
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mean_x = rows.iter().map(|r| r.2).sum::<f64>() / n;
    let mean_y = rows.iter().map(|r| r.3).sum::<f64>() / n;
    let mut cov = 0.0f64;
    let mut var_x = 0.0f64;
    let mut var_y = 0.0f64;
    for (_, _, x, y) in &rows {
        cov += (x - mean_x) * (y - mean_y);
        var_x += (x - mean_x) * (x - mean_x);
        var_y += (y - mean_y) * (y - mean_y);
    }
    let r = if var_x == 0.0 || var_y == 0.0 {
        None
    } else {
        let v = cov / (var_x * var_y).sqrt();
        if v.is_finite() {
            Some(v.clamp(-1.0, 1.0))
        } else {
            None
        }
    };
    Ok(CorrelationReport { r, rows })
}

// --------------------------------------------------------------------------
// selection manifests

/// Write a selection manifest: kept frame paths with their similarity, one
/// tab-separated line each.
pub fn write_manifest(path: &Path, rows: &[(String, f64)]) -> Result<()> {
    let mut out = String::from("# kept pseudo-label frames: path <tab> similarity\n");
    for (p, sim) in rows {
        out.push_str(&format!("{p}\t{sim:.6}\n"));
    }
    write_atomic(path, out.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<(String, f64)>> {
    let text = std::fs::read_to_string(path).map_err(|e| PhgError::io(path, e))?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (p, sim) = line.split_once('\t').ok_or_else(|| PhgError::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: expected 'path<tab>similarity'", ln + 1),
        })?;
        let sim: f64 = sim.trim().parse().map_err(|_| PhgError::Format {
            path: path.to_path_buf(),
            reason: format!("line {}: bad similarity '{sim}'", ln + 1),
        })?;
        rows.push((p.to_string(), sim));
    }
    Ok(rows)
}

// --------------------------------------------------------------------------
// distillation

/// The reference-free student predicts the teacher's categorical outputs
/// from the always-visible inputs alone: intermediates are dropped, and so
/// are continuous outputs (distillation targets are class probabilities).
pub fn student_set(teacher: &ModalitySet) -> Result<ModalitySet> {
    let mut specs: Vec<ModalitySpec> = teacher.inputs().cloned().collect();
    let outputs: Vec<ModalitySpec> = teacher
        .outputs()
        .filter(|s| matches!(s.kind, ModalityKind::Categorical { .. }))
        .cloned()
        .collect();
    if outputs.is_empty() {
        return Err(PhgError::Config(
            "teacher has no categorical outputs to distill".into(),
        ));
    }
    specs.extend(outputs);
    ModalitySet::new(specs)
}

/// NRand-aggregated class-probability targets for one frame: the teacher
/// runs `n` random-mask forwards and the per-class probabilities average.
pub fn pseudo_labels(
    teacher: &PhgModel,
    bundle: &ModalityBundle,
    n: usize,
    p_visible: f64,
    rng: &mut impl Rng,
) -> Result<BTreeMap<String, Tensor>> {
    let cands = nrand_predict(teacher, bundle, "pseudo", n, p_visible, rng)?;
    let all: Vec<usize> = (0..n).collect();
    let mean = aggregate_mean(&cands, &all)?;
    Ok(mean
        .into_iter()
        .filter(|(name, _)| {
            matches!(
                teacher.set().get(name).map(|s| s.kind),
                Some(ModalityKind::Categorical { .. })
            )
        })
        .collect())
}

/// Concatenate only the input-role modalities of a bundle, in declaration
/// order, as the student sees them.
pub fn student_input(bundle: &ModalityBundle, student: &ModalitySet) -> Result<Tensor> {
    let mut entries = BTreeMap::new();
    for spec in student.inputs() {
        let data = bundle
            .get(&spec.name)
            .ok_or_else(|| PhgError::Data(format!("bundle has no input '{}'", spec.name)))?;
        entries.insert(spec.name.clone(), data.clone());
    }
    let b = ModalityBundle::for_inference(student, entries)?;
    apply_mask(&b, student, &HyperEdgeMask::all_visible(student))
}

/// One distillation example: student input plus fixed teacher targets.
#[derive(Debug, Clone)]
pub struct DistillSample {
    pub scene: String,
    pub frame: String,
    pub input: Tensor,
    /// Teacher probability aggregates per categorical output.
    pub targets: BTreeMap<String, Tensor>,
}

pub fn make_distill_sample(
    teacher: &PhgModel,
    student: &ModalitySet,
    bundle: &ModalityBundle,
    scene: &str,
    frame: &str,
    n_teacher: usize,
    p_visible: f64,
    rng: &mut impl Rng,
) -> Result<DistillSample> {
    Ok(DistillSample {
        scene: scene.to_string(),
        frame: frame.to_string(),
        input: student_input(bundle, student)?,
        targets: pseudo_labels(teacher, bundle, n_teacher, p_visible, rng)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistillConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optim: AdamWConfig,
}

impl Default for DistillConfig {
    fn default() -> DistillConfig {
        DistillConfig { epochs: 20, batch_size: 2, seed: 0, optim: AdamWConfig::default() }
    }
}

fn check_samples(student: &PhgModel, samples: &[DistillSample]) -> Result<()> {
    if samples.is_empty() {
        return Err(PhgError::Config("distillation with no samples".into()));
    }
    let cin = student.set().input_channel_count();
    for s in samples {
        if s.input.rank() != 3 || s.input.dims()[0] != cin {
            return Err(PhgError::Shape(format!(
                "sample {}/{}: input dims {:?}, student expects [{cin},H,W]",
                s.scene,
                s.frame,
                s.input.dims()
            )));
        }
        for spec in student.set().outputs() {
            let t = s.targets.get(&spec.name).ok_or_else(|| {
                PhgError::Data(format!(
                    "sample {}/{} has no target for output '{}'",
                    s.scene, s.frame, spec.name
                ))
            })?;
            let expect = [spec.kind.channels(), s.input.dims()[1], s.input.dims()[2]];
            if t.dims() != expect {
                return Err(PhgError::Shape(format!(
                    "sample {}/{} target '{}': dims {:?}, expected {:?}",
                    s.scene,
                    s.frame,
                    spec.name,
                    t.dims(),
                    expect
                )));
            }
        }
    }
    Ok(())
}

/// Loss and flat gradients for one sample: forward KL (teacher ‖ student)
/// per output, averaged in name order.
fn kl_sample_loss_and_grads(student: &PhgModel, sample: &DistillSample) -> Result<(f64, Vec<f32>)> {
    let mut tape = Tape::new();
    let (heads, param_ids) = student.forward_on_tape(&mut tape, sample.input.clone())?;
    let mut losses = Vec::with_capacity(heads.len());
    for (task, node) in &heads {
        losses.push(tape.kl_loss_vs_probs(*node, &sample.targets[task])?);
    }
    let total = tape.mean_scalars(&losses)?;
    let loss = tape.scalar(total)?;
    let grads = tape.backward(total)?;
    let mut flat = vec![0.0f32; student.param_count()];
    for ((offset, len), id) in student.param_spans().zip(param_ids) {
        if let Some(g) = grads.get(id) {
            flat[offset..offset + len].copy_from_slice(g);
        }
    }
    Ok((loss, flat))
}

/// Train the student against fixed teacher targets. Returns the mean KL
/// loss per epoch; zero epochs is a no-op that leaves the student at
/// initialization.
pub fn distill_student(
    student: &mut PhgModel,
    samples: &[DistillSample],
    config: &DistillConfig,
) -> Result<Vec<f64>> {
    let _guard = enter_training();
    check_samples(student, samples)?;
    if config.batch_size == 0 {
        return Err(PhgError::Config("batch_size must be positive".into()));
    }
    let mut opt = OptimizerState::new(config.optim.clone(), student.param_count())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(3);

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for chunk in order.chunks(config.batch_size) {
            let model = &*student;
            let per_sample: Vec<(f64, Vec<f32>)> = chunk
                .par_iter()
                .map(|&i| kl_sample_loss_and_grads(model, &samples[i]))
                .collect::<Result<_>>()?;
            let n = per_sample.len();
            let mut grad_acc = vec![0.0f64; student.param_count()];
            let mut batch_loss = 0.0f64;
            for (loss, grads) in &per_sample {
                batch_loss += loss;
                for (a, g) in grad_acc.iter_mut().zip(grads) {
                    *a += *g as f64;
                }
            }
            let batch_loss = batch_loss / n as f64;
            if !batch_loss.is_finite() {
                return Err(PhgError::Numeric(format!("distillation loss became {batch_loss}")));
            }
            let grads: Vec<f32> = grad_acc.iter().map(|g| (*g / n as f64) as f32).collect();
            opt.adamw_step(student.params_flat_mut(), &grads)?;
            loss_sum += batch_loss * n as f64;
        }
        epoch_losses.push(loss_sum / samples.len() as f64);
    }
    Ok(epoch_losses)
}

/// Mean forward KL (teacher ‖ student) per pixel, mirroring the training
/// loss bit for bit but without a tape.
pub fn kl_plain(student_logits: &Tensor, teacher_probs: &Tensor) -> Result<f64> {
    if student_logits.dims() != teacher_probs.dims() {
        return Err(PhgError::Shape(format!(
            "kl: student {:?} vs teacher {:?}",
            student_logits.dims(),
            teacher_probs.dims()
        )));
    }
    let (k, h, w) = student_logits.chw();
    let s = student_logits.data();
    let t = teacher_probs.data();
    let plane = h * w;
    let mut acc = 0.0f64;
    for p in 0..plane {
        let mut maxv = f32::NEG_INFINITY;
        for c in 0..k {
            maxv = maxv.max(s[c * plane + p]);
        }
        let mut denom = 0.0f64;
        for c in 0..k {
            denom += ((s[c * plane + p] - maxv) as f64).exp();
        }
        let lse = denom.ln() + maxv as f64;
        for c in 0..k {
            let tp = t[c * plane + p] as f64;
            if tp > 0.0 {
                acc += tp * (tp.ln() - (s[c * plane + p] as f64 - lse));
            }
        }
    }
    Ok(acc / plane as f64)
}

/// Held-out evaluation: mean KL between a sample's teacher targets and the
/// student's current predictions, averaged over targets in name order.
pub fn student_distill_gap(student: &PhgModel, sample: &DistillSample) -> Result<f64> {
    let outs = student.forward_input(&sample.input)?;
    let mut acc = 0.0f64;
    let mut n = 0usize;
    for (task, target) in &sample.targets {
        let logits = outs
            .get(task)
            .ok_or_else(|| PhgError::Config(format!("student has no output '{task}'")))?;
        acc += kl_plain(logits, target)?;
        n += 1;
    }
    if n == 0 {
        return Err(PhgError::Config("sample has no targets".into()));
    }
    Ok(acc / n as f64)
}
