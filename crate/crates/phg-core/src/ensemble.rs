//! Random-masking inference ensembles and candidate selection.
//!
//! One trained network yields many predictions for the same frame: every
//! hyper-edge mask is a different forward pass. Sampling N masks gives N
//! candidates whose aggregate is usually better (and always less noisy)
//! than a single pass. This module generates candidate sets, aggregates
//! them, tracks how fast the aggregate argmax settles, and implements the
//! selection strategies — including the ground-truth oracles, which are
//! evaluation-only and refuse to run while training is active.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;

use crate::config::{decode_modality_set, encode_modality_set, ConfigDoc, ConfigSection};
use crate::error::{PhgError, Result};
use crate::metrics::{weighted_miou_scene, ClassWeights, ConfusionAccumulator};
use crate::modality::{
    enumerate_masks, sample_mask, HyperEdgeMask, ModalityBundle, ModalityData, ModalityKind,
    ModalitySet,
};
use crate::model::{softmax_probs, training_active, PhgModel};
use crate::phgt::{Container, PhgtData};
use crate::tensor::{ClassMap, Tensor};

// --------------------------------------------------------------------------
// candidate sets

/// One masked forward pass: the mask that produced it and the per-output
/// predictions. Categorical outputs are stored as `[K,H,W]` class
/// probabilities, continuous outputs as raw values.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub mask: HyperEdgeMask,
    pub outputs: BTreeMap<String, Tensor>,
}

/// All candidates generated for one frame, with the modality set they were
/// predicted under.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    frame: String,
    set: ModalitySet,
    candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn new(frame: &str, set: &ModalitySet, candidates: Vec<Candidate>) -> Result<CandidateSet> {
        if candidates.is_empty() {
            return Err(PhgError::Config("candidate set must not be empty".into()));
        }
        let first = &candidates[0];
        for (i, cand) in candidates.iter().enumerate() {
            if cand.mask.visible.len() != set.intermediate_count() {
                return Err(PhgError::Shape(format!(
                    "candidate {i}: mask covers {} intermediates, set has {}",
                    cand.mask.visible.len(),
                    set.intermediate_count()
                )));
            }
            for spec in set.outputs() {
                let t = cand.outputs.get(&spec.name).ok_or_else(|| {
                    PhgError::Data(format!("candidate {i} is missing output '{}'", spec.name))
                })?;
                let expect = spec.kind.channels();
                if t.rank() != 3 || t.dims()[0] != expect {
                    return Err(PhgError::Shape(format!(
                        "candidate {i} output '{}': dims {:?}, expected [{expect},H,W]",
                        spec.name,
                        t.dims()
                    )));
                }
                if t.dims() != first.outputs[&spec.name].dims() {
                    return Err(PhgError::Shape(format!(
                        "candidate {i} output '{}' shape differs from candidate 0",
                        spec.name
                    )));
                }
                if let ModalityKind::Categorical { .. } = spec.kind {
                    check_probability_tensor(t, &spec.name, i)?;
                }
            }
            if cand.outputs.len() != set.outputs().count() {
                return Err(PhgError::Data(format!(
                    "candidate {i} carries {} outputs, set declares {}",
                    cand.outputs.len(),
                    set.outputs().count()
                )));
            }
        }
        Ok(CandidateSet { frame: frame.to_string(), set: set.clone(), candidates })
    }

    pub fn frame(&self) -> &str {
        &self.frame
    }

    pub fn set(&self) -> &ModalitySet {
        &self.set
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidates(&self) -> &[Candidate] {
        &self.candidates
    }

    pub fn get(&self, i: usize) -> Option<&Candidate> {
        self.candidates.get(i)
    }

    /// Argmax class map of one candidate's categorical output.
    pub fn candidate_map(&self, idx: usize, output: &str) -> Result<ClassMap> {
        let cand = self
            .candidates
            .get(idx)
            .ok_or_else(|| PhgError::Config(format!("no candidate {idx}")))?;
        self.require_categorical(output)?;
        Ok(ClassMap::from_argmax(&cand.outputs[output]))
    }

    fn require_categorical(&self, output: &str) -> Result<usize> {
        match self.set.get(output).map(|s| s.kind) {
            Some(ModalityKind::Categorical { classes }) => Ok(classes),
            Some(ModalityKind::Continuous { .. }) => {
                Err(PhgError::Config(format!("output '{output}' is not categorical")))
            }
            None => Err(PhgError::Config(format!("no output named '{output}'"))),
        }
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(PhgError::Config("aggregate over an empty subset".into()));
        }
        for &i in subset {
            if i >= self.candidates.len() {
                return Err(PhgError::Config(format!(
                    "subset index {i} out of range ({} candidates)",
                    self.candidates.len()
                )));
            }
        }
        Ok(())
    }

    // -- persistence ---------------------------------------------------------

    /// Write to a tensor container so selection experiments can rerun
    /// without re-inference. Byte-deterministic for equal content.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut doc = ConfigDoc::new();
        let mut head = ConfigSection::new("candidates");
        head.set("frame", &self.frame);
        head.set("count", self.candidates.len());
        doc.push(head);
        for (i, cand) in self.candidates.iter().enumerate() {
            let mut s = ConfigSection::new(&format!("candidate.{i:04}"));
            s.set("mask_bits", cand.mask.bits());
            doc.push(s);
        }
        for s in encode_modality_set(&self.set) {
            doc.push(s);
        }

        let mut c = Container::new();
        c.insert_text("meta", &doc.render());
        for (i, cand) in self.candidates.iter().enumerate() {
            for (name, t) in &cand.outputs {
                c.insert_tensor(&format!("cand.{i:04}.{name}"), PhgtData::F32(t.clone()));
            }
        }
        c.write(path)
    }

    pub fn load(path: &std::path::Path) -> Result<CandidateSet> {
        let c = Container::read(path)?;
        let meta = c.text("meta").ok_or_else(|| PhgError::Format {
            path: path.to_path_buf(),
            reason: "candidate container has no 'meta' entry".into(),
        })?;
        let doc = ConfigDoc::parse(meta)?;
        let set = decode_modality_set(&doc)?;
        let head = doc.require_section("candidates")?;
        let frame: String = head.require("frame")?.to_string();
        let count: usize = head.parse_as("count")?;
        let k = set.intermediate_count();

        let mut candidates = Vec::with_capacity(count);
        for i in 0..count {
            let bits: u32 = doc.require_section(&format!("candidate.{i:04}"))?.parse_as("mask_bits")?;
            let mut outputs = BTreeMap::new();
            for spec in set.outputs() {
                let entry_name = format!("cand.{i:04}.{}", spec.name);
                let data = c.tensor(&entry_name).ok_or_else(|| PhgError::Format {
                    path: path.to_path_buf(),
                    reason: format!("missing entry '{entry_name}'"),
                })?;
                let PhgtData::F32(t) = data else {
                    return Err(PhgError::Format {
                        path: path.to_path_buf(),
                        reason: format!("entry '{entry_name}' is not an f32 tensor"),
                    });
                };
                outputs.insert(spec.name.clone(), t.clone());
            }
            candidates.push(Candidate { mask: HyperEdgeMask::from_bits(bits, k), outputs });
        }
        CandidateSet::new(&frame, &set, candidates)
    }
}

fn check_probability_tensor(t: &Tensor, name: &str, cand: usize) -> Result<()> {
    let (k, h, w) = t.chw();
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0f64;
            for c in 0..k {
                let v = t.at3(c, y, x);
                if v < 0.0 {
                    return Err(PhgError::Numeric(format!(
                        "candidate {cand} output '{name}': negative probability at ({y},{x})"
                    )));
                }
                sum += v as f64;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(PhgError::Numeric(format!(
                    "candidate {cand} output '{name}': probabilities sum to {sum} at ({y},{x})"
                )));
            }
        }
    }
    Ok(())
}

// --------------------------------------------------------------------------
// candidate generation

/// Run one already-assembled mask through the model and package the heads.
fn predict_one(model: &PhgModel, bundle: &ModalityBundle, mask: HyperEdgeMask) -> Result<Candidate> {
    let logits = model.forward(bundle, &mask)?;
    let mut outputs = BTreeMap::new();
    for spec in model.set().outputs() {
        let t = &logits[&spec.name];
        let value = match spec.kind {
            ModalityKind::Categorical { .. } => softmax_probs(t)?,
            ModalityKind::Continuous { .. } => t.clone(),
        };
        outputs.insert(spec.name.clone(), value);
    }
    Ok(Candidate { mask, outputs })
}

/// Run an explicit list of masks for one frame; the forwards run in
/// parallel but candidate order follows the mask order.
pub fn predict_with_masks(
    model: &PhgModel,
    bundle: &ModalityBundle,
    frame: &str,
    masks: Vec<HyperEdgeMask>,
) -> Result<CandidateSet> {
    let candidates: Vec<Candidate> = masks
        .into_par_iter()
        .map(|m| predict_one(model, bundle, m))
        .collect::<Result<_>>()?;
    CandidateSet::new(frame, model.set(), candidates)
}

/// N independent random-mask forwards for one frame. Masks are drawn
/// sequentially from `rng` (so results do not depend on thread count), the
/// forwards themselves run in parallel.
pub fn nrand_predict(
    model: &PhgModel,
    bundle: &ModalityBundle,
    frame: &str,
    n: usize,
    p_visible: f64,
    rng: &mut impl Rng,
) -> Result<CandidateSet> {
    if n == 0 {
        return Err(PhgError::Config("nrand_predict needs at least one candidate".into()));
    }
    let masks: Vec<HyperEdgeMask> = (0..n)
        .map(|_| sample_mask(model.set(), p_visible, rng))
        .collect::<Result<_>>()?;
    predict_with_masks(model, bundle, frame, masks)
}

/// One candidate per enumerable hyper-edge, in ascending bit-pattern order
/// (for k intermediates that is 2^k − 1 candidates without the all-masked
/// edge, 2^k with it).
pub fn enumerate_predict(
    model: &PhgModel,
    bundle: &ModalityBundle,
    frame: &str,
    allow_all_masked: bool,
) -> Result<CandidateSet> {
    let masks = enumerate_masks(model.set(), allow_all_masked)?;
    predict_with_masks(model, bundle, frame, masks)
}

// --------------------------------------------------------------------------
// aggregation

/// How categorical candidates merge. Continuous outputs always average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationRule {
    /// Mean of per-class probabilities, then argmax (default).
    MeanProbs,
    /// Each candidate votes its own argmax; most votes wins.
    MajorityVote,
}

/// Element mean of the stored tensors over a subset — class probabilities
/// for categorical outputs, raw values for continuous ones. Accumulates in
/// f64, so aggregating M copies of one candidate reproduces it bitwise.
pub fn aggregate_mean(cands: &CandidateSet, subset: &[usize]) -> Result<BTreeMap<String, Tensor>> {
    cands.check_subset(subset)?;
    let mut out = BTreeMap::new();
    for spec in cands.set().outputs() {
        let dims = cands.candidates[subset[0]].outputs[&spec.name].dims().to_vec();
        let mut acc = vec![0.0f64; dims.iter().product()];
        for &i in subset {
            for (a, &v) in acc.iter_mut().zip(cands.candidates[i].outputs[&spec.name].data()) {
                *a += v as f64;
            }
        }
        let n = subset.len() as f64;
        let data: Vec<f32> = acc.iter().map(|a| (a / n) as f32).collect();
        out.insert(spec.name.clone(), Tensor::new(dims, data)?);
    }
    Ok(out)
}

/// Aggregate a subset into final per-output predictions: continuous outputs
/// become mean tensors, categorical outputs become class maps (ties going
/// to the lowest class index).
pub fn aggregate(cands: &CandidateSet, subset: &[usize]) -> Result<BTreeMap<String, ModalityData>> {
    aggregate_with(cands, subset, AggregationRule::MeanProbs)
}

pub fn aggregate_with(
    cands: &CandidateSet,
    subset: &[usize],
    rule: AggregationRule,
) -> Result<BTreeMap<String, ModalityData>> {
    cands.check_subset(subset)?;
    let mean = aggregate_mean(cands, subset)?;
    let mut out = BTreeMap::new();
    for spec in cands.set().outputs() {
        let value = match (spec.kind, rule) {
            (ModalityKind::Continuous { .. }, _) => {
                ModalityData::Continuous(mean[&spec.name].clone())
            }
            (ModalityKind::Categorical { .. }, AggregationRule::MeanProbs) => {
                ModalityData::Categorical(ClassMap::from_argmax(&mean[&spec.name]))
            }
            (ModalityKind::Categorical { classes }, AggregationRule::MajorityVote) => {
                let (h, w) = {
                    let d = mean[&spec.name].dims();
                    (d[1], d[2])
                };
                let mut votes = vec![0u32; classes * h * w];
                for &i in subset {
                    let m = ClassMap::from_argmax(&cands.candidates[i].outputs[&spec.name]);
                    for (p, &c) in m.data().iter().enumerate() {
                        votes[c as usize * h * w + p] += 1;
                    }
                }
                let mut map = ClassMap::filled(h, w, 0);
                for p in 0..h * w {
                    let mut best = 0usize;
                    for c in 1..classes {
                        if votes[c * h * w + p] > votes[best * h * w + p] {
                            best = c;
                        }
                    }
                    map.data_mut()[p] = best as u8;
                }
                ModalityData::Categorical(map)
            }
        };
        out.insert(spec.name.clone(), value);
    }
    Ok(out)
}

/// For each prefix length n ≥ 2, the fraction of pixels whose aggregated
/// argmax differs between the first n−1 and the first n candidates. A
/// settling ensemble trends toward zero.
pub fn convergence_curve(cands: &CandidateSet, output: &str) -> Result<Vec<f64>> {
    cands.require_categorical(output)?;
    let n = cands.len();
    if n < 2 {
        return Err(PhgError::Config("convergence_curve needs at least two candidates".into()));
    }
    let dims = cands.candidates[0].outputs[output].dims().to_vec();
    let mut acc = vec![0.0f64; dims.iter().product()];
    let mut prev: Option<ClassMap> = None;
    let mut curve = Vec::with_capacity(n - 1);
    for (i, cand) in cands.candidates.iter().enumerate() {
        for (a, &v) in acc.iter_mut().zip(cand.outputs[output].data()) {
            *a += v as f64;
        }
        let scale = 1.0 / (i + 1) as f64;
        let mean = Tensor::new(dims.clone(), acc.iter().map(|a| (a * scale) as f32).collect())?;
        let map = ClassMap::from_argmax(&mean);
        if let Some(p) = &prev {
            curve.push(p.disagreement(&map)?);
        }
        prev = Some(map);
    }
    Ok(curve)
}

// --------------------------------------------------------------------------
// ground-truth oracle selection (evaluation only)

fn oracle_gate(name: &'static str) -> Result<()> {
    if training_active() {
        return Err(PhgError::OracleGuard(name));
    }
    Ok(())
}

/// Weighted IoU (benchmark formula, 0..100) of one prediction against a
/// reference map on a single frame.
pub fn frame_weighted_iou(pred: &ClassMap, gt: &ClassMap, weights: &ClassWeights) -> Result<f64> {
    let mut acc = ConfusionAccumulator::new(weights.len())?;
    acc.accumulate(pred, gt)?;
    weighted_miou_scene(&acc, weights)
}

#[derive(Debug, Clone)]
pub struct SelectionReport {
    /// (K, aggregated score) for K = 1..=N, in increasing K.
    pub per_k: Vec<(usize, f64)>,
    /// Candidate indices sorted by solo score, best first.
    pub order: Vec<usize>,
    /// The top-K prefix that scored best (smallest K on ties).
    pub chosen: Vec<usize>,
    /// Mask of the single best candidate.
    pub top_mask: HyperEdgeMask,
    /// Masked frequency per intermediate over the chosen subset's masks.
    pub mask_frequency: Vec<f64>,
}

/// Sort candidates by their individual weighted IoU against ground truth,
/// then score every top-K prefix aggregate. Evaluation-only.
pub fn greedy_topk_oracle(
    cands: &CandidateSet,
    output: &str,
    gt: &ClassMap,
    weights: &ClassWeights,
) -> Result<SelectionReport> {
    oracle_gate("greedy_topk_oracle")?;
    let n = cands.len();
    let mut solo = Vec::with_capacity(n);
    for i in 0..n {
        solo.push(frame_weighted_iou(&cands.candidate_map(i, output)?, gt, weights)?);
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| solo[b].partial_cmp(&solo[a]).unwrap().then(a.cmp(&b)));

    let mut per_k = Vec::with_capacity(n);
    for k in 1..=n {
        let agg = aggregate_mean(cands, &order[..k])?;
        let score = frame_weighted_iou(&ClassMap::from_argmax(&agg[output]), gt, weights)?;
        per_k.push((k, score));
    }
    let best_k = per_k
        .iter()
        .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
        .map(|&(k, _)| k)
        .unwrap();
    let chosen: Vec<usize> = order[..best_k].to_vec();
    let masks: Vec<HyperEdgeMask> =
        chosen.iter().map(|&i| cands.candidates[i].mask.clone()).collect();
    Ok(SelectionReport {
        per_k,
        top_mask: cands.candidates[order[0]].mask.clone(),
        mask_frequency: masking_distribution(&masks)?,
        order,
        chosen,
    })
}

#[derive(Debug, Clone)]
pub struct BestKReport {
    /// Per frame: the K that maximized that frame's top-K aggregate, and
    /// the score it reached.
    pub per_frame: Vec<(usize, f64)>,
    /// Benchmark over the per-frame chosen aggregates (one pooled
    /// accumulator across all frames).
    pub score: f64,
}

/// Per-frame best-K oracle: for every frame pick the K whose top-K
/// aggregate scores highest, then pool those choices into one benchmark
/// number. Dominates greedy top-K at any fixed K on every frame, by
/// construction. Evaluation-only.
pub fn greedy_bestk_oracle(
    frames: &[(&CandidateSet, &ClassMap)],
    output: &str,
    weights: &ClassWeights,
) -> Result<BestKReport> {
    oracle_gate("greedy_bestk_oracle")?;
    if frames.is_empty() {
        return Err(PhgError::Config("greedy_bestk_oracle: no frames".into()));
    }
    let mut per_frame = Vec::with_capacity(frames.len());
    let mut pooled = ConfusionAccumulator::new(weights.len())?;
    for (cands, gt) in frames {
        let report = greedy_topk_oracle(cands, output, gt, weights)?;
        let &(best_k, best_score) = report
            .per_k
            .iter()
            .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(b.0.cmp(&a.0)))
            .unwrap();
        let agg = aggregate_mean(cands, &report.order[..best_k])?;
        pooled.accumulate(&ClassMap::from_argmax(&agg[output]), gt)?;
        per_frame.push((best_k, best_score));
    }
    Ok(BestKReport { per_frame, score: weighted_miou_scene(&pooled, weights)? })
}

// --------------------------------------------------------------------------
// gt-free selection

/// How candidate-to-reference closeness is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Similarity {
    /// Fraction of pixels agreeing with the reference argmax.
    Accuracy,
    /// Weighted IoU against the reference argmax.
    WeightedIou,
}

impl Similarity {
    pub fn parse(s: &str) -> Result<Similarity> {
        match s {
            "accuracy" => Ok(Similarity::Accuracy),
            "weighted-iou" => Ok(Similarity::WeightedIou),
            other => Err(PhgError::Config(format!(
                "unknown similarity '{other}' (expected accuracy or weighted-iou)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimilaritySelection {
    /// Indices that built the reference aggregate.
    pub reference: Vec<usize>,
    /// All candidates ranked by similarity to the reference, closest first.
    pub ranked: Vec<usize>,
    /// The subset that was aggregated.
    pub chosen: Vec<usize>,
    pub outputs: BTreeMap<String, ModalityData>,
}

/// Ground-truth-free selection: aggregate a few random candidates into a
/// reference, rank everyone by similarity to it, and aggregate the top K
/// (optionally together with the reference candidates).
#[allow(clippy::too_many_arguments)]
pub fn mean_similarity_select(
    cands: &CandidateSet,
    output: &str,
    reference_count: usize,
    similarity: Similarity,
    weights: &ClassWeights,
    k: usize,
    include_ref: bool,
    rng: &mut impl Rng,
) -> Result<SimilaritySelection> {
    let n = cands.len();
    if reference_count == 0 || reference_count > n {
        return Err(PhgError::Config(format!(
            "reference_count {reference_count} outside 1..={n}"
        )));
    }
    if k == 0 || k > n {
        return Err(PhgError::Config(format!("similarity top-k {k} outside 1..={n}")));
    }
    cands.require_categorical(output)?;

    let mut reference = rand::seq::index::sample(rng, n, reference_count).into_vec();
    reference.sort_unstable();
    let ref_map = ClassMap::from_argmax(&aggregate_mean(cands, &reference)?[output]);

    let mut scored = Vec::with_capacity(n);
    for i in 0..n {
        let map = cands.candidate_map(i, output)?;
        let s = match similarity {
            Similarity::Accuracy => 1.0 - map.disagreement(&ref_map)?,
            Similarity::WeightedIou => frame_weighted_iou(&map, &ref_map, weights)?,
        };
        scored.push(s);
    }
    let mut ranked: Vec<usize> = (0..n).collect();
    ranked.sort_by(|&a, &b| scored[b].partial_cmp(&scored[a]).unwrap().then(a.cmp(&b)));

    let mut chosen: Vec<usize> = ranked[..k].to_vec();
    if include_ref {
        for &r in &reference {
            if !chosen.contains(&r) {
                chosen.push(r);
            }
        }
    }
    let outputs = aggregate(cands, &chosen)?;
    Ok(SimilaritySelection { reference, ranked, chosen, outputs })
}

// --------------------------------------------------------------------------
// masking statistics

/// Per-intermediate frequency of being masked across a list of hyper-edge
/// masks (1.0 = always masked).
pub fn masking_distribution(masks: &[HyperEdgeMask]) -> Result<Vec<f64>> {
    let first = masks
        .first()
        .ok_or_else(|| PhgError::Config("masking_distribution over no masks".into()))?;
    let k = first.visible.len();
    let mut freq = vec![0.0f64; k];
    for m in masks {
        if m.visible.len() != k {
            return Err(PhgError::Shape(format!(
                "mask length mismatch: {} vs {k}",
                m.visible.len()
            )));
        }
        for (f, &v) in freq.iter_mut().zip(&m.visible) {
            if !v {
                *f += 1.0;
            }
        }
    }
    for f in &mut freq {
        *f /= masks.len() as f64;
    }
    Ok(freq)
}

/// Draw a mask whose per-intermediate masking probability follows an
/// observed frequency vector. Frequency 0 pins a modality visible.
pub fn weighted_sample(frequencies: &[f64], rng: &mut impl Rng) -> Result<HyperEdgeMask> {
    for &f in frequencies {
        if !(0.0..=1.0).contains(&f) {
            return Err(PhgError::Config(format!("masking frequency {f} outside [0,1]")));
        }
    }
    let visible = frequencies.iter().map(|&f| !rng.gen_bool(f)).collect();
    Ok(HyperEdgeMask { visible })
}
