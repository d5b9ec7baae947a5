//! Evaluation suite: global weighted mean IoU with fixed class weights,
//! per-scene aggregation into a benchmark score, L2×100 for regression
//! heads, and the optical-flow temporal-consistency metric.

use crate::error::{PhgError, Result};
use crate::tensor::{ClassMap, Tensor};

// --------------------------------------------------------------------------
// class weights

/// The 8-class aerial taxonomy the weighted IoU metric is defined over.
pub const SEGMENTATION_CLASSES: [&str; 8] = [
    "land",
    "forest",
    "residential",
    "road",
    "little-objects",
    "water",
    "sky",
    "hill",
];

/// Fixed per-class weights for the weighted mean-IoU score.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    weights: Vec<f64>,
}

impl ClassWeights {
    /// Reference weights for the 8-class aerial taxonomy, in
    /// `SEGMENTATION_CLASSES` order.
    pub fn aerial8() -> ClassWeights {
        ClassWeights {
            weights: vec![
                0.28172092, // land
                0.30589653, // forest
                0.13341699, // residential
                0.05937348, // road
                0.00474491, // little-objects
                0.05987466, // water
                0.08660721, // sky
                0.06836531, // hill
            ],
        }
    }

    /// Arbitrary weights; must be finite, non-negative and sum to 1 within
    /// 1e-6.
    pub fn new(weights: Vec<f64>) -> Result<ClassWeights> {
        if weights.is_empty() {
            return Err(PhgError::Config("class weights: empty".into()));
        }
        for (i, w) in weights.iter().enumerate() {
            if !w.is_finite() || *w < 0.0 {
                return Err(PhgError::Config(format!("class weight {i} is {w}")));
            }
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(PhgError::Config(format!("class weights sum to {sum}, not 1")));
        }
        Ok(ClassWeights { weights })
    }

    pub fn uniform(k: usize) -> Result<ClassWeights> {
        if k == 0 {
            return Err(PhgError::Config("uniform weights over zero classes".into()));
        }
        ClassWeights::new(vec![1.0 / k as f64; k])
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, class: usize) -> f64 {
        self.weights[class]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }
}

// --------------------------------------------------------------------------
// confusion accumulation and weighted IoU

/// Per-class one-vs-rest confusion counters, summed over every accumulated
/// frame. `tn` is derived: tn_c = pixels − tp_c − fp_c − fn_c.
///
/// Accumulators merge by summation, so per-frame accumulation parallelizes
/// and the result never depends on frame order (integer counters).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionAccumulator {
    k: usize,
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    pixels: u64,
}

impl ConfusionAccumulator {
    pub fn new(num_classes: usize) -> Result<ConfusionAccumulator> {
        if num_classes == 0 || num_classes > 256 {
            return Err(PhgError::Config(format!(
                "confusion accumulator over {num_classes} classes"
            )));
        }
        Ok(ConfusionAccumulator {
            k: num_classes,
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            pixels: 0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn pixels(&self) -> u64 {
        self.pixels
    }

    pub fn tp(&self, c: usize) -> u64 {
        self.tp[c]
    }

    pub fn fp(&self, c: usize) -> u64 {
        self.fp[c]
    }

    pub fn fn_(&self, c: usize) -> u64 {
        self.fn_[c]
    }

    pub fn tn(&self, c: usize) -> u64 {
        self.pixels - self.tp[c] - self.fp[c] - self.fn_[c]
    }

    /// Add one frame's per-pixel counts.
    pub fn accumulate(&mut self, pred: &ClassMap, gt: &ClassMap) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(PhgError::Shape(format!(
                "confusion: pred {}x{} vs gt {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.check_labels(self.k, "confusion pred")?;
        gt.check_labels(self.k, "confusion gt")?;
        for (&p, &g) in pred.data().iter().zip(gt.data()) {
            if p == g {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[g as usize] += 1;
            }
        }
        self.pixels += pred.data().len() as u64;
        Ok(())
    }

    /// Monoid merge: counter-wise sum.
    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<()> {
        if self.k != other.k {
            return Err(PhgError::Config(format!(
                "merging accumulators over {} and {} classes",
                self.k, other.k
            )));
        }
        for c in 0..self.k {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
        self.pixels += other.pixels;
        Ok(())
    }

    /// Per-class IoU = tp / (tp + fp + fn), with 0/0 resolved by `policy`
    /// (None marks the class absent under `SkipRenormalize`).
    pub fn per_class_iou(&self, policy: AbsentClassPolicy) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let denom = self.tp[c] + self.fp[c] + self.fn_[c];
                if denom == 0 {
                    match policy {
                        AbsentClassPolicy::ZeroIou => Some(0.0),
                        AbsentClassPolicy::SkipRenormalize => None,
                    }
                } else {
                    Some(self.tp[c] as f64 / denom as f64)
                }
            })
            .collect()
    }
}

/// What a class absent from both prediction and ground truth contributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AbsentClassPolicy {
    /// IoU 0: scenes missing classes cannot reach 100. The default.
    #[default]
    ZeroIou,
    /// Drop the class and renormalize the remaining weights.
    SkipRenormalize,
}

/// Global weighted mean IoU over everything in `acc`, scaled to [0, 100].
pub fn weighted_miou_scene(acc: &ConfusionAccumulator, weights: &ClassWeights) -> Result<f64> {
    weighted_miou_scene_with(acc, weights, AbsentClassPolicy::ZeroIou)
}

pub fn weighted_miou_scene_with(
    acc: &ConfusionAccumulator,
    weights: &ClassWeights,
    policy: AbsentClassPolicy,
) -> Result<f64> {
    if acc.pixels == 0 {
        return Err(PhgError::Data("weighted mIoU over an empty accumulator".into()));
    }
    if weights.len() != acc.k {
        return Err(PhgError::Config(format!(
            "{} weights for {} classes",
            weights.len(),
            acc.k
        )));
    }
    let ious = acc.per_class_iou(policy);
    let mut score = 0.0f64;
    let mut weight_sum = 0.0f64;
    for (c, iou) in ious.iter().enumerate() {
        if let Some(v) = iou {
            score += weights.get(c) * v;
            weight_sum += weights.get(c);
        }
    }
    match policy {
        AbsentClassPolicy::ZeroIou => Ok(100.0 * score),
        AbsentClassPolicy::SkipRenormalize => {
            if weight_sum == 0.0 {
                return Err(PhgError::Data(
                    "every class absent; cannot renormalize weights".into(),
                ));
            }
            Ok(100.0 * score / weight_sum)
        }
    }
}

// --------------------------------------------------------------------------
// benchmark over scenes

#[derive(Debug, Clone)]
pub struct SceneEval {
    pub name: String,
    pub frames: usize,
    pub per_class_iou: Vec<f64>,
    pub score: f64,
}

#[derive(Debug, Clone)]
pub struct BenchmarkReport {
    pub scenes: Vec<SceneEval>,
    /// Unweighted mean of the per-scene scores.
    pub final_score: f64,
}

/// Scene-level benchmark: every frame of a scene lands in one global
/// accumulator (NOT a mean of per-frame IoUs), the scene is scored, and the
/// final number is the plain mean over scenes.
pub fn benchmark(
    scenes: &[(String, Vec<(ClassMap, ClassMap)>)],
    weights: &ClassWeights,
) -> Result<BenchmarkReport> {
    if scenes.is_empty() {
        return Err(PhgError::Config("benchmark with no scenes".into()));
    }
    let mut evals = Vec::with_capacity(scenes.len());
    for (name, frames) in scenes {
        let mut acc = ConfusionAccumulator::new(weights.len())?;
        for (pred, gt) in frames {
            acc.accumulate(pred, gt)?;
        }
        let score = weighted_miou_scene(&acc, weights)?;
        let per_class_iou = acc
            .per_class_iou(AbsentClassPolicy::ZeroIou)
            .into_iter()
            .map(|v| v.unwrap_or(0.0))
            .collect();
        evals.push(SceneEval { name: name.clone(), frames: frames.len(), per_class_iou, score });
    }
    let final_score = evals.iter().map(|e| e.score).sum::<f64>() / evals.len() as f64;
    Ok(BenchmarkReport { scenes: evals, final_score })
}

impl BenchmarkReport {
    /// CSV rows: one per scene plus a FINAL row carrying the benchmark mean.
    pub fn to_csv(&self) -> Result<String> {
        let k = self.scenes.first().map(|s| s.per_class_iou.len()).unwrap_or(0);
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["scene".to_string(), "frames".to_string()];
        for c in 0..k {
            if k == SEGMENTATION_CLASSES.len() {
                header.push(format!("iou_{}", SEGMENTATION_CLASSES[c]));
            } else {
                header.push(format!("iou_class{c}"));
            }
        }
        header.push("score".to_string());
        let io_err = |e: csv::Error| PhgError::Data(format!("csv: {e}"));
        wtr.write_record(&header).map_err(io_err)?;
        for s in &self.scenes {
            let mut row = vec![s.name.clone(), s.frames.to_string()];
            for v in &s.per_class_iou {
                row.push(format!("{v:.9}"));
            }
            row.push(format!("{:.6}", s.score));
            wtr.write_record(&row).map_err(io_err)?;
        }
        let mut final_row = vec!["FINAL".to_string(), String::new()];
        final_row.extend(std::iter::repeat(String::new()).take(k));
        final_row.push(format!("{:.6}", self.final_score));
        wtr.write_record(&final_row).map_err(io_err)?;
        let bytes = wtr.into_inner().map_err(|e| PhgError::Data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| PhgError::Data(format!("csv utf8: {e}")))
    }
}

// --------------------------------------------------------------------------
// regression metric

/// 100 × mean squared error over valid entries. A pixel passing the mask
/// contributes every channel; with no mask all pixels are valid.
pub fn l2_metric(pred: &Tensor, gt: &Tensor, valid: Option<&ClassMap>) -> Result<f64> {
    if pred.dims() != gt.dims() {
        return Err(PhgError::Shape(format!(
            "l2 metric: pred {:?} vs gt {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (c, h, w) = pred.chw();
    if let Some(m) = valid {
        if (m.height(), m.width()) != (h, w) {
            return Err(PhgError::Shape(format!(
                "l2 metric: mask {}x{} for {h}x{w} frames",
                m.height(),
                m.width()
            )));
        }
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for y in 0..h {
        for x in 0..w {
            if let Some(m) = valid {
                if m.at(y, x) == 0 {
                    continue;
                }
            }
            for ch in 0..c {
                let d = pred.at3(ch, y, x) as f64 - gt.at3(ch, y, x) as f64;
                sum += d * d;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(PhgError::Data("l2 metric: no valid pixels".into()));
    }
    Ok(100.0 * sum / count as f64)
}

// --------------------------------------------------------------------------
// temporal consistency

/// Dense per-pixel displacement (dx, dy), in pixels, toward one neighboring
/// frame: the content at (x, y) here appears at (x+dx, y+dy) there.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    h: usize,
    w: usize,
    dx: Vec<f32>,
    dy: Vec<f32>,
}

impl FlowField {
    pub fn new(h: usize, w: usize, dx: Vec<f32>, dy: Vec<f32>) -> Result<FlowField> {
        if dx.len() != h * w || dy.len() != h * w {
            return Err(PhgError::Shape(format!(
                "flow field {h}x{w}: dx has {} entries, dy has {}",
                dx.len(),
                dy.len()
            )));
        }
        if dx.iter().chain(&dy).any(|v| !v.is_finite()) {
            return Err(PhgError::Numeric("flow field contains non-finite values".into()));
        }
        Ok(FlowField { h, w, dx, dy })
    }

    /// Every pixel displaced by the same (dx, dy) — a camera translation.
    pub fn constant(h: usize, w: usize, dx: f32, dy: f32) -> Result<FlowField> {
        FlowField::new(h, w, vec![dx; h * w], vec![dy; h * w])
    }

    pub fn zeros(h: usize, w: usize) -> FlowField {
        FlowField { h, w, dx: vec![0.0; h * w], dy: vec![0.0; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        (self.dx[y * self.w + x], self.dy[y * self.w + x])
    }

    pub fn set(&mut self, y: usize, x: usize, dx: f32, dy: f32) {
        self.dx[y * self.w + x] = dx;
        self.dy[y * self.w + x] = dy;
    }

    /// Pack as a `[2, H, W]` tensor (plane 0 = dx, plane 1 = dy).
    pub fn to_tensor(&self) -> Tensor {
        let mut data = Vec::with_capacity(2 * self.h * self.w);
        data.extend_from_slice(&self.dx);
        data.extend_from_slice(&self.dy);
        Tensor::new(vec![2, self.h, self.w], data).expect("sizes agree by construction")
    }

    pub fn from_tensor(t: &Tensor) -> Result<FlowField> {
        let (c, h, w) = match t.dims()[..] {
            [c, h, w] => (c, h, w),
            ref d => return Err(PhgError::Shape(format!("flow tensor has dims {d:?}"))),
        };
        if c != 2 {
            return Err(PhgError::Shape(format!("flow tensor has {c} channels, want 2")));
        }
        FlowField::new(h, w, t.channel(0).to_vec(), t.channel(1).to_vec())
    }
}

/// Flows attached to one frame. Interior frames need both directions; the
/// first frame has only `to_next`, the last only `to_prev`.
#[derive(Debug, Clone, Default)]
pub struct FrameFlows {
    /// Direction t → t−1.
    pub to_prev: Option<FlowField>,
    /// Direction t → t+1.
    pub to_next: Option<FlowField>,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalParams {
    /// Forward-backward consistency threshold in pixels: a warp is dropped
    /// as occluded when |flow(t→n) + flow(n→t at the landing pixel)| exceeds
    /// this. None disables the occlusion test (bounds checking remains).
    pub fb_tau: Option<f64>,
}

impl Default for TemporalParams {
    fn default() -> Self {
        TemporalParams { fb_tau: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct TemporalReport {
    /// 100 × mean over scored interior frames.
    pub video_score: f64,
    /// Per interior frame (index i is frame i+1), mean pixel score in [0,1];
    /// None when every pixel of that frame was dropped.
    pub frame_scores: Vec<Option<f64>>,
    /// Fraction of interior-frame pixels that survived warping checks.
    pub valid_fraction: f64,
}

impl TemporalReport {
    pub fn skipped_frames(&self) -> Vec<usize> {
        self.frame_scores
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.is_none().then_some(i + 1))
            .collect()
    }
}

/// Where a warp by `flow` lands, as a nearest-neighbor pixel, or None when
/// it leaves the image.
fn warp_target(
    flow: &FlowField,
    x: usize,
    y: usize,
    h: usize,
    w: usize,
) -> Option<(usize, usize, f32, f32)> {
    let (dx, dy) = flow.at(y, x);
    let xt = (x as f64 + dx as f64).round();
    let yt = (y as f64 + dy as f64).round();
    if xt < 0.0 || yt < 0.0 || xt >= w as f64 || yt >= h as f64 {
        return None;
    }
    Some((xt as usize, yt as usize, dx, dy))
}

/// Class-consistency across the optical-flow chain. Each interior frame's
/// pixels are compared against the previous and next frames after warping
/// (nearest-neighbor — interpolating class indices is meaningless), scoring
/// 0, 1/2 or 1 by match count. Pixels whose warp leaves the image or fails
/// the forward-backward occlusion test (either direction) are dropped. The
/// video score averages the interior frames and scales to [0, 100].
pub fn temporal_consistency(
    maps: &[ClassMap],
    flows: &[FrameFlows],
    params: &TemporalParams,
) -> Result<TemporalReport> {
    if maps.len() < 3 {
        return Err(PhgError::Config(format!(
            "temporal consistency needs >= 3 frames, got {}",
            maps.len()
        )));
    }
    if flows.len() != maps.len() {
        return Err(PhgError::Shape(format!(
            "{} flow entries for {} frames",
            flows.len(),
            maps.len()
        )));
    }
    let (h, w) = (maps[0].height(), maps[0].width());
    for (t, m) in maps.iter().enumerate() {
        if (m.height(), m.width()) != (h, w) {
            return Err(PhgError::Shape(format!(
                "frame {t} is {}x{}, frame 0 is {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    let flow_of = |t: usize, prev: bool| -> Result<&FlowField> {
        let slot = if prev { &flows[t].to_prev } else { &flows[t].to_next };
        let dir = if prev { "t->t-1" } else { "t->t+1" };
        let f = slot
            .as_ref()
            .ok_or_else(|| PhgError::Data(format!("frame {t}: missing {dir} flow")))?;
        if (f.height(), f.width()) != (h, w) {
            return Err(PhgError::Shape(format!(
                "frame {t} {dir} flow is {}x{}, frames are {h}x{w}",
                f.height(),
                f.width()
            )));
        }
        Ok(f)
    };

    let mut frame_scores = Vec::with_capacity(maps.len() - 2);
    let mut valid_total = 0u64;
    let mut considered_total = 0u64;
    for t in 1..maps.len() - 1 {
        let back = flow_of(t, true)?;
        let fwd = flow_of(t, false)?;
        // Reverse flows for the occlusion test live on the neighbor frames.
        let (rev_from_prev, rev_from_next) = match params.fb_tau {
            Some(_) => (Some(flow_of(t - 1, false)?), Some(flow_of(t + 1, true)?)),
            None => (None, None),
        };

        let mut sum = 0.0f64;
        let mut valid = 0u64;
        for y in 0..h {
            for x in 0..w {
                let prev_hit = check_warp(back, rev_from_prev, params.fb_tau, x, y, h, w);
                let next_hit = check_warp(fwd, rev_from_next, params.fb_tau, x, y, h, w);
                let (Some((px, py)), Some((nx, ny))) = (prev_hit, next_hit) else {
                    continue; // dropped: either warp invalid
                };
                let here = maps[t].at(y, x);
                let mut matches = 0u32;
                if maps[t - 1].at(py, px) == here {
                    matches += 1;
                }
                if maps[t + 1].at(ny, nx) == here {
                    matches += 1;
                }
                sum += matches as f64 / 2.0;
                valid += 1;
            }
        }
        considered_total += (h * w) as u64;
        valid_total += valid;
        frame_scores.push((valid > 0).then(|| sum / valid as f64));
    }

    let scored: Vec<f64> = frame_scores.iter().filter_map(|s| *s).collect();
    if scored.is_empty() {
        return Err(PhgError::Data(
            "temporal consistency: every interior frame had zero valid pixels".into(),
        ));
    }
    Ok(TemporalReport {
        video_score: 100.0 * scored.iter().sum::<f64>() / scored.len() as f64,
        frame_scores,
        valid_fraction: valid_total as f64 / considered_total as f64,
    })
}

/// One warp: bounds check plus optional forward-backward occlusion check
/// against the neighbor's reverse flow at the landing pixel.
fn check_warp(
    flow: &FlowField,
    reverse: Option<&FlowField>,
    fb_tau: Option<f64>,
    x: usize,
    y: usize,
    h: usize,
    w: usize,
) -> Option<(usize, usize)> {
    let (xt, yt, dx, dy) = warp_target(flow, x, y, h, w)?;
    if let (Some(tau), Some(rev)) = (fb_tau, reverse) {
        let (rdx, rdy) = rev.at(yt, xt);
        let ex = dx as f64 + rdx as f64;
        let ey = dy as f64 + rdy as f64;
        if (ex * ex + ey * ey).sqrt() > tau {
            return None;
        }
    }
    Some((xt, yt))
}
