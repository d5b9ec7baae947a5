//! One function per subcommand. All output paths are written atomically
//! (temp + rename) and every command is deterministic for a fixed seed:
//! masks and sample orders come from seeded streams drawn sequentially,
//! never from thread timing.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use phg_core::config::{decode_derivations, decode_scene_spec};
use phg_core::distill::{
    make_distill_sample, read_manifest, student_set, write_manifest, DistillConfig, DistillSample,
    FrameConsistency, SelectionMode, SelectionPolicy,
};
use phg_core::ensemble::{
    aggregate_with, enumerate_predict, frame_weighted_iou, greedy_bestk_oracle,
    greedy_topk_oracle, mean_similarity_select, nrand_predict, predict_with_masks,
    weighted_sample, AggregationRule, CandidateSet, Similarity,
};
use phg_core::error::{PhgError, Result};
use phg_core::metrics::{
    benchmark, temporal_consistency, ClassWeights, FlowField, FrameFlows, TemporalParams,
};
use phg_core::modality::{HyperEdgeMask, ModalityData, ModalityRole, ModalitySet};
use phg_core::model::{ModelSize, PhgModel, Scene, TrainConfig, TrainMode, Trainer};
use phg_core::phgt::{self, read_class_map, read_tensor, PhgtData};
use phg_core::synth::{
    gen_scene, load_bundle, load_inference_bundle, simulate_experts, standard_derivations,
    standard_modality_set,
};

use crate::data::{
    candidate_files, default_output, discover_candidate_scenes, discover_scenes, emit,
    frame_file, frame_indices, load_weights, read_config,
};

// --------------------------------------------------------------------------
// gen

pub fn run_gen(spec: &Path, out: &Path) -> Result<()> {
    let doc = read_config(spec)?;
    let mut count = 0usize;
    for section in doc.sections() {
        let name = if section.name == "scene" {
            "scene"
        } else if let Some(suffix) = section.name.strip_prefix("scene.") {
            suffix
        } else {
            continue;
        };
        let scene_spec = decode_scene_spec(section)?;
        let dir = out.join(name);
        let gen = gen_scene(&dir, &scene_spec)?;
        let experts = simulate_experts(&dir, &scene_spec)?;
        println!("{name}: {} files", gen.files_written + experts.files_written);
        count += 1;
    }
    if count == 0 {
        return Err(PhgError::Config(format!(
            "{}: no [scene] or [scene.<name>] sections",
            spec.display()
        )));
    }
    Ok(())
}

// --------------------------------------------------------------------------
// derive

pub fn run_derive(config: Option<&Path>, scenes: &Path) -> Result<()> {
    let nodes = match config {
        Some(path) => decode_derivations(&read_config(path)?)?,
        None => standard_derivations(),
    };
    for (name, dir) in discover_scenes(scenes, "rgb")? {
        let report = phg_core::pipeline::run_pipeline(&dir, &nodes)?;
        println!("{name}: wrote {} skipped {}", report.written.len(), report.skipped);
    }
    Ok(())
}

// --------------------------------------------------------------------------
// train

fn load_scene_list(root: &Path, names: &str, set: &ModalitySet) -> Result<Vec<Scene>> {
    let mut scenes = Vec::new();
    for name in names.split(',').map(str::trim).filter(|n| !n.is_empty()) {
        let dir = root.join(name);
        let frames = frame_indices(&dir, "rgb")?
            .into_iter()
            .map(|t| load_bundle(&dir, set, t))
            .collect::<Result<Vec<_>>>()?;
        scenes.push(Scene { name: name.to_string(), frames });
    }
    if scenes.is_empty() {
        return Err(PhgError::Config("empty scene list".into()));
    }
    Ok(scenes)
}

pub fn run_train(
    config_path: &Path,
    mode: &str,
    size: &str,
    out: &Path,
    log: Option<&Path>,
) -> Result<()> {
    let doc = read_config(config_path)?;
    let mut config = TrainConfig::from_section(doc.require_section("train")?)?;
    config.mode = TrainMode::parse(mode)?;
    let size = ModelSize::parse(size)?;

    let data = doc.require_section("data")?;
    // a relative data root is resolved against the config file's directory,
    // so experiment folders stay relocatable
    let root = {
        let r = PathBuf::from(data.require("root")?);
        if r.is_absolute() {
            r
        } else {
            config_path.parent().unwrap_or(Path::new(".")).join(r)
        }
    };
    let set = standard_modality_set();
    let train = load_scene_list(&root, data.require("train")?, &set)?;
    let val = load_scene_list(&root, data.require("val")?, &set)?;

    let model = PhgModel::new(&set, size, config.seed)?;
    println!("model {}: {} parameters", size.name(), model.param_count());
    let mut trainer = Trainer::new(model, config)?;
    let report = trainer.fit(&train, &val)?;

    trainer.model.save(out)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| out.with_extension("log.csv"));
    phgt::write_atomic(&log_path, report.log_csv().as_bytes())?;

    println!("best epoch {}", report.best_epoch);
    for (task, best) in &report.per_task_best {
        println!("task {task}: best epoch {} metric {:.6}", best.epoch, best.value);
    }
    Ok(())
}

// --------------------------------------------------------------------------
// infer

/// Per-intermediate masked frequencies from a `[mask-dist]` section keyed
/// by modality name.
fn load_mask_dist(path: &Path, set: &ModalitySet) -> Result<Vec<f64>> {
    let doc = read_config(path)?;
    let section = doc.require_section("mask-dist")?;
    set.specs()
        .iter()
        .filter(|s| s.role == ModalityRole::Intermediate)
        .map(|s| section.parse_as::<f64>(&s.name))
        .collect()
}

#[allow(clippy::too_many_arguments)]
pub fn run_infer(
    ckpt: &Path,
    scene: &Path,
    out: &Path,
    n: usize,
    enumerate: bool,
    mask_dist: Option<&Path>,
    p_visible: f64,
    seed: u64,
    rule: &str,
) -> Result<()> {
    let rule = match rule {
        "mean" => AggregationRule::MeanProbs,
        "vote" => AggregationRule::MajorityVote,
        other => {
            return Err(PhgError::Config(format!(
                "unknown aggregation rule '{other}' (expected mean or vote)"
            )))
        }
    };
    let model = PhgModel::load(ckpt)?;
    let frequencies = mask_dist.map(|p| load_mask_dist(p, model.set())).transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(10);

    std::fs::create_dir_all(out).map_err(|e| PhgError::io(out, e))?;
    for t in frame_indices(scene, "rgb")? {
        let bundle = load_inference_bundle(scene, model.set(), t)?;
        let frame = format!("{t:06}");
        let cands = if enumerate {
            enumerate_predict(&model, &bundle, &frame, false)?
        } else if let Some(freqs) = &frequencies {
            let masks: Vec<HyperEdgeMask> =
                (0..n).map(|_| weighted_sample(freqs, &mut rng)).collect::<Result<_>>()?;
            predict_with_masks(&model, &bundle, &frame, masks)?
        } else {
            nrand_predict(&model, &bundle, &frame, n, p_visible, &mut rng)?
        };
        cands.save(&out.join(format!("{frame}.phgc")))?;

        let all: Vec<usize> = (0..cands.len()).collect();
        for (name, value) in aggregate_with(&cands, &all, rule)? {
            let dir = out.join(&name);
            std::fs::create_dir_all(&dir).map_err(|e| PhgError::io(&dir, e))?;
            let data = match value {
                ModalityData::Continuous(t) => PhgtData::F32(t),
                ModalityData::Categorical(m) => PhgtData::U8(m),
            };
            phgt::write_phgt(&dir.join(frame_file(t)), &data)?;
        }
        println!("{frame}: {} candidates", cands.len());
    }
    Ok(())
}

// --------------------------------------------------------------------------
// eval

pub fn run_eval(
    pred: &Path,
    gt: &Path,
    weights: Option<&Path>,
    modality: Option<&str>,
    out: Option<&Path>,
) -> Result<()> {
    let weights = load_weights(weights)?;
    let modality = modality.unwrap_or("gt-semantic");
    let mut scenes = Vec::new();
    for (name, dir) in discover_scenes(pred, modality)? {
        let gt_dir = if gt.join(modality).is_dir() { gt.to_path_buf() } else { gt.join(&name) };
        let mut pairs = Vec::new();
        for t in frame_indices(&dir, modality)? {
            let p = read_class_map(&dir.join(modality).join(frame_file(t)))?;
            let g = read_class_map(&gt_dir.join(modality).join(frame_file(t)))?;
            pairs.push((p, g));
        }
        scenes.push((name, pairs));
    }
    let report = benchmark(&scenes, &weights)?;
    let csv = report.to_csv()?;
    if out.is_some() {
        println!("final {:.6}", report.final_score);
    }
    emit(out, &csv)
}

// --------------------------------------------------------------------------
// consistency

pub fn run_consistency(
    pred: &Path,
    flows: &Path,
    modality: Option<&str>,
    tau: Option<f64>,
    out: Option<&Path>,
) -> Result<()> {
    let modality = modality.unwrap_or("gt-semantic");
    let params = TemporalParams { fb_tau: tau };
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| PhgError::Data(format!("csv: {e}"));
    wtr.write_record(["scene", "frames", "score", "valid_fraction"]).map_err(csv_err)?;

    let mut scores = Vec::new();
    let mut valids = Vec::new();
    let mut total_frames = 0usize;
    for (name, dir) in discover_scenes(pred, modality)? {
        let flow_dir =
            if flows.join("flow-fwd").is_dir() { flows.to_path_buf() } else { flows.join(&name) };
        let frames = frame_indices(&dir, modality)?;
        let mut maps = Vec::new();
        let mut frame_flows = Vec::new();
        for (pos, &t) in frames.iter().enumerate() {
            maps.push(read_class_map(&dir.join(modality).join(frame_file(t)))?);
            let read_flow = |kind: &str| -> Result<Option<FlowField>> {
                let path = flow_dir.join(kind).join(frame_file(t));
                if path.exists() {
                    Ok(Some(FlowField::from_tensor(&read_tensor(&path)?)?))
                } else {
                    Ok(None)
                }
            };
            frame_flows.push(FrameFlows {
                to_prev: if pos > 0 { read_flow("flow-bwd")? } else { None },
                to_next: if pos + 1 < frames.len() { read_flow("flow-fwd")? } else { None },
            });
        }
        let report = temporal_consistency(&maps, &frame_flows, &params)?;
        wtr.write_record([
            name.as_str(),
            &maps.len().to_string(),
            &format!("{:.6}", report.video_score),
            &format!("{:.6}", report.valid_fraction),
        ])
        .map_err(csv_err)?;
        total_frames += maps.len();
        scores.push(report.video_score);
        valids.push(report.valid_fraction);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    wtr.write_record([
        "FINAL",
        &total_frames.to_string(),
        &format!("{:.6}", mean(&scores)),
        &format!("{:.6}", mean(&valids)),
    ])
    .map_err(csv_err)?;
    let bytes = wtr.into_inner().map_err(|e| PhgError::Data(format!("csv: {e}")))?;
    let text = String::from_utf8(bytes).map_err(|e| PhgError::Data(format!("csv utf8: {e}")))?;
    if out.is_some() {
        println!("final {:.6}", mean(&scores));
    }
    emit(out, &text)
}

// --------------------------------------------------------------------------
// select

/// Consistency of every candidate file under `root`, in (scene, frame)
/// order.
fn collect_consistencies(
    root: &Path,
    modality: Option<&str>,
    similarity: Similarity,
    weights: &ClassWeights,
) -> Result<Vec<FrameConsistency>> {
    let mut out = Vec::new();
    let mut output: Option<String> = None;
    for (scene, dir) in discover_candidate_scenes(root)? {
        for file in candidate_files(&dir)? {
            let cands = CandidateSet::load(&file)?;
            let name = match (modality, &output) {
                (Some(m), _) => m.to_string(),
                (None, Some(o)) => String::clone(o),
                (None, None) => default_output(cands.set())?,
            };
            out.push(phg_core::distill::frame_consistency(
                &cands, &name, &scene, similarity, weights, None,
            )?);
            output = Some(name);
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub fn run_select(
    candidates: &Path,
    policy: &str,
    keep: f64,
    out: &Path,
    similarity: &str,
    weights: Option<&Path>,
    modality: Option<&str>,
) -> Result<()> {
    let policy = SelectionPolicy { mode: SelectionMode::parse(policy)?, keep_percent: keep };
    let weights = load_weights(weights)?;
    let similarity = Similarity::parse(similarity)?;
    let consistencies = collect_consistencies(candidates, modality, similarity, &weights)?;
    let kept = phg_core::distill::select_pseudolabels(&consistencies, &policy)?;
    let rows: Vec<(String, f64)> = kept
        .iter()
        .map(|&i| {
            let c = &consistencies[i];
            (format!("{}/{}", c.scene, c.frame), c.similarity)
        })
        .collect();
    write_manifest(out, &rows)?;
    println!("kept {} of {} frames", rows.len(), consistencies.len());
    Ok(())
}

// --------------------------------------------------------------------------
// distill

#[allow(clippy::too_many_arguments)]
pub fn run_distill(
    teacher: &Path,
    scenes: &Path,
    frames: &Path,
    size: &str,
    out: &Path,
    n: usize,
    p_visible: f64,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<()> {
    let teacher = PhgModel::load(teacher)?;
    let sset = student_set(teacher.set())?;
    let mut student = PhgModel::new(&sset, ModelSize::parse(size)?, seed)?;
    println!("student: {} parameters", student.param_count());

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(11);
    let mut samples: Vec<DistillSample> = Vec::new();
    for (path, _) in read_manifest(frames)? {
        let (scene, frame) = path.rsplit_once('/').ok_or_else(|| PhgError::Format {
            path: frames.to_path_buf(),
            reason: format!("manifest entry '{path}' is not scene/frame"),
        })?;
        let t: usize = frame.parse().map_err(|_| PhgError::Format {
            path: frames.to_path_buf(),
            reason: format!("frame '{frame}' is not a number"),
        })?;
        // inference bundles never touch the reference files: the student
        // pipeline stays reference-free end to end
        let bundle = load_inference_bundle(&scenes.join(scene), teacher.set(), t)?;
        samples.push(make_distill_sample(
            &teacher, &sset, &bundle, scene, frame, n, p_visible, &mut rng,
        )?);
    }

    let config = DistillConfig { epochs, batch_size, seed, ..DistillConfig::default() };
    let losses = phg_core::distill::distill_student(&mut student, &samples, &config)?;
    student.save(out)?;

    let mut csv = String::from("epoch,kl\n");
    for (i, loss) in losses.iter().enumerate() {
        csv.push_str(&format!("{},{loss:.6}\n", i + 1));
    }
    phgt::write_atomic(&out.with_extension("log.csv"), csv.as_bytes())?;
    match losses.last() {
        Some(kl) => println!("final kl {kl:.6} over {} samples", samples.len()),
        None => println!("no training epochs; student left at initialization"),
    }
    Ok(())
}

// --------------------------------------------------------------------------
// oracle

struct OracleFrame {
    scene: String,
    frame: String,
    cands: CandidateSet,
    gt: phg_core::tensor::ClassMap,
}

fn load_oracle_frames(
    candidates: &Path,
    gt: &Path,
    modality: Option<&str>,
) -> Result<(Vec<OracleFrame>, String)> {
    let mut frames = Vec::new();
    let mut output = None;
    for (scene, dir) in discover_candidate_scenes(candidates)? {
        for file in candidate_files(&dir)? {
            let cands = CandidateSet::load(&file)?;
            let name = match (modality, &output) {
                (Some(m), _) => m.to_string(),
                (None, Some(o)) => String::clone(o),
                (None, None) => default_output(cands.set())?,
            };
            let t: usize = cands.frame().parse().map_err(|_| PhgError::Format {
                path: file.clone(),
                reason: format!("frame id '{}' is not a number", cands.frame()),
            })?;
            let gt_dir = if gt.join(&name).is_dir() { gt.to_path_buf() } else { gt.join(&scene) };
            let gt_map = read_class_map(&gt_dir.join(&name).join(frame_file(t)))?;
            frames.push(OracleFrame {
                scene: scene.clone(),
                frame: cands.frame().to_string(),
                cands,
                gt: gt_map,
            });
            output = Some(name);
        }
    }
    Ok((frames, output.expect("at least one candidate file")))
}

#[allow(clippy::too_many_arguments)]
pub fn run_oracle(
    candidates: &Path,
    gt: &Path,
    algo: &str,
    weights: Option<&Path>,
    modality: Option<&str>,
    k: usize,
    reference: usize,
    seed: u64,
    out: Option<&Path>,
) -> Result<()> {
    let weights = load_weights(weights)?;
    let (frames, output) = load_oracle_frames(candidates, gt, modality)?;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| PhgError::Data(format!("csv: {e}"));

    match algo {
        "topk" => {
            wtr.write_record(["scene", "frame", "k", "score", "best"]).map_err(csv_err)?;
            for f in &frames {
                let report = greedy_topk_oracle(&f.cands, &output, &f.gt, &weights)?;
                let best_k = report.chosen.len();
                for (kk, score) in &report.per_k {
                    wtr.write_record([
                        f.scene.as_str(),
                        f.frame.as_str(),
                        &kk.to_string(),
                        &format!("{score:.6}"),
                        if *kk == best_k { "1" } else { "0" },
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        "bestk" => {
            wtr.write_record(["scene", "frame", "best_k", "score"]).map_err(csv_err)?;
            let refs: Vec<(&CandidateSet, &phg_core::tensor::ClassMap)> =
                frames.iter().map(|f| (&f.cands, &f.gt)).collect();
            let report = greedy_bestk_oracle(&refs, &output, &weights)?;
            for (f, (best_k, score)) in frames.iter().zip(&report.per_frame) {
                wtr.write_record([
                    f.scene.as_str(),
                    f.frame.as_str(),
                    &best_k.to_string(),
                    &format!("{score:.6}"),
                ])
                .map_err(csv_err)?;
            }
            wtr.write_record(["FINAL", "", "", &format!("{:.6}", report.score)])
                .map_err(csv_err)?;
        }
        "meansim" => {
            wtr.write_record(["scene", "frame", "score"]).map_err(csv_err)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(12);
            for f in &frames {
                let sel = mean_similarity_select(
                    &f.cands,
                    &output,
                    reference,
                    Similarity::WeightedIou,
                    &weights,
                    k,
                    true,
                    &mut rng,
                )?;
                let map = match &sel.outputs[&output] {
                    ModalityData::Categorical(m) => m,
                    ModalityData::Continuous(_) => {
                        return Err(PhgError::Config(format!(
                            "output '{output}' is not categorical"
                        )))
                    }
                };
                let score = frame_weighted_iou(map, &f.gt, &weights)?;
                wtr.write_record([f.scene.as_str(), f.frame.as_str(), &format!("{score:.6}")])
                    .map_err(csv_err)?;
            }
        }
        other => {
            return Err(PhgError::Config(format!(
                "unknown oracle '{other}' (expected topk, bestk, or meansim)"
            )))
        }
    }

    let bytes = wtr.into_inner().map_err(|e| PhgError::Data(format!("csv: {e}")))?;
    let text = String::from_utf8(bytes).map_err(|e| PhgError::Data(format!("csv utf8: {e}")))?;
    emit(out, &text)
}
