//! End-to-end checks of the `phg` binary: the full pipeline on a small
//! dataset, plus the documented exit codes and output conventions.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use phg_core::modality::{ModalityRole, ModalitySet, ModalitySpec};
use phg_core::model::PhgModel;
use phg_core::phgt::{write_phgt, PhgtData};
use phg_core::tensor::{ClassMap, Tensor};

fn phg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_phg"))
        .args(args)
        .output()
        .expect("spawn phg")
}

fn phg_ok(args: &[&str]) -> String {
    let out = phg(args);
    assert!(
        out.status.success(),
        "phg {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

fn write(path: &Path, text: &str) {
    std::fs::write(path, text).unwrap();
}

fn scene_spec(dir: &Path) -> PathBuf {
    let path = dir.join("scenes.cfg");
    write(
        &path,
        "[scene.a]\nseed = 5\nframes = 3\nheight = 32\nwidth = 48\n\n\
         [scene.b]\nseed = 6\nframes = 3\nheight = 32\nwidth = 48\n",
    );
    path
}

#[test]
fn pipeline_runs_end_to_end_on_a_small_dataset() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = scene_spec(root);
    let scenes = root.join("scenes");

    phg_ok(&["gen", "--spec", spec.to_str().unwrap(), "--out", scenes.to_str().unwrap()]);
    assert!(scenes.join("a/rgb/000000.phgt").exists());
    assert!(scenes.join("b/flow-fwd/000000.phgt").exists());

    phg_ok(&["derive", "--scenes", scenes.to_str().unwrap()]);
    assert!(scenes.join("a/sem_expert8/000001.phgt").exists());
    assert!(scenes.join("a/normals_svd/000002.phgt").exists());

    let train_cfg = root.join("train.cfg");
    write(
        &train_cfg,
        "[data]\nroot = scenes\ntrain = a\nval = b\n\n\
         [train]\nmode = 1rand\nepochs = 1\nbatch_size = 2\nseed = 0\n",
    );
    let ckpt = root.join("model.ckpt");
    let out = phg_ok(&[
        "train",
        "--config",
        train_cfg.to_str().unwrap(),
        "--mode",
        "1rand",
        "--size",
        "150k",
        "--out",
        ckpt.to_str().unwrap(),
    ]);
    assert!(out.contains("154326 parameters"));
    assert!(ckpt.exists());
    let log = std::fs::read_to_string(root.join("model.log.csv")).unwrap();
    assert!(log.starts_with("epoch,train_loss,val_loss"));

    let pred = root.join("pred/b");
    phg_ok(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scene",
        scenes.join("b").to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--n",
        "4",
        "--seed",
        "1",
    ]);
    assert!(pred.join("000000.phgc").exists());
    assert!(pred.join("gt-semantic/000000.phgt").exists());

    let csv = phg_ok(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        scenes.join("b").to_str().unwrap(),
    ]);
    assert!(csv.starts_with("scene,frames,iou_land"));
    assert!(csv.lines().last().unwrap().starts_with("FINAL"));

    let manifest = root.join("kept.tsv");
    let out = phg_ok(&[
        "select",
        "--candidates",
        root.join("pred").to_str().unwrap(),
        "--policy",
        "per-scene",
        "--keep",
        "34",
        "--out",
        manifest.to_str().unwrap(),
    ]);
    assert!(out.contains("kept 2 of 3 frames"), "ceil(34% of 3) = 2: {out}");
    let kept = std::fs::read_to_string(&manifest).unwrap();
    assert_eq!(kept.lines().filter(|l| l.starts_with("b/")).count(), 2);

    let student = root.join("student.ckpt");
    phg_ok(&[
        "distill",
        "--teacher",
        ckpt.to_str().unwrap(),
        "--scenes",
        scenes.to_str().unwrap(),
        "--frames",
        manifest.to_str().unwrap(),
        "--size",
        "150k",
        "--out",
        student.to_str().unwrap(),
        "--n",
        "3",
        "--epochs",
        "1",
    ]);
    assert!(student.exists());
    let loaded = PhgModel::load(&student).unwrap();
    assert_eq!(loaded.set().input_channel_count(), 3, "student input is RGB only");

    let oracle_csv = phg_ok(&[
        "oracle",
        "--candidates",
        root.join("pred").to_str().unwrap(),
        "--gt",
        scenes.to_str().unwrap(),
        "--algo",
        "bestk",
    ]);
    assert!(oracle_csv.starts_with("scene,frame,best_k,score"));
    assert!(oracle_csv.lines().last().unwrap().starts_with("FINAL"));

    let cons = phg_ok(&[
        "consistency",
        "--pred",
        pred.to_str().unwrap(),
        "--flows",
        scenes.join("b").to_str().unwrap(),
    ]);
    assert!(cons.starts_with("scene,frames,score,valid_fraction"));
}

#[test]
fn eval_of_predictions_equal_to_reference_scores_one_hundred() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("one.cfg");
    write(&spec, "[scene.s]\nseed = 9\nframes = 3\nheight = 32\nwidth = 48\n");
    let scenes = root.join("scenes");
    phg_ok(&["gen", "--spec", spec.to_str().unwrap(), "--out", scenes.to_str().unwrap()]);

    let csv = phg_ok(&[
        "eval",
        "--pred",
        scenes.join("s").to_str().unwrap(),
        "--gt",
        scenes.join("s").to_str().unwrap(),
    ]);
    let final_line = csv.lines().last().unwrap();
    // the shipped class weights sum to 1 + 1e-8, so a perfect score is
    // 100.000001, not 100 exactly
    let score: f64 = final_line.rsplit(',').next().unwrap().parse().unwrap();
    assert!((score - 100.0).abs() < 1e-4, "self-evaluation should score 100: {final_line}");
}

#[test]
fn enumerate_walks_every_hyper_edge_of_a_small_set() {
    // Two intermediates -> 3 enumerable hyper-edges (all-masked excluded).
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let set = ModalitySet::new(vec![
        ModalitySpec::continuous("rgb", ModalityRole::Input, 3),
        ModalitySpec::continuous("aux_a", ModalityRole::Intermediate, 1),
        ModalitySpec::continuous("aux_b", ModalityRole::Intermediate, 1),
        ModalitySpec::categorical("gt-semantic", ModalityRole::Output, 4),
    ])
    .unwrap();
    let model = PhgModel::with_width(&set, 6, 3).unwrap();
    let ckpt = root.join("tiny.ckpt");
    model.save(&ckpt).unwrap();

    let scene = root.join("scene");
    for (name, ch) in [("rgb", 3), ("aux_a", 1), ("aux_b", 1)] {
        let dir = scene.join(name);
        std::fs::create_dir_all(&dir).unwrap();
        let data: Vec<f32> = (0..ch * 16 * 16).map(|i| (i % 17) as f32 / 17.0).collect();
        write_phgt(
            &dir.join("000000.phgt"),
            &PhgtData::F32(Tensor::new(vec![ch, 16, 16], data).unwrap()),
        )
        .unwrap();
    }
    // reference maps exist but must not be needed for inference
    let gt_dir = scene.join("gt-semantic");
    std::fs::create_dir_all(&gt_dir).unwrap();
    write_phgt(&gt_dir.join("000000.phgt"), &PhgtData::U8(ClassMap::filled(16, 16, 1))).unwrap();

    let pred = root.join("pred");
    let out = phg_ok(&[
        "infer",
        "--ckpt",
        ckpt.to_str().unwrap(),
        "--scene",
        scene.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--enumerate",
    ]);
    assert!(out.contains("000000: 3 candidates"), "{out}");
}

#[test]
fn contract_violations_exit_with_the_documented_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    // usage/config errors exit 2
    let bad_cfg = root.join("bad.cfg");
    write(&bad_cfg, "just some text, no sections\n");
    let out = phg(&["gen", "--spec", bad_cfg.to_str().unwrap(), "--out", root.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "malformed config");
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = phg(&[
        "select",
        "--candidates",
        root.to_str().unwrap(),
        "--policy",
        "sideways",
        "--keep",
        "25",
        "--out",
        root.join("m.tsv").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "unknown policy");

    // missing data exits 3
    let out = phg(&[
        "eval",
        "--pred",
        root.join("nowhere").to_str().unwrap(),
        "--gt",
        root.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "missing prediction directory");

    // clap-level usage errors also exit 2
    let out = phg(&["train"]);
    assert_eq!(out.status.code(), Some(2), "missing required arguments");

    // and failed commands leave no partial output file behind
    assert!(!root.join("m.tsv").exists());
}
