//! `phg` — scene generation, derivation, training, ensemble inference,
//! evaluation, pseudo-label selection, and distillation from one binary.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numeric
//! failure. Outputs are deterministic for a fixed `--seed` regardless of
//! `--jobs`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use phg_core::error::PhgError;

mod commands;
mod data;

#[derive(Parser)]
#[command(name = "phg", version, about = "Pseudo-hypergraph masked-autoencoder toolkit")]
struct Cli {
    /// Worker threads for frame-parallel stages (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes (ground truth + simulated experts).
    Gen {
        /// Config file with [scene] or [scene.<name>] sections.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory; one subdirectory per scene section.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the derivation pipeline over every scene in a directory.
    Derive {
        /// Derivation graph config ([derive.<name>] sections); the standard
        /// graph when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Scene directory, or a directory of scenes.
        #[arg(long)]
        scenes: PathBuf,
    },
    /// Fit a model; writes a checkpoint and an epoch CSV.
    Train {
        /// Config file with [train] and [data] sections.
        #[arg(long)]
        config: PathBuf,
        /// Training mode: 1all or 1rand.
        #[arg(long)]
        mode: String,
        /// Model size: 150k, 430k, 1.1m, or 4.4m.
        #[arg(long)]
        size: String,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Epoch CSV path (default: checkpoint path with .log.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Random-mask ensemble inference over one scene: candidate sets plus
    /// aggregated predictions.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        /// Output directory: <frame>.phgc candidates and per-modality
        /// aggregate folders.
        #[arg(long)]
        out: PathBuf,
        /// Candidates per frame.
        #[arg(long, default_value_t = 20)]
        n: usize,
        /// Enumerate every hyper-edge instead of sampling N.
        #[arg(long)]
        enumerate: bool,
        /// Config file with a [mask-dist] section of per-intermediate
        /// masked frequencies; overrides Bernoulli sampling.
        #[arg(long)]
        mask_dist: Option<PathBuf>,
        /// Per-intermediate visibility probability for sampled masks.
        #[arg(long, default_value_t = 0.5)]
        p_visible: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Aggregation for categorical outputs: mean or vote.
        #[arg(long, default_value = "mean")]
        rule: String,
    },
    /// Benchmark predicted class maps against reference maps (CSV).
    Eval {
        /// Prediction scene directory, or a directory of scenes.
        #[arg(long)]
        pred: PathBuf,
        /// Reference directory mirroring the prediction layout.
        #[arg(long)]
        gt: PathBuf,
        /// Config file with a [class-weights] section (default: shipped
        /// aerial weights).
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Class-map modality to score (default: gt-semantic).
        #[arg(long)]
        modality: Option<String>,
        /// CSV output path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temporal consistency of predicted class maps under flow warps (CSV).
    Consistency {
        #[arg(long)]
        pred: PathBuf,
        /// Directory with flow-fwd/flow-bwd modalities per scene.
        #[arg(long)]
        flows: PathBuf,
        #[arg(long)]
        modality: Option<String>,
        /// Forward-backward occlusion threshold in pixels.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
        /// Disable forward-backward occlusion filtering.
        #[arg(long)]
        no_fb: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the most self-consistent frames; writes a manifest.
    Select {
        /// Candidate directory (scene subdirectories of .phgc files).
        #[arg(long)]
        candidates: PathBuf,
        /// Selection mode: global or per-scene.
        #[arg(long)]
        policy: String,
        /// Percentage of frames to keep, in (0, 100].
        #[arg(long)]
        keep: f64,
        /// Manifest output path.
        #[arg(long)]
        out: PathBuf,
        /// Candidate-to-ensemble similarity: weighted-iou or accuracy.
        #[arg(long, default_value = "weighted-iou")]
        similarity: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        modality: Option<String>,
    },
    /// Distill a reference-free student from a teacher's ensemble outputs.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        /// Scenes root the manifest paths resolve against.
        #[arg(long)]
        scenes: PathBuf,
        /// Manifest of kept frames (from `select`).
        #[arg(long)]
        frames: PathBuf,
        /// Student size: 150k, 430k, 1.1m, or 4.4m.
        #[arg(long)]
        size: String,
        /// Student checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Teacher ensemble size per frame.
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = 0.5)]
        p_visible: f64,
        #[arg(long, default_value_t = 20)]
        epochs: usize,
        #[arg(long, default_value_t = 2)]
        batch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluation-only selection oracles over stored candidates (CSV).
    Oracle {
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// topk, bestk, or meansim.
        #[arg(long)]
        algo: String,
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long)]
        modality: Option<String>,
        /// Subset size for meansim.
        #[arg(long, default_value_t = 5)]
        k: usize,
        /// Reference aggregate size for meansim.
        #[arg(long, default_value_t = 3)]
        reference: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn error_code(err: &PhgError) -> u8 {
    match err {
        PhgError::Config(_) | PhgError::Cycle(_) | PhgError::OracleGuard(_) => 2,
        PhgError::Numeric(_) => 4,
        _ => 3,
    }
}

fn run(command: Command) -> phg_core::error::Result<()> {
    match command {
        Command::Gen { spec, out } => commands::run_gen(&spec, &out),
        Command::Derive { config, scenes } => commands::run_derive(config.as_deref(), &scenes),
        Command::Train { config, mode, size, out, log } => {
            commands::run_train(&config, &mode, &size, &out, log.as_deref())
        }
        Command::Infer { ckpt, scene, out, n, enumerate, mask_dist, p_visible, seed, rule } => {
            commands::run_infer(
                &ckpt,
                &scene,
                &out,
                n,
                enumerate,
                mask_dist.as_deref(),
                p_visible,
                seed,
                &rule,
            )
        }
        Command::Eval { pred, gt, weights, modality, out } => commands::run_eval(
            &pred,
            &gt,
            weights.as_deref(),
            modality.as_deref(),
            out.as_deref(),
        ),
        Command::Consistency { pred, flows, modality, tau, no_fb, out } => {
            commands::run_consistency(
                &pred,
                &flows,
                modality.as_deref(),
                (!no_fb).then_some(tau),
                out.as_deref(),
            )
        }
        Command::Select { candidates, policy, keep, out, similarity, weights, modality } => {
            commands::run_select(
                &candidates,
                &policy,
                keep,
                &out,
                &similarity,
                weights.as_deref(),
                modality.as_deref(),
            )
        }
        Command::Distill {
            teacher,
            scenes,
            frames,
            size,
            out,
            n,
            p_visible,
            epochs,
            batch_size,
            seed,
        } => commands::run_distill(
            &teacher, &scenes, &frames, &size, &out, n, p_visible, epochs, batch_size, seed,
        ),
        Command::Oracle {
            candidates,
            gt,
            algo,
            weights,
            modality,
            k,
            reference,
            seed,
            out,
        } => commands::run_oracle(
            &candidates,
            &gt,
            &algo,
            weights.as_deref(),
            modality.as_deref(),
            k,
            reference,
            seed,
            out.as_deref(),
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if jobs == 0 {
            eprintln!("error: --jobs must be positive");
            return ExitCode::from(2);
        }
        // ignore the error when a pool already exists (only possible in
        // unusual embedding scenarios; the CLI sets it once)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(error_code(&err))
        }
    }
}
