//! `mdgmix` command-line front end.
//!
//! Exit codes: 0 on success, 1 for bad flags, files or config values, 2 when
//! a stage fails at run time.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use mdgmix::adapt;
use mdgmix::config::{PairStrategy, TaskMode};
use mdgmix::mix::{build_batch, sample_intra_pairs, MixedSubgraph};
use mdgmix::nn::checkpoint;
use mdgmix::nn::model::ModelParams;
use mdgmix::pipeline::{self, Prepared};
use mdgmix::pretrain::{intra_pools, pretrain};
use mdgmix::{formats, seed, synth, Error, Result, RunConfig, SynthSpec};

#[derive(Parser, Debug)]
#[command(name = "mdgmix", version, about = "Multi-domain graph pre-training with boundary-aware subgraph mixing")]
struct Cli {
    /// Worker threads. Every stage runs serially, so any value gives the
    /// same output.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-domain dataset.
    GenSynth {
        #[arg(long)]
        out: PathBuf,
        /// JSON file with synthetic-data parameters.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Project every domain into the shared feature space.
    Align {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select boundary nodes per source domain.
    Boundaries {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build the first epoch's mixed batch and dump it.
    Mix {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pre-train and write a checkpoint.
    Pretrain {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
        /// Per-epoch losses as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Adapt prompt weights on few-shot tasks and report them.
    Adapt {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Adapt and evaluate, one JSON line per repeat.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Measure bounds and stability of a trained model.
    Diagnose {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Accuracy after dropping nodes from every source domain.
    Redundancy {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = [0.0, 0.5, 0.9])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = [0, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Dataset, config file and per-field overrides shared by the run stages.
#[derive(Args, Debug)]
struct RunArgs {
    /// Directory written by `gen-synth`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the effective config here.
    #[arg(long)]
    emit_config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    hops: Option<usize>,
    #[arg(long)]
    n_pairs: Option<usize>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epochs_pre: Option<usize>,
    #[arg(long)]
    steps_adapt: Option<usize>,
    #[arg(long)]
    lr_pre: Option<f64>,
    #[arg(long)]
    lr_down: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long, value_parser = ["node", "graph"])]
    mode: Option<String>,
    #[arg(long, value_parser = ["boundary", "random"])]
    pair_strategy: Option<String>,
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = self.$field.clone() {
                    cfg.$field = v;
                }
            )*};
        }
        set!(seed, pca_dim, hidden, hops, n_pairs, rho, gamma, epochs_pre, steps_adapt, lr_pre, lr_down, tau, shots, repeats);
        if let Some(m) = &self.mode {
            cfg.mode = if m == "graph" { TaskMode::Graph } else { TaskMode::Node };
        }
        if let Some(p) = &self.pair_strategy {
            cfg.pair_strategy = if p == "random" { PairStrategy::Random } else { PairStrategy::Boundary };
        }
        cfg.validate()?;
        if let Some(path) = &self.emit_config {
            write(path, &cfg.to_json())?;
        }
        Ok(cfg)
    }

    fn prepare(&self) -> Result<(RunConfig, Prepared)> {
        let cfg = self.config()?;
        let data = synth::read_dataset(&self.data)?;
        let prep = pipeline::prepare(&data.sources, &data.target, &cfg)?;
        Ok((cfg, prep))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(path) => write(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_model(path: &Path, cfg: &RunConfig, prep: &Prepared) -> Result<ModelParams> {
    let params = checkpoint::load(path)?;
    if params.input_dim() != cfg.pca_dim || params.num_domains() != prep.sources.len() {
        return Err(Error::Validation(format!(
            "checkpoint {} expects pca_dim {} and {} source domains, run has {} and {}",
            path.display(),
            params.input_dim(),
            params.num_domains(),
            cfg.pca_dim,
            prep.sources.len()
        )));
    }
    Ok(params)
}

fn mixed_json(m: &MixedSubgraph) -> serde_json::Value {
    json!({
        "num_nodes": m.num_nodes,
        "edges": m.edges,
        "merged_center": m.merged_center,
        "coarse_label": m.coarse_label,
        "mix_label": m.mix_label,
        "provenance": m.provenance,
        "features": m.features.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>(),
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenSynth { out, spec, seed } => {
            let spec = match spec {
                Some(path) => {
                    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
                    serde_json::from_str::<SynthSpec>(&text)
                        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?
                }
                None => SynthSpec::default(),
            };
            let data = synth::gen_synth(&spec, seed)?;
            synth::write_synth(&out, &data, &spec, seed)?;
        }
        Command::Align { run, out } => {
            let (_, prep) = run.prepare()?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            for a in prep.aligned.iter().chain(std::iter::once(&prep.target_aligned)) {
                formats::write_matrix(&out.join(format!("domain_{}.aligned", a.domain_id)), &a.matrix)?;
            }
            let centers = serde_json::to_string_pretty(&prep.centers)? + "\n";
            write(&out.join("centers.json"), &centers)?;
        }
        Command::Boundaries { run, out } => {
            let (_, prep) = run.prepare()?;
            let text = serde_json::to_string_pretty(&json!({
                "boundaries": prep.boundaries,
                "inter_pairs": prep.inter_pairs,
                "shortfall": prep.shortfall,
            }))? + "\n";
            emit(out.as_deref(), &text)?;
        }
        Command::Mix { run, out } => {
            let (cfg, prep) = run.prepare()?;
            let mut rng = seed::rng_indexed(cfg.seed, "epoch", 0);
            let intra = sample_intra_pairs(&intra_pools(&prep, cfg.intra_pool), cfg.n_pairs, &mut rng)?;
            let batch = build_batch(&prep.inter_pairs, &intra, prep.source_view(), cfg.hops, cfg.lambda_mode, &mut rng)?;
            fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;
            for (kind, list) in [("inter", &batch.inter), ("intra", &batch.intra)] {
                for (i, m) in list.iter().enumerate() {
                    let text = serde_json::to_string(&mixed_json(m))? + "\n";
                    write(&out.join(format!("{kind}_{i:03}.json")), &text)?;
                }
            }
        }
        Command::Pretrain { run, out, log } => {
            let (cfg, prep) = run.prepare()?;
            if let Some(missing) = prep.shortfall {
                eprintln!("warning: {missing} inter-domain pairs short of n_pairs = {}", cfg.n_pairs);
            }
            let trained = pretrain(&prep, &cfg)?;
            checkpoint::save(&out, &trained.params)?;
            if let Some(path) = log {
                let lines: String = trained
                    .log
                    .iter()
                    .map(|e| serde_json::to_string(e).map(|s| s + "\n"))
                    .collect::<std::result::Result<_, _>>()?;
                write(&path, &lines)?;
            }
        }
        Command::Adapt { run, checkpoint, out } => {
            let (cfg, prep) = run.prepare()?;
            let params = load_model(&checkpoint, &cfg, &prep)?;
            let view = adapt::TargetView::new(&prep.target, &prep.target_aligned, cfg.mode, cfg.hops)?;
            let labels = prep
                .target
                .labels
                .as_ref()
                .ok_or_else(|| Error::Validation("target graph has no labels".into()))?;
            let mut text = String::new();
            for r in 0..cfg.repeats as u64 {
                let (task_seed, task) = adapt::repeat_task(labels, &cfg, cfg.mode, r)?;
                let adapted = adapt::adapt(&view, &params.encoder, &prep.centers, &task, &cfg)?;
                let line = json!({
                    "target": prep.target.domain_id,
                    "seed": task_seed,
                    "alpha": adapted.prompt.alpha,
                    "trainable_params": adapted.prompt.num_params(),
                    "first_loss": adapted.losses.first(),
                    "final_loss": adapted.losses.last(),
                });
                text.push_str(&(serde_json::to_string(&line)? + "\n"));
            }
            emit(out.as_deref(), &text)?;
        }
        Command::Eval { run, checkpoint, out } => {
            let (cfg, prep) = run.prepare()?;
            let params = load_model(&checkpoint, &cfg, &prep)?;
            let records = pipeline::evaluate_target(&prep, &params, &cfg)?;
            emit(out.as_deref(), &pipeline::metrics_jsonl(&records))?;
        }
        Command::Diagnose { run, checkpoint, out } => {
            let (cfg, prep) = run.prepare()?;
            let params = load_model(&checkpoint, &cfg, &prep)?;
            let report = pipeline::diagnose(&prep, &params, &cfg)?;
            emit(out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        }
        Command::Redundancy { run, fractions, seeds, out } => {
            let cfg = run.config()?;
            let data = synth::read_dataset(&run.data)?;
            let rows = pipeline::redundancy_experiment(&data, &cfg, &fractions, &seeds)?;
            emit(out.as_deref(), &pipeline::curve_csv(&rows))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if cli.threads == 0 {
        eprintln!("error: --threads must be at least 1");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
