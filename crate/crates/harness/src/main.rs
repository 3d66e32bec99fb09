use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use semadv_core::models::{accuracy_on, gen_corpus, Dataset};
use semadv_core::splat3d::splat_view_corpus;
use semadv_core::taxonomy::{build_tasks, closure_subgraph, parse_edges, parse_labels, select_abstracted, write_tasks, HyponymyGraph};
use semadv_core::{Error, Result};
use semadv_harness::config::{Config, ExperimentConfig, Mode};
use semadv_harness::experiment::{schedule_for, train_classifier_stage, train_denoiser_stage};
use semadv_harness::manifest::{RunManifest, MANIFEST_FILE};
use semadv_harness::{evaluate_runs, render_report, replay, run_config};

#[derive(Parser)]
#[command(name = "semadv", version, about = "Semantically constrained adversarial sampling on desk-scale models")]
#[command(after_help = "Set SEMADV_THREADS to bound the worker thread count.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the conditional denoiser and save a checkpoint.
    TrainDenoiser {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides `denoiser.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
        /// Checkpoint stem; `.bin` and `.arch` are appended.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the surrogate classifier and save a checkpoint.
    TrainClassifier {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Training seed; defaults to `classifier.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `classifier.epochs`.
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run the image experiment into an empty directory.
    Attack2d {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Samples per grid cell; overrides `experiment.samples`.
        #[arg(long)]
        samples: Option<usize>,
        /// Task file from `build-taxonomy`; overrides `taxonomy.tasks`.
        #[arg(long)]
        tasks: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the splat-cloud experiment into an empty directory.
    Attack3d {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Objects per grid cell; overrides `experiment.samples`.
        #[arg(long)]
        objects: Option<usize>,
        /// Evaluation views per object; overrides `attack.views`.
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run a recorded run and compare every output byte for byte.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build abstracted-label tasks from a hyponymy edge list.
    BuildTaxonomy {
        /// `child<TAB>parent` lines.
        #[arg(long)]
        edges: PathBuf,
        /// Base labels, one per line.
        #[arg(long)]
        leaves: PathBuf,
        /// Labels never used as abstracted labels, one per line.
        #[arg(long)]
        blocklist: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        min_children: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate every records file below a directory.
    Evaluate {
        #[arg(long)]
        runs: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a run directory against its manifest and print its report.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    path.as_deref().map_or_else(|| Ok(Config::default()), Config::load)
}

fn read(path: &PathBuf) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Setup(format!("cannot read {}: {e}", path.display())))
}

fn held_out(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.mode {
        Mode::Image => gen_corpus(
            &semadv_core::models::ShapeCorpusSpec {
                resolution: cfg.side,
                seed: cfg.data_seed + 1000,
                ..Default::default()
            },
            50,
        ),
        Mode::Splat => splat_view_corpus(50, cfg.side, cfg.data_seed + 1000),
    }
}

fn print_run(summary: &semadv_harness::RunSummary) {
    print!("{}", render_report(&summary.rows));
    println!("wrote {}", summary.dir.join(MANIFEST_FILE).display());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainDenoiser { config, epochs, out } => {
            let mut c = load_config(&config)?;
            if let Some(e) = epochs {
                c.set("denoiser.epochs", e);
            }
            let cfg = ExperimentConfig::from_config(&c)?;
            let model = train_denoiser_stage(&cfg, &schedule_for(&cfg)?)?;
            let (bin, _) = model.save(&out)?;
            println!("{} parameters, wrote {}", model.param_count(), bin.display());
        }
        Command::TrainClassifier {
            config,
            out,
            seed,
            epochs,
        } => {
            let mut c = load_config(&config)?;
            if let Some(e) = epochs {
                c.set("classifier.epochs", e);
            }
            let cfg = ExperimentConfig::from_config(&c)?;
            let model = train_classifier_stage(&cfg, seed.unwrap_or(cfg.classifier.seed))?;
            let acc = accuracy_on(&model, &held_out(&cfg)?)?;
            let (bin, _) = model.save(&out)?;
            println!("held-out accuracy {acc:.4}, wrote {}", bin.display());
        }
        Command::Attack2d {
            config,
            samples,
            tasks,
            out,
        } => {
            let mut c = load_config(&config)?;
            c.set("experiment.mode", "2d");
            if let Some(n) = samples {
                c.set("experiment.samples", n);
            }
            if let Some(t) = tasks {
                c.set("taxonomy.tasks", t.display());
            }
            print_run(&run_config(&c, &out)?);
        }
        Command::Attack3d {
            config,
            objects,
            views,
            out,
        } => {
            let mut c = load_config(&config)?;
            c.set("experiment.mode", "3d");
            if let Some(n) = objects {
                c.set("experiment.samples", n);
            }
            if let Some(v) = views {
                c.set("attack.views", v);
            }
            print_run(&run_config(&c, &out)?);
        }
        Command::Replay { manifest, out } => {
            let r = replay(&manifest, &out)?;
            print_run(&r.summary);
            if !r.mismatches.is_empty() {
                return Err(Error::Contract(format!(
                    "replay differs from the recorded run in {} files: {}",
                    r.mismatches.len(),
                    r.mismatches.join(", ")
                )));
            }
            println!("replay is byte-identical");
        }
        Command::BuildTaxonomy {
            edges,
            leaves,
            blocklist,
            min_children,
            out,
        } => {
            let edges = parse_edges(&read(&edges)?)?;
            let leaves = parse_labels(&read(&leaves)?);
            let blocked = match &blocklist {
                Some(p) => parse_labels(&read(p)?),
                None => Vec::new(),
            };
            let graph = closure_subgraph(&HyponymyGraph::new(&edges, &leaves)?)?;
            let sel = select_abstracted(&graph, &blocked);
            if let Some(w) = &sel.warning {
                eprintln!("warning: {w}");
            }
            let tasks = build_tasks(&sel.labels, &graph, min_children)?;
            std::fs::write(&out, write_tasks(&tasks))?;
            println!(
                "{} abstracted labels, {} tasks, wrote {}",
                sel.labels.len(),
                tasks.len(),
                out.display()
            );
        }
        Command::Evaluate { runs, out } => {
            let rows = evaluate_runs(&runs)?;
            let text = render_report(&rows);
            std::fs::write(&out, &text)?;
            print!("{text}");
        }
        Command::Report { run } => {
            let manifest = RunManifest::load(&run.join(MANIFEST_FILE))?;
            let bad = manifest.verify(&run)?;
            print!("{}", read(&run.join("report.txt"))?);
            if !bad.is_empty() {
                return Err(Error::Contract(format!("files differ from the manifest: {}", bad.join(", "))));
            }
            println!("all {} files match the manifest", manifest.files.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
