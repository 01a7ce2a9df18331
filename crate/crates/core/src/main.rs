//! `graphdive` command-line interface.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use graphdive::graph::Split;
use graphdive::io;
use graphdive::metrics;
use graphdive::train::{self, TrainConfig};

#[derive(Parser)]
#[command(
    name = "graphdive",
    about = "Imbalanced graph classification with a mixture of diverse experts",
    version
)]
struct Cli {
    /// Override the seed from any config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for intra-run parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Print wall-clock time per phase.
    #[arg(long, global = true)]
    time: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic imbalanced benchmark dataset.
    Synth {
        /// Spec file (flat key=value; see README).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; prints one loss/metric line per epoch.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Training config (flat key=value mirroring TrainConfig).
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint instead of initializing.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the report table.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Split: train | valid | test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid-search experts and lambda; writes the full table.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Expert grid: a..b inclusive range or comma list (default from config).
        #[arg(long)]
        grid_m: Option<String>,
        /// Lambda grid: comma list (default from config).
        #[arg(long)]
        grid_lambda: Option<String>,
        /// Seeds: a..b inclusive range or comma list (default: the run seed).
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-class mean gate weights of a trained checkpoint.
    AnalyzeExperts {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference validation of all loss variants; nonzero exit on
    /// failure.
    Gradcheck {
        /// Optional config; its seed becomes the suite's base seed.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Number of seeds to run.
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("error: could not configure {threads} threads: {e}");
            return ExitCode::FAILURE;
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

struct Phase {
    enabled: bool,
    name: &'static str,
    start: Instant,
}

impl Phase {
    fn start(enabled: bool, name: &'static str) -> Self {
        Phase {
            enabled,
            name,
            start: Instant::now(),
        }
    }
}

impl Drop for Phase {
    fn drop(&mut self) {
        if self.enabled {
            eprintln!(
                "[time] {}: {:.3} s",
                self.name,
                self.start.elapsed().as_secs_f64()
            );
        }
    }
}

fn run(cli: Cli) -> Result<(), String> {
    let timing = cli.time;
    match cli.cmd {
        Cmd::Synth { spec, out } => {
            let _t = Phase::start(timing, "synth");
            let text = std::fs::read_to_string(&spec)
                .map_err(|e| format!("reading {}: {e}", spec.display()))?;
            let mut parsed = io::parse_synth_spec(&text).map_err(|e| e.to_string())?;
            if let Some(seed) = cli.seed {
                parsed.seed = seed;
            }
            let ds = io::synth_generate(&parsed).map_err(|e| e.to_string())?;
            io::save_dataset(&ds, &out).map_err(|e| e.to_string())?;
            println!(
                "wrote {} graphs ({} tasks) to {}",
                ds.len(),
                ds.num_tasks(),
                out.display()
            );
            Ok(())
        }
        Cmd::Train {
            data,
            config,
            out,
            resume,
        } => {
            let ds = {
                let _t = Phase::start(timing, "load");
                io::load_dataset(&data).map_err(|e| e.to_string())?
            };
            let mut cfg = load_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            let ckpt = {
                let _t = Phase::start(timing, "train");
                let epochs = cfg.epochs;
                let mut on_epoch = |epoch: usize, loss: f64, auc: Option<f64>| {
                    println!(
                        "epoch {}/{} train_loss={:.6} val_auc={}",
                        epoch + 1,
                        epochs,
                        loss,
                        auc.map_or_else(|| "undefined".to_string(), |a| format!("{a:.6}")),
                    );
                };
                match resume {
                    Some(path) => {
                        let mut prev = io::load_checkpoint(&path).map_err(|e| e.to_string())?;
                        prev.cfg.epochs = cfg.epochs;
                        train::resume_with(prev, &ds, &mut on_epoch).map_err(|e| e.to_string())?
                    }
                    None => {
                        train::train_with(&cfg, &ds, &mut on_epoch).map_err(|e| e.to_string())?
                    }
                }
            };
            let _t = Phase::start(timing, "save");
            io::save_checkpoint(&ckpt, &out).map_err(|e| e.to_string())?;
            println!(
                "checkpoint at epoch {} (best epoch {}) written to {}",
                ckpt.epoch,
                ckpt.history.best_epoch + 1,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            data,
            ckpt,
            split,
            out,
        } => {
            let ds = io::load_dataset(&data).map_err(|e| e.to_string())?;
            let ckpt = io::load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let split: Split = split.parse()?;
            let _t = Phase::start(timing, "eval");
            let model = ckpt.best_model().map_err(|e| e.to_string())?;
            let report = metrics::evaluate(&model, &ds, split, ckpt.cfg.variant.uses_mean_mix())
                .map_err(|e| e.to_string())?;
            let text = io::render_eval_report(&report);
            io::write_atomic(&out, text.as_bytes()).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(())
        }
        Cmd::Sweep {
            data,
            config,
            grid_m,
            grid_lambda,
            seeds,
            out,
        } => {
            let ds = io::load_dataset(&data).map_err(|e| e.to_string())?;
            let mut cfg = load_config(&config)?;
            if let Some(seed) = cli.seed {
                cfg.seed = seed;
            }
            if let Some(g) = grid_m {
                cfg.grid_m = parse_usize_list(&g)?;
            }
            if let Some(g) = grid_lambda {
                cfg.grid_lambda = parse_f64_list(&g)?;
            }
            let seed_list = match seeds {
                Some(s) => parse_u64_list(&s)?,
                None => vec![cfg.seed],
            };
            let _t = Phase::start(timing, "sweep");
            let table = train::sweep(&cfg, &ds, &seed_list).map_err(|e| e.to_string())?;
            let text = io::render_sweep_table(&table);
            io::write_atomic(&out, text.as_bytes()).map_err(|e| e.to_string())?;
            print!("{text}");
            let best = &table.rows[table.best];
            println!("best: experts={} lambda={}", best.experts, best.lambda);
            Ok(())
        }
        Cmd::AnalyzeExperts {
            data,
            ckpt,
            split,
            task,
            out,
        } => {
            let ds = io::load_dataset(&data).map_err(|e| e.to_string())?;
            let ckpt = io::load_checkpoint(&ckpt).map_err(|e| e.to_string())?;
            let split: Split = split.parse()?;
            let _t = Phase::start(timing, "analyze");
            let model = ckpt.best_model().map_err(|e| e.to_string())?;
            let usage =
                metrics::expert_usage(&model, &ds, split, task).map_err(|e| e.to_string())?;
            let text = io::render_expert_usage(&usage);
            io::write_atomic(&out, text.as_bytes()).map_err(|e| e.to_string())?;
            print!("{text}");
            Ok(())
        }
        Cmd::Gradcheck { config, seeds } => {
            let base = match config {
                Some(path) => load_config(&path)?.seed,
                None => 0,
            };
            let base = cli.seed.unwrap_or(base);
            let _t = Phase::start(timing, "gradcheck");
            let seed_list: Vec<u64> = (0..seeds as u64).map(|i| base + i).collect();
            let cases = train::gradcheck_suite(&seed_list).map_err(|e| e.to_string())?;
            let mut worst: f64 = 0.0;
            let mut failures = 0usize;
            for c in &cases {
                worst = worst.max(c.max_rel_error);
                let ok = c.max_rel_error < 1e-4;
                if !ok {
                    failures += 1;
                }
                println!(
                    "{} variant={} backbone={} M={} seed={} max_rel_error={:.3e}",
                    if ok { "ok  " } else { "FAIL" },
                    c.variant,
                    c.backbone,
                    c.experts,
                    c.seed,
                    c.max_rel_error,
                );
            }
            println!(
                "gradcheck: {} cases, worst max_rel_error = {:.3e}",
                cases.len(),
                worst
            );
            if failures > 0 {
                return Err(format!("{failures} gradient checks failed"));
            }
            Ok(())
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig, String> {
    let text =
        std::fs::read_to_string(path).map_err(|e| format!("reading {}: {e}", path.display()))?;
    io::parse_train_config(&text).map_err(|e| e.to_string())
}

/// `a..b` inclusive range or comma-separated list.
fn parse_usize_list(s: &str) -> Result<Vec<usize>, String> {
    if let Some((a, b)) = s.split_once("..") {
        let a: usize = a.trim().parse().map_err(|e| format!("bad range start: {e}"))?;
        let b: usize = b.trim().parse().map_err(|e| format!("bad range end: {e}"))?;
        if b < a {
            return Err(format!("empty range {s}"));
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|v| v.trim().parse().map_err(|e| format!("bad value {v:?}: {e}")))
        .collect()
}

fn parse_u64_list(s: &str) -> Result<Vec<u64>, String> {
    Ok(parse_usize_list(s)?.into_iter().map(|v| v as u64).collect())
}

fn parse_f64_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|e| format!("bad value {v:?}: {e}")))
        .collect()
}
