//! Command definitions and dispatch. Exit codes: 0 success, 1 usage,
//! 2 validation (bad config, missing or malformed inputs), 3 numerical
//! failure (non-finite values, failed gradient check).

use std::path::PathBuf;
use std::sync::Arc;

use brainlang::checkpoint::Checkpoint;
use brainlang::dataset::Split;
use brainlang::trainer::{grad_check, micro_model};
use brainlang::{Error, Result};
use clap::{Parser, Subcommand};

use crate::config::RunConfig;
use crate::pipeline::{self, read_checkpoint, read_dataset, read_json, write_json, Layout, Variant};
use crate::serve::{self, AskRequest, ServeState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "brainlang", version, about = "Brain-token language decoding pipeline")]
pub struct Cli {
    /// TOML run configuration (defaults apply to absent keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `out_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Root seed; overrides `seed`.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override any config key, e.g. `--set phase1.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic world and its split.
    Synth,
    /// Pretrain the base decoder and fit the caption projection.
    PretrainLm,
    /// Two-phase training (tokenizers, then adapters).
    Train {
        /// Train on betas shuffled across trials.
        #[arg(long, conflicts_with = "holdout")]
        control: bool,
        /// Withhold categories (comma separated; config default when empty).
        #[arg(long, value_delimiter = ',', num_args = 0..=1, value_name = "CATEGORY[,CATEGORY...]")]
        holdout: Option<Vec<String>>,
    },
    /// Score captions, QA and numerosity on the test split.
    Eval {
        /// Skip the control model even when its checkpoint exists.
        #[arg(long)]
        no_control: bool,
    },
    /// Probe a holdout-trained model on its withheld category.
    Zeroshot {
        #[arg(long, value_delimiter = ',', value_name = "CATEGORY[,CATEGORY...]")]
        holdout: Option<Vec<String>>,
    },
    /// Localizer masks and stimulation sweeps.
    Microstim {
        /// Checkpoint to probe (default: main phase-2 checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference gradient check on a micro model.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Entries probed per tensor.
        #[arg(long, default_value_t = 6)]
        per_tensor: usize,
    },
    /// Answer one question about one trial (same core as the service).
    Generate {
        /// Trial id from the dataset.
        #[arg(long)]
        trial: u32,
        #[arg(long)]
        question: String,
        /// Stimulation strength; needs --mask when nonzero.
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        beta: f64,
        /// Mask id, e.g. `top1pct`.
        #[arg(long)]
        mask: Option<String>,
        /// Checkpoint to load (default: main phase-2 checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// HTTP JSON service.
    Serve {
        /// Listen address (default from config).
        #[arg(long)]
        addr: Option<String>,
        /// Permissive CORS for a browser console.
        #[arg(long)]
        cors: bool,
        /// Checkpoint to serve (default: main phase-2 checkpoint).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Print the effective configuration and exit.
    Config,
}

fn effective_config(cli: &Cli) -> Result<RunConfig> {
    let text = match &cli.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    let mut overrides = cli.overrides.clone();
    if let Some(s) = cli.seed {
        overrides.push(format!("seed={s}"));
    }
    if let Some(o) = &cli.out {
        overrides.push(format!("out_dir={:?}", o.display().to_string()));
    }
    RunConfig::with_overrides(&text, &overrides)
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_VALIDATION,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init();
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn load_inputs(layout: &Layout) -> Result<(brainlang::dataset::Dataset, Split)> {
    Ok((read_dataset(&layout.dataset())?, read_json(&layout.split())?))
}

fn holdout_list(cfg: &RunConfig, given: Option<Vec<String>>) -> Vec<String> {
    match given {
        Some(v) if !v.is_empty() => v,
        _ => cfg.zeroshot.holdout.clone(),
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let cfg = effective_config(cli)?;
    eprintln!("# effective configuration\n{}", cfg.to_toml());
    let layout = Layout::new(&cfg.out_dir);
    match &cli.command {
        Command::Config => {
            println!("{}", cfg.to_toml());
        }
        Command::Synth => {
            std::fs::create_dir_all(&layout.dir)?;
            let (ds, split) = pipeline::synth(&cfg)?;
            ds.write_jsonl(std::io::BufWriter::new(std::fs::File::create(layout.dataset())?))?;
            write_json(&layout.split(), &split)?;
            std::fs::write(layout.report("config.toml"), cfg.to_toml())?;
            println!(
                "dataset: {} trials ({} train, {} val, {} test), sha256 {}",
                ds.trials.len(),
                split.train_ids.len(),
                split.val_ids.len(),
                split.test_ids.len(),
                ds.content_hash()
            );
        }
        Command::PretrainLm => {
            let (ds, split) = load_inputs(&layout)?;
            let (ck, report) = pipeline::pretrain_base(&cfg, &ds, &split)?;
            ck.save(&layout.base())?;
            let lines = report.log_lines().join("\n");
            std::fs::write(layout.report("lm.train.log"), format!("{lines}\n"))?;
            println!("{lines}");
            println!(
                "base checkpoint {} (projection k={})",
                layout.base().display(),
                ck.model.projection.k()
            );
        }
        Command::Train { control, holdout } => {
            let (ds, split) = load_inputs(&layout)?;
            let base = read_checkpoint(&layout.base())?;
            let variant = match (control, holdout) {
                (true, _) => Variant::Control,
                (false, Some(h)) => Variant::Holdout(holdout_list(&cfg, Some(h.clone()))),
                (false, None) => Variant::Main,
            };
            let (p1, p2, l) = (&cfg.phase1, &cfg.phase2, &cfg.lora);
            println!(
                "phase1: epochs={} lr={:e} batch={} l2={} trainable={:?}",
                p1.epochs, p1.base_lr, p1.batch_size, p1.l2_on_tokenizer, p1.trainable
            );
            println!(
                "phase2: epochs={} lr={:e} batch={} l2={} lora r={} alpha={} dropout={} trainable={:?}",
                p2.epochs, p2.base_lr, p2.batch_size, p2.l2_on_tokenizer, l.rank, l.alpha, l.dropout, p2.trainable
            );
            let out = pipeline::train(&cfg, &base, &ds, &split, &variant)?;
            out.phase1.save(&layout.checkpoint(&variant, 1))?;
            out.phase2.save(&layout.checkpoint(&variant, 2))?;
            let lines: Vec<String> = out.reports.iter().flat_map(|r| r.log_lines()).collect();
            std::fs::write(layout.train_log(&variant), lines.join("\n") + "\n")?;
            for l in &lines {
                println!("{l}");
            }
            if let Some(h) = &out.holdout {
                let summary = serde_json::json!({
                    "categories": h.filters.iter().map(|f| &f.category).collect::<Vec<_>>(),
                    "held_out": h.held_out,
                    "withheld_tokens": h.withheld_tokens,
                });
                write_json(&layout.holdout(&variant), &summary)?;
                println!("held out {} trials; withheld tokens {:?}", h.held_out.len(), h.withheld_tokens);
            }
        }
        Command::Eval { no_control } => {
            let (ds, split) = load_inputs(&layout)?;
            let main = read_checkpoint(&layout.checkpoint(&Variant::Main, 2))?;
            let control_path = layout.checkpoint(&Variant::Control, 2);
            let control = if !no_control && control_path.exists() {
                Some(Checkpoint::load(&control_path)?)
            } else {
                None
            };
            let report = pipeline::evaluate(&cfg, &main.model, control.as_ref().map(|c| &c.model), &ds, &split)?;
            write_json(&layout.report("eval.json"), &report)?;
            print!("{}", report.table());
        }
        Command::Zeroshot { holdout } => {
            let (ds, split) = load_inputs(&layout)?;
            let cats = holdout_list(&cfg, holdout.clone());
            let variant = Variant::Holdout(cats.clone());
            let ck = read_checkpoint(&layout.checkpoint(&variant, 2))?;
            let bundle = pipeline::zeroshot(&cfg, &ck.model, &ds, &split, &cats)?;
            write_json(&layout.report(&format!("zeroshot-{}.json", cats.join("+"))), &bundle)?;
            println!(
                "centroid accuracy {:.4} (chance {:.4}) over {} trials",
                bundle.captions.accuracy,
                bundle.captions.chance,
                bundle.captions.trials.len()
            );
            println!(
                "forced choice accuracy {:.4} counts {:?} non-compliant {}",
                bundle.choice.accuracy, bundle.choice.counts, bundle.choice.non_compliant
            );
            println!("withheld tokens emitted: {:?}", bundle.captions.withheld_emitted);
        }
        Command::Microstim { checkpoint } => {
            let (ds, split) = load_inputs(&layout)?;
            let path = checkpoint.clone().unwrap_or_else(|| layout.checkpoint(&Variant::Main, 2));
            let ck = read_checkpoint(&path)?;
            let report = pipeline::microstim(&cfg, &ck.model, &ds, &split)?;
            write_json(&layout.report("microstim.json"), &report)?;
            for s in &report.sweeps {
                std::fs::write(layout.report(&format!("microstim-{}-excitatory.csv", s.mask.id)), s.excitatory.to_csv())?;
                std::fs::write(layout.report(&format!("microstim-{}-inhibitory.csv", s.mask.id)), s.inhibitory.to_csv())?;
                println!(
                    "{}: nonzero={} rho_excitatory={:.4} rho_inhibitory={:.4} zero_rows_identical={}",
                    s.mask.id, s.mask.nonzero, s.rho_excitatory, s.rho_inhibitory, s.zero_rows_identical
                );
            }
        }
        Command::Gradcheck { eps, tol, per_tensor } => {
            let start = std::time::Instant::now();
            let (model, batch) = micro_model(cfg.seed)?;
            let report = grad_check(&model, &batch, *eps, *per_tensor, Some(cfg.seed), 1.0)?;
            print!("{}", report.table());
            println!(
                "max relative error {:.3e} (tolerance {:e}) in {:.2}s",
                report.max_error(),
                tol,
                start.elapsed().as_secs_f64()
            );
            if !report.passed(*tol) {
                return Err(Error::Numerical("gradient check failed".into()));
            }
        }
        Command::Generate {
            trial,
            question,
            beta,
            mask,
            checkpoint,
        } => {
            let (ds, split) = load_inputs(&layout)?;
            let path = checkpoint.clone().unwrap_or_else(|| layout.checkpoint(&Variant::Main, 2));
            let ck = read_checkpoint(&path)?;
            let state = ServeState::new(cfg.clone(), &ck, ds, split)?;
            let req = AskRequest {
                trial_id: *trial,
                question: question.clone(),
                beta: *beta,
                mask_id: mask.clone(),
                evidence_tokens: None,
                generation: None,
            };
            let resp = serve::answer(&state, &req).map_err(|e| Error::InvalidArgument(e.body.message))?;
            println!("{}", resp.text);
        }
        Command::Serve { addr, cors, checkpoint } => {
            let (ds, split) = load_inputs(&layout)?;
            let path = checkpoint.clone().unwrap_or_else(|| layout.checkpoint(&Variant::Main, 2));
            let ck = read_checkpoint(&path)?;
            let mut cfg = cfg.clone();
            cfg.serve.cors |= *cors;
            let addr = addr.clone().unwrap_or_else(|| cfg.serve.addr.clone());
            let state = Arc::new(ServeState::new(cfg, &ck, ds, split)?);
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve::run(state, &addr))?;
        }
    }
    Ok(EXIT_OK)
}
