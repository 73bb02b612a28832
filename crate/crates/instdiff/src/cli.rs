//! `instdiff` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use instdiff_core::layout::LayoutSpec;
use serde_json::json;

use crate::config::{LoadedConfig, RunConfig};
use crate::eval::{check_gates, format_table, upper_bound, Variant};
use crate::pipeline::{
    format_ablation, read_dataset, run_ablation, run_training, test_items, train_examples, write_dataset, Ablation,
    LoadedModel, Split,
};
use crate::service::{serve, AppState};
use crate::store::SessionStore;
use crate::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "instdiff", version, about = "Instance-conditioned diffusion on shape-world")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Override a config key, e.g. `--set train.steps=100`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Point,
    Scribble,
    Box,
    Mask,
    Hybrid,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Point => Variant::Point,
            VariantArg::Scribble => Variant::Scribble,
            VariantArg::Box => Variant::Box,
            VariantArg::Mask => Variant::Mask,
            VariantArg::Hybrid => Variant::Hybrid,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write dataset shards.
    Dataset {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "both")]
        split: SplitArg,
    },
    /// Train from scratch with periodic checkpoints and EMA.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a layout JSON to PNG.
    Generate {
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        guidance: Option<f64>,
    },
    /// Score held-out layouts with the detector.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Model to evaluate; only the ground-truth row is produced without it.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        /// Score freshly initialised weights instead of a checkpoint.
        #[arg(long, conflicts_with = "ckpt")]
        untrained: bool,
        #[arg(long, value_enum, value_delimiter = ',')]
        variants: Vec<VariantArg>,
        /// Number of layouts; defaults to `eval.layouts`.
        #[arg(long)]
        limit: Option<usize>,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
        /// Check the training gates against an untrained baseline.
        #[arg(long, requires = "ckpt")]
        gates: bool,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, env = "INSTDIFF_STATE_DIR", default_value = "instdiff-state")]
        state_dir: PathBuf,
        #[arg(long, default_value_t = 600)]
        timeout_secs: u64,
    },
    /// Train and evaluate with components switched off; report deltas.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, value_delimiter = ',')]
        off: Vec<Ablation>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        work: PathBuf,
        #[arg(long)]
        limit: Option<usize>,
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the effective configuration.
    Config,
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v).expect("serializable"))?;
    Ok(())
}

fn eval_limit(cfg: &RunConfig, limit: Option<usize>) -> usize {
    limit.unwrap_or(cfg.eval.layouts)
}

pub fn run(cli: Cli) -> Result<()> {
    let loaded = || RunConfig::load(cli.config.as_deref(), &cli.overrides);
    match cli.command {
        Command::Config => {
            let lc = loaded()?;
            print!("# hash {}\n{}", lc.hash, lc.config.to_toml());
        }
        Command::Dataset { out, split } => {
            let lc = loaded()?;
            let splits: &[Split] = match split {
                SplitArg::Train => &[Split::Train],
                SplitArg::Test => &[Split::Test],
                SplitArg::Both => &[Split::Train, Split::Test],
            };
            for &s in splits {
                let paths = write_dataset(&lc.config, s, &out)?;
                println!("{}: {} shards in {}", s.prefix(), paths.len(), out.display());
            }
        }
        Command::Train { data, out } => {
            let lc = loaded()?;
            let records = read_dataset(&lc.config, Split::Train, &data)?;
            let examples = train_examples(&records, &lc.config.model)?;
            let every = lc.config.log_every.max(1);
            tracing::info!("training on {} examples, config {}", examples.len(), lc.hash);
            let ck = run_training(&lc, &examples, &out, |step, loss| {
                if step % every == 0 {
                    tracing::info!("step {step} loss {loss:.5}");
                }
            })?;
            println!("wrote {} at step {}", out.display(), ck.meta["step"]);
        }
        Command::Generate {
            layout,
            ckpt,
            seed,
            out,
            steps,
            guidance,
        } => {
            let model = LoadedModel::load(&ckpt)?;
            let text = std::fs::read_to_string(&layout)?;
            let spec = LayoutSpec::from_json(&text)?;
            let mut opts = model.config.sample.clone();
            if let Some(s) = seed {
                opts.seed = s;
            }
            if let Some(s) = steps {
                opts.steps = s;
            }
            if let Some(g) = guidance {
                opts.guidance_scale = g;
            }
            let img = model.generate(&spec, &opts)?;
            std::fs::write(&out, img.to_png()?)?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            data,
            ckpt,
            untrained,
            variants,
            limit,
            json,
            gates,
        } => {
            let model = match (&ckpt, untrained) {
                (Some(p), _) => Some(LoadedModel::load(p)?),
                (None, true) => {
                    let lc = loaded()?;
                    let seed = lc.config.train.seed;
                    Some(LoadedModel::untrained(lc.config, seed)?)
                }
                (None, false) => None,
            };
            let cfg = match &model {
                Some(m) => m.config.clone(),
                None => loaded()?.config,
            };
            let records = read_dataset(&cfg, Split::Test, &data)?;
            let items = test_items(&records, cfg.eval.seed, eval_limit(&cfg, limit));
            let mut reports = vec![upper_bound(&items, &cfg.model.conditioning.location)?];
            if let Some(m) = &model {
                let vs: Vec<Variant> = if variants.is_empty() {
                    Variant::ALL.to_vec()
                } else {
                    variants.into_iter().map(Into::into).collect()
                };
                reports.extend(m.evaluate(&items, &vs)?);
                for r in &reports[1..] {
                    if !reports[0].dominates(r) {
                        tracing::warn!("row {} beats the ground-truth row on some metric", r.name);
                    }
                }
            }
            print!("{}", format_table(&reports));
            if let (true, Some(m)) = (gates, &model) {
                let base = LoadedModel::untrained(m.config.clone(), m.config.train.seed)?;
                let base_rows = base.evaluate(&items, &[Variant::Hybrid])?;
                for g in check_gates(&reports, &base_rows, &m.config.eval.gates) {
                    let b = g.baseline.map(|b| format!(" baseline {b:.3}")).unwrap_or_default();
                    let verdict = if g.pass { "pass" } else { "fail" };
                    println!("gate {:<13} {:<7} {:.3} >= {:.3}{b}: {verdict}", g.metric, g.variant, g.value, g.threshold);
                }
            }
            if let Some(p) = json {
                write_json(&p, &reports)?;
            }
        }
        Command::Serve {
            ckpt,
            addr,
            state_dir,
            timeout_secs,
        } => {
            let store = SessionStore::open(&state_dir)?;
            let state = Arc::new(AppState::new(store, Duration::from_secs(timeout_secs)));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(&addr, ckpt, state))?;
        }
        Command::Ablate {
            data,
            off,
            seeds,
            work,
            limit,
            json,
        } => {
            let lc: LoadedConfig = loaded()?;
            let offs = if off.is_empty() { Ablation::ALL.to_vec() } else { off };
            let train = train_examples(&read_dataset(&lc.config, Split::Train, &data)?, &lc.config.model)?;
            let records = read_dataset(&lc.config, Split::Test, &data)?;
            let items = test_items(&records, lc.config.eval.seed, eval_limit(&lc.config, limit));
            let rows = run_ablation(&lc, &train, &items, &offs, &seeds, &work)?;
            print!("{}", format_ablation(&rows));
            if let Some(p) = json {
                write_json(&p, &rows)?;
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs, and returns the process exit code. Failures print
/// one JSON object on stderr.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            1
        }
    }
}

impl From<axum::Error> for Error {
    fn from(e: axum::Error) -> Self {
        Error::Io(std::io::Error::other(e))
    }
}
