use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use iclprobe::harness::report::{write_plot_data, write_reports, PlotData, StatsOptions, Summary};
use iclprobe::harness::run::{compare_selectors, run_experiment_in, score_heads};
use iclprobe::harness::synth::{write_planted, SynthOptions};
use iclprobe::harness::{ExperimentConfig, ModelSource, Selector};
use iclprobe::metrics::{load_records_csv, CovarianceNorm};
use iclprobe::probe::{BestHead, LabelPooling};
use iclprobe::stats::{TrailingBin, DEFAULT_BIN_SIZE, DEFAULT_KRR_ALPHA};

#[derive(Parser)]
#[command(name = "iclprobe", version, about = "Affinity and diversity of in-context demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Rank attention heads by attention mass on matching label tokens.
    ScoreHeads(ExperimentArgs),
    /// Run one experiment and write reports.
    Run(ExperimentArgs),
    /// Run several selectors on the same task and seed.
    Compare {
        #[command(flatten)]
        exp: ExperimentArgs,
        /// Comma-separated selectors, e.g. `random,bm25,leak`.
        #[arg(long, value_delimiter = ',', required = true)]
        selectors: Vec<Selector>,
    },
    /// Recompute bins and correlations from a records CSV.
    Stats {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        output_dir: PathBuf,
        #[command(flatten)]
        stats: StatsArgs,
    },
    /// Write plot data JSON from a records CSV.
    ExportPlotData {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        stats: StatsArgs,
    },
    /// Write the planted induction model, its toy task and an experiment config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "ICLPROBE_SEED", default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 256)]
        n_pool: usize,
        #[arg(long, default_value_t = 512)]
        n_test: usize,
    },
}

#[derive(Args, Clone)]
struct StatsArgs {
    #[arg(long, default_value_t = DEFAULT_BIN_SIZE)]
    bin_size: usize,
    #[arg(long, value_parser = parse_trailing, default_value = "drop")]
    trailing_bin: TrailingBin,
    #[arg(long)]
    krr_gamma: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_KRR_ALPHA)]
    krr_alpha: f64,
}

impl From<&StatsArgs> for StatsOptions {
    fn from(a: &StatsArgs) -> Self {
        StatsOptions {
            bin_size: a.bin_size,
            trailing_bin: a.trailing_bin,
            krr_gamma: a.krr_gamma,
            krr_alpha: a.krr_alpha,
        }
    }
}

/// Flags mirror the JSON config; a flag overrides the file.
#[derive(Args, Clone)]
struct ExperimentArgs {
    /// JSON experiment config; its relative paths resolve against its directory.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    task: Option<PathBuf>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long, env = "ICLPROBE_SEED")]
    seed: Option<u64>,
    /// random | bm25 | dense:PATH | fixed:I,J,.. | leak
    #[arg(long)]
    selector: Option<Selector>,
    /// Toy model weights (tensor container).
    #[arg(long, requires = "model_config", conflicts_with = "capture")]
    weights: Option<PathBuf>,
    /// Toy model config JSON.
    #[arg(long, requires = "weights")]
    model_config: Option<PathBuf>,
    /// Capture manifest JSON.
    #[arg(long)]
    capture: Option<PathBuf>,
    #[arg(long)]
    bin_size: Option<usize>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Fixed head as LAYER:HEAD, skipping head search.
    #[arg(long, value_parser = parse_head)]
    best_head: Option<BestHead>,
    #[arg(long)]
    calibration_prompts: Option<usize>,
    #[arg(long, value_parser = parse_pooling)]
    label_pooling: Option<LabelPooling>,
    #[arg(long, value_parser = parse_covariance)]
    covariance: Option<CovarianceNorm>,
    #[arg(long, value_parser = parse_trailing)]
    trailing_bin: Option<TrailingBin>,
    #[arg(long)]
    krr_gamma: Option<f64>,
    #[arg(long)]
    krr_alpha: Option<f64>,
    #[arg(long)]
    dense_baseline: Option<PathBuf>,
}

fn parse_head(s: &str) -> Result<BestHead, String> {
    let (l, h) = s.split_once(':').ok_or("expected LAYER:HEAD")?;
    Ok(BestHead {
        layer: l.parse().map_err(|_| format!("bad layer `{l}`"))?,
        head: h.parse().map_err(|_| format!("bad head `{h}`"))?,
    })
}

fn parse_json_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

fn parse_pooling(s: &str) -> Result<LabelPooling, String> {
    parse_json_enum(s)
}

fn parse_covariance(s: &str) -> Result<CovarianceNorm, String> {
    parse_json_enum(s)
}

fn parse_trailing(s: &str) -> Result<TrailingBin, String> {
    parse_json_enum(s)
}

fn absolute(p: PathBuf) -> Result<PathBuf> {
    if p.is_absolute() {
        Ok(p)
    } else {
        Ok(std::env::current_dir()?.join(p))
    }
}

impl ExperimentArgs {
    /// Merged config plus the directory its relative paths resolve against.
    fn resolve(&self) -> Result<(ExperimentConfig, PathBuf)> {
        let a = self.clone();
        let flag_source = match (a.weights, a.model_config, a.capture) {
            (Some(w), Some(c), None) => Some(ModelSource::Toy {
                weights: absolute(w)?,
                config: absolute(c)?,
            }),
            (None, None, Some(m)) => Some(ModelSource::Capture { manifest: absolute(m)? }),
            (None, None, None) => None,
            _ => bail!("give either --weights with --model-config, or --capture"),
        };
        let (mut cfg, base) = match &a.config {
            Some(path) => {
                let cfg = ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
                let base = absolute(path.parent().unwrap_or(Path::new(".")).to_path_buf())?;
                (cfg, base)
            }
            None => {
                let task = a.task.clone().map(absolute).transpose()?;
                let task = match (&flag_source, task) {
                    (_, Some(t)) => t,
                    (Some(ModelSource::Capture { .. }), None) => PathBuf::new(),
                    (_, None) => bail!("--task is required without --config"),
                };
                let source = flag_source.clone().context("a model source (--weights/--model-config or --capture) is required")?;
                (ExperimentConfig::new(task, source), std::env::current_dir()?)
            }
        };
        if let Some(t) = a.task {
            cfg.task = absolute(t)?;
        }
        if let Some(s) = flag_source {
            cfg.model_source = s;
        }
        if let Some(v) = a.k {
            cfg.k = v;
        }
        if let Some(v) = a.n_test {
            cfg.n_test = v;
        }
        if let Some(v) = a.seed {
            cfg.seed = v;
        }
        if let Some(v) = a.selector {
            cfg.selector = match v {
                Selector::Dense(p) => Selector::Dense(absolute(p)?),
                other => other,
            };
        }
        if let Some(v) = a.bin_size {
            cfg.bin_size = v;
        }
        if let Some(v) = a.output_dir {
            cfg.output_dir = Some(absolute(v)?);
        }
        if let Some(v) = a.best_head {
            cfg.best_head = Some(v);
        }
        if let Some(v) = a.calibration_prompts {
            cfg.calibration_prompts = v;
        }
        if let Some(v) = a.label_pooling {
            cfg.label_pooling = v;
        }
        if let Some(v) = a.covariance {
            cfg.covariance = v;
        }
        if let Some(v) = a.trailing_bin {
            cfg.trailing_bin = v;
        }
        if let Some(v) = a.krr_gamma {
            cfg.krr_gamma = Some(v);
        }
        if let Some(v) = a.krr_alpha {
            cfg.krr_alpha = v;
        }
        if let Some(v) = a.dense_baseline {
            cfg.dense_baseline = Some(absolute(v)?);
        }
        cfg.validate()?;
        Ok((cfg, base))
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn print_summary(s: &Summary) {
    let c = &s.correlations;
    if let Some(h) = c.best_head {
        println!("best head        layer {} head {}", h.layer, h.head);
    }
    println!("records          {}", c.n_records);
    println!("accuracy         {:.4}", c.accuracy);
    println!("mean affinity    {:.6}", c.mean_affinity);
    println!("mean diversity   {:.6}", c.mean_diversity);
    println!("bins             {} of {}", s.affinity_bins.len(), c.bin_size);
    println!("spearman(aff)    {}", opt(c.spearman_affinity));
    println!("krr R2(div)      {}", opt(c.krr_diversity.as_ref().map(|k| k.r2)));
    for n in &c.notes {
        println!("note: {n}");
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", chain_message(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the cause chain, skipping causes a message already quotes.
fn chain_message(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::ScoreHeads(args) => {
            let (cfg, base) = args.resolve()?;
            let (mut scores, best) = score_heads(&cfg, &base)?;
            scores.sort_by(|a, b| b.score.total_cmp(&a.score).then((a.layer, a.head).cmp(&(b.layer, b.head))));
            println!("layer\thead\tscore");
            for s in &scores {
                println!("{}\t{}\t{:.6}", s.layer, s.head, s.score);
            }
            println!("best {}:{}", best.layer, best.head);
        }
        Command::Run(args) => {
            let (cfg, base) = args.resolve()?;
            let out = run_experiment_in(&cfg, &base)?;
            print_summary(&out.summary);
            if let Some(dir) = &cfg.output_dir {
                println!("reports in {}", base.join(dir).display());
            }
        }
        Command::Compare { exp, selectors } => {
            let (cfg, base) = exp.resolve()?;
            let selectors = selectors
                .into_iter()
                .map(|s| match s {
                    Selector::Dense(p) => absolute(p).map(Selector::Dense),
                    other => Ok(other),
                })
                .collect::<Result<Vec<_>>>()?;
            let cmp = compare_selectors(&cfg, &selectors, &base)?;
            println!("selector\taccuracy\tmean_affinity\tmean_diversity\tmean_bm25");
            for r in &cmp.rows {
                println!(
                    "{}\t{:.4}\t{:.6}\t{:.6}\t{}",
                    r.selector,
                    r.accuracy,
                    r.mean_affinity,
                    r.mean_diversity,
                    opt(r.mean_bm25)
                );
            }
        }
        Command::Stats {
            records,
            output_dir,
            stats,
        } => {
            let recs = load_records_csv(&records)?;
            let summary = Summary::compute(&recs, &stats, None)?;
            write_reports(&output_dir, &recs, &summary)?;
            print_summary(&summary);
        }
        Command::ExportPlotData { records, out, stats } => {
            let recs = load_records_csv(&records)?;
            let summary = Summary::compute(&recs, &stats, None)?;
            write_plot_data(&out, &PlotData::build(&recs, &summary))?;
            println!("wrote {}", out.display());
        }
        Command::Synth {
            out,
            seed,
            n_pool,
            n_test,
        } => {
            let opts = SynthOptions {
                n_pool,
                n_test,
                seed,
                ..SynthOptions::default()
            };
            let paths = write_planted(&out, &opts)?;
            println!("experiment config {}", paths.experiment.display());
        }
    }
    Ok(())
}
