//! Command-line front end: `bench`, `spec-bench`, `train-demo`, `invariants`.

use std::ffi::OsString;
use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{
    bench_prefill, bench_speculation, write_bench_csv, write_spec_csv, BenchConfig,
    SpecBenchConfig, Variant,
};
use crate::config::AttnConfig;
use crate::error::{Error, Result};
use crate::invariants;
use crate::model::{train_synthetic, ModelConfig, Task, ToyModel, TrainConfig, TrainReport};
use crate::speculative::TreeShape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dtype {
    F32,
    F64,
}

#[derive(Debug, Parser)]
#[command(
    name = "auglin",
    version,
    about = "Augmented grouped linear attention: benchmarks and demos"
)]
pub struct Cli {
    /// Seed for every random draw.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Element type for `bench`; other commands run in f64.
    #[arg(long, global = true, value_enum, default_value_t = Dtype::F64)]
    pub dtype: Dtype,
    /// Weight of the global linear branch.
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Group size G.
    #[arg(long, global = true)]
    pub group: Option<usize>,
    /// Convolution taps k.
    #[arg(long, global = true)]
    pub kernel: Option<usize>,
    /// Flat `key = value` config file; explicit flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Prefill latency of the attention operator vs sequence length.
    Bench(BenchArgs),
    /// One speculation round: tree pass vs per-path decoding.
    SpecBench(SpecArgs),
    /// Train the toy model on a synthetic task and log loss and accuracy.
    TrainDemo(TrainArgs),
    /// Run the oracle-equivalence suite.
    Invariants(InvariantArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',', default_value = "1024,8192")]
    pub seq: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Skip the quadratic reference.
    #[arg(long)]
    pub augmented_only: bool,
    /// CSV destination; stdout if omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SpecArgs {
    /// Fan-out list (`4,2,2`) or `parents:-1,-1,0,...`.
    #[arg(long, default_value = "4,2,2")]
    pub tree: String,
    #[arg(long, default_value_t = 100)]
    pub rounds: usize,
    /// Committed tokens before the speculation round.
    #[arg(long, default_value_t = 100)]
    pub prefix: usize,
    #[arg(long, default_value_t = 64)]
    pub head_dim: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, default_value = "copy")]
    pub task: String,
    /// Train with the centred (future-reading) convolution.
    #[arg(long)]
    pub leaky: bool,
    #[arg(long, default_value_t = 1000)]
    pub steps: usize,
    #[arg(long, default_value_t = 0.3)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 24)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 10)]
    pub log_every: usize,
    #[arg(long, default_value_t = 100)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 32)]
    pub eval_examples: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InvariantArgs {
    /// Multiplies the number of random cases per check.
    #[arg(long, default_value_t = 1)]
    pub scale: usize,
}

/// Model used by `train-demo` unless overridden: vocab 16, width 64, four
/// heads, two layers, G = 64, k = 5.
pub fn demo_model_config() -> ModelConfig {
    let mut c = ModelConfig::new(16, 64, 4, 2);
    c.ffn_mult = 2;
    c.max_seq = 64;
    c.attn.group_size = 64;
    c.attn.conv_kernel = 5;
    c
}

impl Cli {
    fn model_config(&self, base: ModelConfig) -> Result<ModelConfig> {
        let mut c = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
                ModelConfig::parse_with(base, &text)?
            }
            None => base,
        };
        if let Some(a) = self.alpha {
            c.attn.alpha = a;
        }
        if let Some(g) = self.group {
            c.attn.group_size = g;
        }
        if let Some(k) = self.kernel {
            c.attn.conv_kernel = k;
        }
        c.validate()?;
        Ok(c)
    }

    /// Attention settings for the benchmarks: G = 64, k = 63 unless
    /// overridden by the config file or flags.
    fn attn_config(&self, heads: usize, head_dim: usize) -> Result<AttnConfig> {
        let mut base = ModelConfig::new(16, heads * head_dim, heads, 1);
        base.attn.group_size = 64;
        base.attn.conv_kernel = 63;
        Ok(self.model_config(base)?.attn_config())
    }
}

fn sink(path: &Option<PathBuf>) -> io::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(File::create(p)?),
        None => Box::new(io::stdout().lock()),
    })
}

fn io_err(path: &Option<PathBuf>, e: impl std::fmt::Display) -> Error {
    let target = path
        .as_deref()
        .map_or("stdout".to_string(), |p| p.display().to_string());
    Error::Input(format!("writing {target}: {e}"))
}

/// CSV rows `mode,step,loss,batch_loss,eval_acc`; `eval_acc` is empty on
/// steps without an evaluation.
pub fn write_train_csv<W: Write>(mode: &str, report: &TrainReport, out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["mode", "step", "loss", "batch_loss", "eval_acc"])?;
    for p in &report.curve {
        w.write_record([
            mode.to_string(),
            p.step.to_string(),
            format!("{:.6}", p.loss),
            format!("{:.6}", p.batch_loss),
            p.eval_acc.map_or(String::new(), |a| format!("{a:.4}")),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<i32> {
    if cli.dtype == Dtype::F32 && !matches!(cli.command, Command::Bench(_)) {
        return Err(Error::Config(
            "--dtype f32 is only supported by `bench`".into(),
        ));
    }
    match &cli.command {
        Command::Bench(a) => {
            let bc = BenchConfig {
                seq_lens: a.seq.clone(),
                attn: cli.attn_config(a.heads, a.head_dim)?,
                variants: if a.augmented_only {
                    vec![Variant::Augmented]
                } else {
                    vec![Variant::Augmented, Variant::Quadratic]
                },
                reps: a.reps,
                warmup: a.warmup,
                seed: cli.seed,
            };
            let rows = match cli.dtype {
                Dtype::F32 => bench_prefill::<f32>(&bc)?,
                Dtype::F64 => bench_prefill::<f64>(&bc)?,
            };
            let out = sink(&a.out).map_err(|e| io_err(&a.out, e))?;
            write_bench_csv(&rows, out).map_err(|e| io_err(&a.out, e))?;
        }
        Command::SpecBench(a) => {
            let shape: TreeShape = a.tree.parse()?;
            let mut sc = SpecBenchConfig::new(shape);
            sc.rounds = a.rounds;
            sc.prefix_len = a.prefix;
            sc.attn = cli.attn_config(1, a.head_dim)?;
            sc.seed = cli.seed;
            let rows = bench_speculation(&sc)?;
            let out = sink(&a.out).map_err(|e| io_err(&a.out, e))?;
            write_spec_csv(&rows, out).map_err(|e| io_err(&a.out, e))?;
        }
        Command::TrainDemo(a) => {
            let mut mc = cli.model_config(demo_model_config())?;
            mc.seed = cli.seed;
            mc.unmasked_conv = a.leaky;
            let mut model = ToyModel::new(&mc)?;
            let tc = TrainConfig {
                task: a.task.parse::<Task>()?,
                steps: a.steps,
                lr: a.lr,
                batch_size: a.batch,
                seq_len: a.seq_len,
                log_every: a.log_every,
                eval_every: a.eval_every,
                eval_examples: a.eval_examples,
                seed: cli.seed,
            };
            let report = train_synthetic(&mut model, &tc)?;
            let mode = if a.leaky { "unmasked" } else { "masked" };
            let out = sink(&a.out).map_err(|e| io_err(&a.out, e))?;
            write_train_csv(mode, &report, out).map_err(|e| io_err(&a.out, e))?;
            eprintln!(
                "{mode}: final loss {:.4}, eval accuracy {:.3} (chance {:.3})",
                report.final_loss, report.final_eval_acc, report.chance
            );
        }
        Command::Invariants(a) => {
            let checks = invariants::run_all(cli.seed, a.scale);
            let mut failed = 0;
            for c in &checks {
                println!(
                    "{} {}: {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                );
                failed += usize::from(!c.passed);
            }
            println!(
                "{} of {} checks passed",
                checks.len() - failed,
                checks.len()
            );
            return Ok(i32::from(failed > 0));
        }
    }
    Ok(0)
}

/// Parses `argv` (program name first) and runs the command. Returns the
/// process exit code: 0 on success, 1 on a runtime failure, 2 on a usage
/// error.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) | Err(e @ Error::Structure(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
