use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kvcompress::workload::{sweep, sweep_csv};
use kvcompress::{run, KvError, WorkloadConfig};

#[derive(Parser)]
#[command(name = "kvcompress", version, about = "Paged KV cache compression simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one workload to completion and emit a JSON report.
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write the per-step series as CSV.
        #[arg(long)]
        steps_csv: Option<PathBuf>,
    },
    /// Run the workload once per compression rate and emit a CSV table.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated compression rates.
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
        rates: Vec<f64>,
    },
}

/// Workload flags. Values are kept as text and applied over the config file
/// with the same parser, so both accept identical syntax.
#[derive(Args)]
struct Common {
    /// Config file: JSON object or key=value lines.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    query_heads: Option<String>,
    #[arg(long)]
    kv_heads: Option<String>,
    #[arg(long)]
    head_dim: Option<String>,
    #[arg(long)]
    block_size: Option<String>,
    #[arg(long)]
    num_blocks: Option<String>,
    /// N or MIN..MAX.
    #[arg(long)]
    prompt_len: Option<String>,
    #[arg(long)]
    requests: Option<String>,
    #[arg(long)]
    output_tokens: Option<String>,
    #[arg(long)]
    rate: Option<String>,
    #[arg(long)]
    max_cache_tokens: Option<String>,
    /// Trigger preset: none, prefill, preempt, prefill-preempt, continual, interval, threshold.
    #[arg(long)]
    policy: Option<String>,
    #[arg(long)]
    interval: Option<String>,
    #[arg(long)]
    token_threshold: Option<String>,
    #[arg(long)]
    kv_limit: Option<String>,
    /// window or full.
    #[arg(long)]
    metric_mode: Option<String>,
    /// l1 or l2.
    #[arg(long)]
    aggregation: Option<String>,
    #[arg(long)]
    window: Option<String>,
    #[arg(long)]
    pool: Option<String>,
    #[arg(long)]
    excluded_window: Option<String>,
    /// Output file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 21] = [
            ("seed", &self.seed),
            ("layers", &self.layers),
            ("query-heads", &self.query_heads),
            ("kv-heads", &self.kv_heads),
            ("head-dim", &self.head_dim),
            ("block-size", &self.block_size),
            ("num-blocks", &self.num_blocks),
            ("prompt-len", &self.prompt_len),
            ("requests", &self.requests),
            ("output-tokens", &self.output_tokens),
            ("rate", &self.rate),
            ("max-cache-tokens", &self.max_cache_tokens),
            ("policy", &self.policy),
            ("interval", &self.interval),
            ("token-threshold", &self.token_threshold),
            ("kv-limit", &self.kv_limit),
            ("metric-mode", &self.metric_mode),
            ("aggregation", &self.aggregation),
            ("window", &self.window),
            ("pool", &self.pool),
            ("excluded-window", &self.excluded_window),
        ];
        fields
            .into_iter()
            .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
            .collect()
    }

    fn load(&self) -> Result<WorkloadConfig, KvError> {
        let base = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| KvError::config("config", format!("{}: {e}", path.display())))?;
                WorkloadConfig::parse(&text)?
            }
            None => WorkloadConfig::default(),
        };
        let cfg = base.with_overrides(self.overrides())?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn emit(out: Option<&PathBuf>, text: &str) -> Result<(), KvError> {
    match out {
        Some(path) => {
            std::fs::write(path, text).map_err(|e| KvError::config("out", format!("{}: {e}", path.display())))
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<(), KvError> {
    match cli.command {
        Command::Run { common, steps_csv } => {
            let cfg = common.load()?;
            let report = run(&cfg)?;
            if let Some(path) = steps_csv {
                std::fs::write(&path, report.steps_csv())
                    .map_err(|e| KvError::config("steps-csv", format!("{}: {e}", path.display())))?;
            }
            let mut json = report.to_json();
            json.push('\n');
            emit(common.out.as_ref(), &json)
        }
        Command::Sweep { common, rates } => {
            let cfg = common.load()?;
            let rows = sweep(&cfg, &rates)?;
            emit(common.out.as_ref(), &sweep_csv(&rows))
        }
    }
}

/// Prints `e` as a JSON object on stdout.
fn report(e: &KvError) -> ExitCode {
    let mut obj = serde_json::to_value(e).unwrap_or_else(|_| serde_json::json!({ "error": "internal" }));
    if let serde_json::Value::Object(m) = &mut obj {
        m.insert("message".into(), serde_json::Value::String(e.to_string()));
    }
    println!("{obj}");
    ExitCode::FAILURE
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        // --help and --version
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let first = e
                .to_string()
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ")
                .to_string();
            return report(&KvError::config("arguments", first));
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
