//! Command-line interface: headless training, gradient checks, plan dumps,
//! the server, and a timing benchmark.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{IpAddr, SocketAddr};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rnnscope_core::bptt::grad_check;
use rnnscope_core::cells::CellKind;
use rnnscope_core::data::Task;
use rnnscope_core::step::dump_epoch_trace;
use rnnscope_core::trainer::{LossRecord, NetworkConfig};
use rnnscope_core::Session;

/// Gradient checks at or above this relative error fail.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(name = "rnnscope", version, about = "Step-by-step recurrent network training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Train headless and print per-epoch losses as CSV.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 50)]
        epochs: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
    },
    /// Write the micro-step events of one epoch as JSON lines.
    DumpPlan {
        #[command(flatten)]
        config: ConfigArgs,
        /// Epochs to train before the dumped one.
        #[arg(long, default_value_t = 0)]
        epochs: usize,
        /// Output file; `-` for stdout.
        #[arg(long, default_value = "-")]
        out: String,
        /// Include computed values in each record.
        #[arg(long)]
        payloads: bool,
    },
    /// Serve the WebSocket protocol and, optionally, a static UI bundle.
    Serve {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: IpAddr,
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Time training epochs.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
    },
}

#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// `default`, or a JSON file of configuration fields.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub cell: Option<CellKind>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<NetworkConfig, Box<dyn std::error::Error>> {
        let mut cfg = match self.config.as_str() {
            "default" => NetworkConfig::default(),
            path => serde_json::from_reader(io::BufReader::new(File::open(path)?))?,
        };
        macro_rules! apply {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        apply!(task => task, cell => cell_kind, layers => layer_count, hidden => hidden,
               window => window, horizon => horizon, lr => learning_rate, batch => batch_size,
               noise => noise_amp, seed => seed);
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn run(cli: Cli) -> ExitCode {
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<ExitCode, Box<dyn std::error::Error>> {
    match cli.command {
        Verb::Train { config, epochs } => {
            let mut session = Session::new(config.resolve()?)?;
            let stdout = io::stdout();
            let mut csv = csv::Writer::from_writer(stdout.lock());
            for _ in 0..epochs {
                session.run_epoch()?;
                let record: &LossRecord = session.loss_history.last().expect("epoch recorded");
                csv.serialize(record)?;
                csv.flush()?;
            }
        }
        Verb::Gradcheck { config, epsilon } => {
            let cfg = config.resolve()?;
            let session = Session::new(cfg.clone())?;
            let data = session.draw_epoch_data(&mut session.rng.clone())?;
            let error = grad_check(&session.params, &data[0], cfg.loss_kind(), epsilon)?;
            println!("max_relative_error: {error:e}");
            if !(error < GRADCHECK_TOLERANCE) {
                eprintln!("gradient check failed: {error:e} >= {GRADCHECK_TOLERANCE:e}");
                return Ok(ExitCode::FAILURE);
            }
        }
        Verb::DumpPlan {
            config,
            epochs,
            out,
            payloads,
        } => {
            let mut session = Session::new(config.resolve()?)?;
            for _ in 0..epochs {
                session.run_epoch()?;
            }
            let mut sink: Box<dyn Write> = match out.as_str() {
                "-" => Box::new(io::stdout().lock()),
                path => Box::new(File::create(path)?),
            };
            let mut writer = BufWriter::new(&mut sink);
            dump_epoch_trace(&mut session, &mut writer, payloads)?;
            writer.flush()?;
        }
        Verb::Serve {
            config,
            port,
            host,
            static_dir,
        } => {
            let defaults = config.resolve()?;
            tracing_subscriber::fmt()
                .with_env_filter(
                    tracing_subscriber::EnvFilter::try_from_default_env()
                        .unwrap_or_else(|_| "info".into()),
                )
                .init();
            let addr = SocketAddr::new(host, port);
            let runtime = tokio::runtime::Runtime::new()?;
            runtime.block_on(async move {
                let listener = crate::server::bind(addr).await?;
                tracing::info!("listening on {}", listener.local_addr()?);
                crate::server::serve(listener, defaults, static_dir).await
            })?;
        }
        Verb::Bench { config, epochs } => {
            let label = config.config.clone();
            let mut session = Session::new(config.resolve()?)?;
            let mut times = Vec::with_capacity(epochs);
            for _ in 0..epochs.max(1) {
                let start = Instant::now();
                session.run_epoch()?;
                times.push(start.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let max = times.iter().copied().fold(0.0, f64::max);
            println!("config: {label}");
            println!("epochs: {}", times.len());
            println!("mean_epoch_ms: {mean:.3}");
            println!("max_epoch_ms: {max:.3}");
        }
    }
    Ok(ExitCode::SUCCESS)
}
