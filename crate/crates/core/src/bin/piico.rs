use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use piico::clock::SystemClock;
use piico::gateway::{self, Gateway, GatewayConfig};
use piico::sim::{run_scenario, ClockMode, ScenarioReport, ScenarioSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "piico", version, about = "Multiprotocol IoT gateway and weather-station simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the gateway until interrupted.
    Gateway {
        #[arg(long, value_name = "PATH")]
        config: PathBuf,
    },
    /// Run a simulated scenario and write report.json + throughput.csv.
    Sim {
        #[arg(long, value_name = "PATH")]
        scenario: PathBuf,
        /// Simulated time; the default.
        #[arg(long, conflicts_with = "real_clock")]
        virtual_clock: bool,
        /// Wall-clock time, for live demos.
        #[arg(long)]
        real_clock: bool,
        #[arg(long, value_name = "DIR", default_value = "sim-out")]
        out: PathBuf,
    },
    /// Print a series from a scenario report.
    Report {
        /// report.json, or the directory holding it.
        #[arg(long = "in", value_name = "PATH")]
        input: PathBuf,
        #[arg(long, value_enum)]
        metric: Metric,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Metric {
    Throughput,
    Counts,
    Readings,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match cli.command {
        Command::Report { input, metric } => report(&input, metric),
        command => {
            let runtime = match tokio::runtime::Runtime::new() {
                Ok(rt) => rt,
                Err(e) => return fail(e),
            };
            runtime.block_on(async {
                match command {
                    Command::Gateway { config } => run_gateway(&config).await,
                    Command::Sim { scenario, real_clock, out, .. } => {
                        let mode = if real_clock { ClockMode::Real } else { ClockMode::Virtual };
                        run_sim(&scenario, mode, &out).await
                    }
                    Command::Report { .. } => unreachable!(),
                }
            })
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn fail(e: impl std::fmt::Display) -> ExitCode {
    eprintln!("piico: {e}");
    ExitCode::from(EXIT_RUNTIME)
}

type CmdResult = Result<(), Box<dyn std::error::Error>>;

async fn run_gateway(config: &Path) -> CmdResult {
    let config = GatewayConfig::load(config)?;
    let gw = Gateway::new(config, Arc::new(SystemClock))?;
    let running = gateway::start(gw).await?;
    let a = running.addrs();
    let id = running.gateway().identity();
    println!("piico gateway {} on network {}", id.gate_id, id.network_id);
    println!("  wifi       {}", a.wifi);
    println!("  bluetooth  {}", a.bluetooth);
    println!("  zigbee     {}", a.zigbee);
    println!("  broker     {}", a.broker);
    println!("  api        http://{}", a.api);
    match &running.gateway().config().cloud_broker {
        Some(c) => println!("  uplink     {c}"),
        None => println!("  uplink     embedded broker (no cloud broker configured)"),
    }
    tokio::signal::ctrl_c().await?;
    println!("shutting down");
    running.shutdown();
    Ok(())
}

async fn run_sim(scenario: &Path, mode: ClockMode, out: &Path) -> CmdResult {
    let spec = ScenarioSpec::load(scenario)?;
    let report = run_scenario(&spec, mode).await?;
    report.write(out)?;
    let t = &report.totals;
    println!(
        "{} s, {} nodes: {} readings persisted, {} received upstream, {} errors, {} alarms",
        report.duration_s,
        report.nodes.len(),
        t.readings_persisted,
        t.cloud_received,
        t.errors,
        t.alarms
    );
    for (p, n) in report.readings_per_protocol() {
        println!("  {:<10} {n}", p.as_str());
    }
    println!("wrote {} and {}", out.join("report.json").display(), out.join("throughput.csv").display());
    Ok(())
}

fn report(input: &Path, metric: Metric) -> CmdResult {
    let path = if input.is_dir() { input.join("report.json") } else { input.to_path_buf() };
    let report = ScenarioReport::load(&path)?;
    let text = match metric {
        Metric::Throughput => report.throughput_csv(),
        Metric::Counts => report.counts_table(),
        Metric::Readings => report.readings_csv(),
    };
    print!("{text}");
    Ok(())
}
