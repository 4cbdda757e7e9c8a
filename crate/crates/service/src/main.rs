use std::fs;
use std::io::{self, BufReader, Write};
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use senswich::channel::ChannelMap;
use senswich::control::{get_energy_report, run_scenario, RunState};
use senswich::lpp::{decode_base64, decode_payload};
use senswich::node::{Basis, EnergyReport, ProfileKind};
use senswich::pipeline::{export_points, read_points, ExportFormat};
use senswich::scenario::{ScenarioConfig, Speed};
use senswich_service::{router, AppState};

#[derive(Parser)]
#[command(
    name = "senswich",
    version,
    about = "Simulated LoRaWAN water-quality monitoring network"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario to completion.
    Run {
        /// Scenario TOML; the built-in lagoon deployment when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Real-time multiplier, or `max`.
        #[arg(long)]
        speed: Option<Speed>,
        /// Directory for points.csv, events.jsonl and summary.json.
        #[arg(long, env = "SENSWICH_DATA_DIR")]
        out: Option<PathBuf>,
    },
    /// Print the steady-state energy budget of a built-in profile.
    EnergyReport {
        #[arg(long, default_value = "regulator")]
        profile: ProfileKind,
        /// Both bases when omitted.
        #[arg(long)]
        basis: Option<Basis>,
        #[arg(long)]
        json: bool,
    },
    /// Decode a base64 CayenneLPP payload.
    Decode {
        #[arg(long)]
        payload: String,
    },
    /// Convert a points.csv file to csv (with header) or jsonl.
    Export {
        #[arg(long, default_value = "csv")]
        format: ExportFormat,
        /// A points.csv file or a run directory containing one.
        #[arg(long, env = "SENSWICH_DATA_DIR")]
        input: PathBuf,
        /// Standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "SENSWICH_LISTEN", default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        #[arg(long, env = "SENSWICH_DATA_DIR")]
        data_dir: Option<PathBuf>,
        /// Scenario started at boot; the built-in lagoon deployment when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the scenario's speed; defaults to 60x for the built-in one.
        #[arg(long)]
        speed: Option<Speed>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(io::stderr)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            speed,
            out,
        } => cmd_run(config, seed, speed, out),
        Command::EnergyReport { profile, basis, json } => cmd_energy(profile, basis, json),
        Command::Decode { payload } => cmd_decode(&payload),
        Command::Export { format, input, out } => cmd_export(format, input, out),
        Command::Serve {
            listen,
            data_dir,
            config,
            speed,
        } => cmd_serve(listen, data_dir, config, speed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // output piped into something like `head`
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn load_config(path: Option<PathBuf>) -> Result<ScenarioConfig, Box<dyn std::error::Error>> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| format!("{}: {e}", p.display()))?;
            Ok(ScenarioConfig::from_toml(&text)?)
        }
        None => Ok(ScenarioConfig::lagoon_default()),
    }
}

fn cmd_run(
    config: Option<PathBuf>,
    seed: Option<u64>,
    speed: Option<Speed>,
    out: Option<PathBuf>,
) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(s) = speed {
        cfg.speed = s;
    }
    let started = std::time::Instant::now();
    let h = run_scenario(cfg, out.as_deref())?;
    while h.wait_timeout(Duration::from_secs(1)) == RunState::Running {
        let s = h.status();
        eprintln!("t={} s ({:.1}%)", s.sim_time, 100.0 * s.progress);
    }
    let status = h.status();
    let st = status.stats;
    println!(
        "simulated {} s in {:.2} s wall",
        status.sim_time,
        started.elapsed().as_secs_f64()
    );
    println!(
        "cycles {}  uplinks {} sent / {} delivered / {} dropped  messages {} ok / {} error  downlinks {}",
        st.cycles,
        st.uplinks_sent,
        st.uplinks_delivered,
        st.uplinks_dropped,
        st.messages_ok,
        st.messages_error,
        st.downlinks_delivered
    );
    let sim = h.read();
    println!("stored points {}", sim.pipeline().store().len());
    for n in sim.node_summaries() {
        println!(
            "{}: battery {:.2}%  last seen {}",
            n.device_id,
            n.battery_remaining,
            n.last_seen.map_or("never".to_string(), |t| format!("{t} s"))
        );
    }
    if let Some(dir) = out {
        println!("outputs in {}", dir.display());
    }
    Ok(())
}

fn cmd_energy(profile: ProfileKind, basis: Option<Basis>, json: bool) -> CliResult {
    let bases = match basis {
        Some(b) => vec![b],
        None => vec![Basis::Capacity, Basis::Energy],
    };
    let reports: Vec<EnergyReport> = bases.iter().map(|&b| get_energy_report(profile, b)).collect();
    if json {
        println!("{}", serde_json::to_string_pretty(&reports)?);
        return Ok(());
    }
    for r in reports {
        println!("{profile} profile, {} basis", r.basis);
        println!("  idle power           {:>10.2} mW", r.idle_power_mw);
        println!("  energy per sample    {:>10.2} mWh", r.energy_per_sample_mwh);
        println!("  average current      {:>10.2} mA", r.avg_current_ma);
        println!("  average power        {:>10.3} mW", r.avg_power_mw);
        println!(
            "  discharge time       {:>10.2} h ({:.2} days)",
            r.discharge_h, r.discharge_days
        );
    }
    Ok(())
}

fn cmd_decode(payload: &str) -> CliResult {
    let bytes = decode_base64(payload).map_err(|e| format!("base64: {e}"))?;
    let records = decode_payload(&bytes)?;
    let mut out = io::stdout().lock();
    for r in &records {
        writeln!(out, "{r}")?;
    }
    match ChannelMap::default().series_values(&records) {
        Ok(values) => {
            for (series, value) in values {
                writeln!(out, "{series} = {value}")?;
            }
        }
        Err(e) => writeln!(out, "(not a node payload: {e})")?,
    }
    Ok(())
}

fn cmd_export(format: ExportFormat, input: PathBuf, out: Option<PathBuf>) -> CliResult {
    let file = if input.is_dir() {
        input.join("points.csv")
    } else {
        input
    };
    let reader = BufReader::new(fs::File::open(&file).map_err(|e| format!("{}: {e}", file.display()))?);
    let points = read_points(reader)?;
    match out {
        Some(p) => export_points(&points, format, io::BufWriter::new(fs::File::create(p)?))?,
        None => export_points(&points, format, io::stdout().lock())?,
    }
    Ok(())
}

fn cmd_serve(
    listen: SocketAddr,
    data_dir: Option<PathBuf>,
    config: Option<PathBuf>,
    speed: Option<Speed>,
) -> CliResult {
    let builtin = config.is_none();
    let mut cfg = load_config(config)?;
    match speed {
        Some(s) => cfg.speed = s,
        None if builtin => cfg.speed = Speed::Factor(60.0),
        None => {}
    }
    let state = AppState::new(data_dir);
    state.start(cfg)?;
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen).await?;
        eprintln!("listening on http://{}", listener.local_addr()?);
        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
    })?;
    Ok(())
}
