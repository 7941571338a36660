use std::fs;
use std::io::{self, BufRead, BufWriter, Write};
use std::process::ExitCode;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use pando_cli::run::{job_runner, run_pipeline, RelaySetting, RunConfig, RunError, TransportKind};
use pando_cli::speedup::{run_grid, write_csv, write_gnuplot, SpeedupConfig};
use pando_cli::{source, tools};
use pando_overlay::config::OverlayConfig;
use pando_overlay::fault::parse_plan;
use pando_overlay::net::{serve_http, spawn_relay, spawn_volunteer, NodeOptions, Transport};
use pando_worker::FunctionSpec;

#[derive(Parser)]
#[command(
    name = "pando",
    version,
    about = "Distribute a stream of jobs over volunteer machines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a function to every line of standard input, results in order.
    Run(RunArgs),
    /// Join a running pipeline as one or more volunteers.
    Volunteer(VolunteerArgs),
    /// Run a standalone relay.
    Relay(RelayArgs),
    /// Print 0, 1, 2, ... one per line.
    Count {
        #[arg(long)]
        to: Option<u64>,
        #[arg(long, default_value_t = 0)]
        from: u64,
    },
    /// Print `start:size` ranges for collatz-range.
    CountRanges {
        #[arg(long, default_value_t = 1)]
        start: u64,
        #[arg(long, default_value_t = 1000)]
        size: u64,
        #[arg(long)]
        to: Option<u64>,
    },
    /// Pass lines through while they follow the series of squares.
    ExpectSquare,
    /// Pass lines through, reporting line rates on standard error.
    Throughput {
        /// Report interval in milliseconds.
        #[arg(long, default_value_t = 1000)]
        interval: u64,
    },
    /// Measure throughput against the number of volunteers (simulated time).
    BenchSpeedup(BenchArgs),
}

#[derive(Args, Clone)]
struct OverlayArgs {
    #[arg(long, default_value_t = 10)]
    max_degree: usize,
    /// Fixed per-child limit on values in flight.
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long, default_value_t = 2000)]
    heartbeat_interval_ms: u64,
    #[arg(long, default_value_t = 10_000)]
    heartbeat_timeout_ms: u64,
    #[arg(long, default_value_t = 60_000)]
    candidate_timeout_ms: u64,
}

impl OverlayArgs {
    fn config(&self) -> OverlayConfig {
        OverlayConfig {
            max_degree: self.max_degree,
            limit_override: self.limit,
            max_nodes: self.max_nodes,
            heartbeat_interval: Duration::from_millis(self.heartbeat_interval_ms),
            heartbeat_timeout: Duration::from_millis(self.heartbeat_timeout_ms),
            candidate_timeout: Duration::from_millis(self.candidate_timeout_ms),
            ..OverlayConfig::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Socket,
}

#[derive(Args)]
struct RunArgs {
    /// Builtin name (square, sleep-square, collatz-steps, collatz-range,
    /// identity) or `exec:<path> [args]`.
    #[arg(long = "fn")]
    function: String,
    #[command(flatten)]
    overlay: OverlayArgs,
    /// Use a relay already running at host:port.
    #[arg(long, conflicts_with = "relay_port")]
    relay: Option<String>,
    /// Port of the relay started by this process.
    #[arg(long, default_value_t = 0)]
    relay_port: u16,
    /// Serve the volunteer page on this port.
    #[arg(long)]
    http_port: Option<u16>,
    #[arg(long, value_enum, default_value_t = TransportArg::Socket)]
    transport: TransportArg,
    /// Volunteers started in this process.
    #[arg(long, default_value_t = 0)]
    local: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// JSON fault plan killing local volunteers.
    #[arg(long)]
    faults: Option<String>,
    /// Fail if the run has not finished after this many seconds.
    #[arg(long)]
    timeout: Option<u64>,
}

#[derive(Args)]
struct VolunteerArgs {
    #[arg(long)]
    relay: String,
    #[arg(long = "fn")]
    function: String,
    #[command(flatten)]
    overlay: OverlayArgs,
    /// Number of volunteers to run in this process.
    #[arg(long, default_value_t = 1)]
    count: usize,
    /// Join through relayed channels instead of accepting connections.
    #[arg(long)]
    behind_relay: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RelayArgs {
    #[arg(long, default_value_t = 5000)]
    port: u16,
    #[arg(long)]
    http_port: Option<u16>,
    /// Client script served as /volunteer.js.
    #[arg(long)]
    script: Option<String>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "5,10,50,100,250,500,1000"
    )]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 50)]
    jobs_per_volunteer: u64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 10)]
    max_degree: usize,
    /// CSV output file (standard output if absent).
    #[arg(long)]
    csv: Option<String>,
    /// Gnuplot data file.
    #[arg(long)]
    gnuplot: Option<String>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_writer(io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run(args) => run(args),
        Command::Volunteer(args) => volunteer(args),
        Command::Relay(args) => relay(args),
        Command::Count { to, from } => io_status(tools::count(
            &mut BufWriter::new(io::stdout().lock()),
            from,
            to,
        )),
        Command::CountRanges { start, size, to } => io_status(tools::count_ranges(
            &mut BufWriter::new(io::stdout().lock()),
            start,
            size,
            to,
        )),
        Command::ExpectSquare => {
            match tools::expect_square(io::stdin().lock(), &mut io::stdout().lock()) {
                Ok(_) => 0,
                Err(e) => {
                    eprintln!("expect-square: {e}");
                    1
                }
            }
        }
        Command::Throughput { interval } => throughput(Duration::from_millis(interval.max(1))),
        Command::BenchSpeedup(args) => bench(args),
    };
    ExitCode::from(code as u8)
}

fn io_status(r: io::Result<()>) -> i32 {
    match r {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pando: {e}");
            1
        }
    }
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn parse_function(s: &str) -> Result<FunctionSpec, RunError> {
    s.parse()
        .map_err(|e| RunError::Config(format!("--fn {s}: {e}")))
}

fn run(args: RunArgs) -> i32 {
    let cfg = match run_config(&args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pando: {e}");
            return e.exit_code();
        }
    };
    let rt = runtime();
    let input = source::lines(io::BufReader::new(io::stdin()));
    let mut out = BufWriter::new(io::stdout().lock());
    let mut broken = false;
    let result = rt.block_on(run_pipeline(cfg, input, |line| {
        if broken {
            return;
        }
        if writeln!(out, "{line}").and_then(|_| out.flush()).is_err() {
            broken = true;
        }
    }));
    let _ = out.flush();
    rt.shutdown_background();
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("pando: {e}");
            e.exit_code()
        }
    }
}

fn run_config(args: &RunArgs) -> Result<RunConfig, RunError> {
    let mut cfg = RunConfig::new(parse_function(&args.function)?);
    cfg.overlay = args.overlay.config();
    cfg.overlay.validate()?;
    cfg.relay = match &args.relay {
        Some(addr) => RelaySetting::External(addr.clone()),
        None => RelaySetting::Port(args.relay_port),
    };
    cfg.transport = match args.transport {
        TransportArg::Inproc => TransportKind::Inproc,
        TransportArg::Socket => TransportKind::Socket,
    };
    cfg.local = args.local;
    cfg.seed = args.seed;
    cfg.http_port = args.http_port;
    cfg.watchdog = args.timeout.map(Duration::from_secs);
    if let Some(path) = &args.faults {
        let text =
            fs::read_to_string(path).map_err(|e| RunError::Config(format!("{path}: {e}")))?;
        cfg.faults = parse_plan(&text).map_err(|e| RunError::Config(format!("{path}: {e}")))?;
    }
    Ok(cfg)
}

fn volunteer(args: VolunteerArgs) -> i32 {
    let spec = match parse_function(&args.function) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("pando: {e}");
            return 2;
        }
    };
    let cfg = args.overlay.config();
    if let Err(e) = cfg.validate() {
        eprintln!("pando: {e}");
        return 2;
    }
    let rt = runtime();
    rt.block_on(async {
        let mut nodes = Vec::new();
        for k in 0..args.count {
            let opts = NodeOptions {
                transport: Transport::Tcp,
                relay: Some(args.relay.clone()),
                listen: "127.0.0.1:0".into(),
                runner: job_runner(&spec),
                seed: args.seed.wrapping_add(k as u64),
                behind_relay: args.behind_relay,
            };
            match spawn_volunteer(cfg.clone(), opts).await {
                Ok(n) => nodes.push(n),
                Err(e) => {
                    eprintln!("pando: cannot start volunteer: {e}");
                    return 1;
                }
            }
        }
        let _ = tokio::signal::ctrl_c().await;
        0
    })
}

fn relay(args: RelayArgs) -> i32 {
    let script = match args.script.as_deref().map(fs::read_to_string).transpose() {
        Ok(s) => s,
        Err(e) => {
            eprintln!("pando: {e}");
            return 2;
        }
    };
    let rt = runtime();
    rt.block_on(async {
        let relay = match spawn_relay(Transport::Tcp, &format!("0.0.0.0:{}", args.port), None).await
        {
            Ok(r) => r,
            Err(e) => {
                eprintln!("pando: cannot listen on port {}: {e}", args.port);
                return 2;
            }
        };
        eprintln!("pando: relay listening on {}", relay.addr);
        let _http = match args.http_port {
            Some(port) => match serve_http(&relay, &format!("0.0.0.0:{port}"), script).await {
                Ok((addr, task)) => {
                    eprintln!("pando: volunteer page on http://{addr}/");
                    Some(task)
                }
                Err(e) => {
                    eprintln!("pando: cannot serve http on port {port}: {e}");
                    return 2;
                }
            },
            None => None,
        };
        let _ = tokio::signal::ctrl_c().await;
        0
    })
}

fn throughput(interval: Duration) -> i32 {
    let (tx, rx) = mpsc::channel::<String>();
    thread::spawn(move || {
        for line in io::stdin().lock().lines() {
            let Ok(line) = line else { break };
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let start = Instant::now();
    let mut meter = tools::Meter::new();
    let mut out = BufWriter::new(io::stdout().lock());
    let mut next = start + interval;
    loop {
        if Instant::now() >= next {
            let _ = out.flush();
            eprintln!("throughput: {}", meter.sample(start.elapsed()));
            next += interval;
            continue;
        }
        let wait = next.saturating_duration_since(Instant::now());
        match rx.recv_timeout(wait) {
            Ok(line) => {
                // Pass on whatever else is ready before flushing.
                let ready = std::iter::once(line).chain(rx.try_iter());
                let mut written = true;
                for line in ready {
                    meter.record(1);
                    written &= writeln!(out, "{line}").is_ok();
                }
                if !written || out.flush().is_err() {
                    break;
                }
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
    }
    let _ = out.flush();
    let total = meter.total();
    let elapsed = start.elapsed();
    let overall = if elapsed.is_zero() {
        0.0
    } else {
        total as f64 / elapsed.as_secs_f64()
    };
    eprintln!(
        "throughput: overall {total} lines in {:.3}s: {overall:.3} lines/s",
        elapsed.as_secs_f64()
    );
    0
}

fn bench(args: BenchArgs) -> i32 {
    let cfg = SpeedupConfig {
        overlay: OverlayConfig {
            max_degree: args.max_degree,
            ..OverlayConfig::default()
        },
        seed: args.seed,
        jobs_per_volunteer: args.jobs_per_volunteer,
        ..SpeedupConfig::default()
    };
    if let Err(e) = cfg.overlay.validate() {
        eprintln!("pando: {e}");
        return 2;
    }
    if args.grid.contains(&0) {
        eprintln!("pando: grid sizes must be positive");
        return 2;
    }
    let points = run_grid(&cfg, &args.grid, |p| {
        eprintln!(
            "bench: {} volunteers, {} jobs in {:.1}s: ratio {:.3}{}",
            p.volunteers,
            p.jobs,
            p.elapsed.as_secs_f64(),
            p.ratio,
            if p.ok { "" } else { " (failed)" }
        )
    });
    let written = match &args.csv {
        Some(path) => fs::File::create(path).and_then(|mut f| write_csv(&mut f, &points)),
        None => write_csv(&mut io::stdout().lock(), &points),
    };
    let written = written.and_then(|_| match &args.gnuplot {
        Some(path) => fs::File::create(path).and_then(|mut f| write_gnuplot(&mut f, &points)),
        None => Ok(()),
    });
    match written {
        Ok(()) if points.iter().all(|p| p.ok) => 0,
        Ok(()) => 1,
        Err(e) => {
            eprintln!("pando: {e}");
            1
        }
    }
}
