use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};
use serde_json::json;

use ldm_core::config::LdmConfig;
use ldm_core::feed::{self, ScenarioFile, Speed};
use ldm_core::ingest::{parse_cpm, parse_openlabel};
use ldm_core::map::parse_osm;
use ldm_core::model::{ElementId, FrameSource, TimeInterval, Timestamp};
use ldm_core::par::Execution;
use ldm_core::query::{Ldm, ObjectReport, DEFAULT_STATIONARY_EPS_MPS};

/// Local Dynamic Map command line.
///
/// Timestamps are integer microseconds. With --db, state is read from and
/// written back to the given directory; without it every run starts empty.
#[derive(Parser, Debug)]
#[command(name = "ldm", version)]
struct Cli {
    /// Key-value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// State directory.
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Run queries on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Accept feed lines on a TCP socket until interrupted.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        /// Stop after this many seconds.
        #[arg(long = "for", value_name = "SECS")]
        run_for: Option<f64>,
    },
    /// Load an OSM XML file into the road graph and layer 1.
    LoadMap { osm: PathBuf },
    /// Commit one scene document (or one CPM with --cpm).
    Ingest {
        file: PathBuf,
        #[arg(long)]
        cpm: bool,
    },
    /// Replay a scenario file.
    Replay {
        scenario: PathBuf,
        /// Pacing factor, or "inf" for no pacing.
        #[arg(long, default_value = "1")]
        speed: Speed,
    },
    /// Run a named query and print one JSON report per line.
    Query {
        name: QueryName,
        #[arg(long)]
        ego: Option<u64>,
        #[arg(long)]
        radius: Option<f64>,
        /// Query time; defaults to the latest committed timestamp.
        #[arg(long)]
        at: Option<i64>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        node: Option<i64>,
        /// Stationary window in seconds.
        #[arg(long, default_value_t = 5.0)]
        window: f64,
        /// Stationary speed threshold in m/s.
        #[arg(long, default_value_t = DEFAULT_STATIONARY_EPS_MPS)]
        eps: f64,
        /// Render a table instead of JSON lines.
        #[arg(long)]
        pretty: bool,
    },
    /// Write frames in [from, to) as one scene document.
    Export {
        #[arg(long)]
        from: Option<i64>,
        #[arg(long)]
        to: Option<i64>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print store figures.
    Info {
        #[arg(long)]
        pretty: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum QueryName {
    ObjectsWithin,
    SameWay,
    Stationary,
    NextNodes,
    NearNode,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn usage_error(msg: &str) -> ! {
    Cli::command()
        .error(clap::error::ErrorKind::MissingRequiredArgument, msg)
        .exit()
}

fn open(cli: &Cli) -> Result<Ldm> {
    let config = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            LdmConfig::from_kv_str(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => LdmConfig::default(),
    };
    let ldm = match &cli.db {
        Some(dir) => Ldm::load_state(config, dir)?,
        None => Ldm::new(config)?,
    };
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    Ok(ldm.with_execution(exec))
}

fn save(cli: &Cli, ldm: &Ldm) -> Result<()> {
    if let Some(dir) = &cli.db {
        ldm.save_state(dir)?;
    }
    Ok(())
}

fn read_text(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    let ldm = open(&cli)?;
    let mut out = io::stdout().lock();
    match &cli.command {
        Command::Serve { listen, run_for } => {
            let ldm = Arc::new(ldm);
            let handle = feed::serve(listen.as_str(), ldm.clone())?;
            writeln!(out, "{}", json!({"listening": handle.local_addr().to_string()}))?;
            out.flush()?;
            let started = Instant::now();
            let deadline = run_for.map(Duration::from_secs_f64);
            let mut saved = Instant::now();
            loop {
                std::thread::sleep(Duration::from_millis(50));
                if deadline.is_some_and(|d| started.elapsed() >= d) {
                    break;
                }
                if saved.elapsed() >= ldm.config().eviction_period {
                    save(&cli, &ldm)?;
                    saved = Instant::now();
                }
            }
            handle.shutdown();
            save(&cli, &ldm)?;
        }
        Command::LoadMap { osm } => {
            let bytes = fs::read(osm).with_context(|| format!("reading {}", osm.display()))?;
            let g = parse_osm(&bytes)?;
            for w in g.warnings() {
                log::warn!("{w:?}");
            }
            let counts = ldm.load_map(&g)?;
            save(&cli, &ldm)?;
            let v = json!({"nodes": counts.nodes, "ways": counts.ways, "warnings": g.warnings().len()});
            writeln!(out, "{v}")?;
        }
        Command::Ingest { file, cpm } => {
            let text = read_text(file)?;
            let counts = if *cpm {
                ldm.add_cpm(&parse_cpm(&text)?)?
            } else {
                ldm.add_objects(&parse_openlabel(&text)?, FrameSource::LocalPerception)?
            };
            save(&cli, &ldm)?;
            writeln!(out, "{}", serde_json::to_string(&counts)?)?;
        }
        Command::Replay { scenario, speed } => {
            let f = ScenarioFile::read(scenario)?;
            let summary = feed::replay(&f, *speed, &ldm);
            save(&cli, &ldm)?;
            writeln!(out, "{}", serde_json::to_string(&summary)?)?;
        }
        Command::Query {
            name,
            ego,
            radius,
            at,
            k,
            node,
            window,
            eps,
            pretty,
        } => {
            let at = at.map_or_else(|| ldm.store().last_update(), Timestamp);
            let need_ego = || ElementId(ego.unwrap_or_else(|| usage_error("this query needs --ego")));
            let need_radius = || radius.unwrap_or_else(|| usage_error("this query needs --radius"));
            let reports = match name {
                QueryName::ObjectsWithin => ldm.objects_within(need_ego(), need_radius(), at)?,
                QueryName::SameWay => ldm.objects_on_same_way(need_ego(), at)?,
                QueryName::Stationary => {
                    if !(*window > 0.0 && window.is_finite()) {
                        usage_error("--window must be a positive number of seconds");
                    }
                    ldm.stationary_objects(at, Duration::from_secs_f64(*window), *eps)?
                }
                QueryName::NearNode => {
                    let node = node.unwrap_or_else(|| usage_error("this query needs --node"));
                    ldm.objects_near_node(node, need_radius(), at)?
                }
                QueryName::NextNodes => {
                    let k = k.unwrap_or_else(|| usage_error("this query needs --k"));
                    for n in ldm.next_road_nodes(need_ego(), k, at)? {
                        writeln!(out, "{n}")?;
                    }
                    return Ok(());
                }
            };
            if *pretty {
                print_table(&mut out, &reports)?;
            } else {
                for r in &reports {
                    writeln!(out, "{}", serde_json::to_string(r)?)?;
                }
            }
        }
        Command::Export { from, to, out: dest } => {
            let interval = TimeInterval::new(
                from.map_or(Timestamp::MIN, Timestamp),
                to.map_or(Timestamp::MAX, Timestamp),
            );
            let counts = match dest {
                Some(p) => {
                    let mut f = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
                    let c = ldm.export(interval, &mut f)?;
                    writeln!(out, "{}", serde_json::to_string(&c)?)?;
                    c
                }
                None => ldm.export(interval, &mut out)?,
            };
            log::info!("exported {counts:?}");
        }
        Command::Info { pretty } => {
            for (name, value) in ldm.get_info() {
                if *pretty {
                    writeln!(out, "{name:<26} {value}")?;
                } else {
                    writeln!(out, "{}", json!({"field": name, "value": value}))?;
                }
            }
        }
    }
    Ok(())
}

fn print_table(out: &mut impl Write, reports: &[ObjectReport]) -> io::Result<()> {
    writeln!(
        out,
        "{:>6}  {:<24} {:<18} {:>12} {:>13} {:>10} {:>8}",
        "id", "name", "type", "lat", "lon", "dist_m", "way"
    )?;
    for r in reports {
        let (lat, lon) = r.pose.map_or((f64::NAN, f64::NAN), |p| (p.lat, p.lon));
        let dist = r.distance_to_ego.or(r.distance_to_node);
        let cell = |v: Option<String>| v.unwrap_or_else(|| "-".into());
        writeln!(
            out,
            "{:>6}  {:<24} {:<18} {:>12.7} {:>13.7} {:>10} {:>8}",
            r.element_id.0,
            r.name,
            r.semantic_type,
            lat,
            lon,
            cell(dist.map(|d| format!("{d:.2}"))),
            cell(r.matched_way.map(|w| w.to_string())),
        )?;
    }
    Ok(())
}
