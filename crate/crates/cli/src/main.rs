use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mdlbell::ineq::InequalitySpec;
use mdlbell::mdlopt::max_bell_mdl;
use mdlbell::qstate::StateKind;
use mdlbell::pipeline::{
    analyze, analyze_counts, fixtures, render, AnalysisOptions, EstimateMethod, InequalityChoice,
    ReportFormat, SectionSpec,
};
use mdlbell::rngstat::{min_entropy, pattern_scan, run_battery, RngTest, DEFAULT_ALPHA};
use mdlbell::session::{
    parse_bits, read_log, run_session, write_log, BitSource, BitStreamSource, PrngSource,
    SessionConfig,
};
use mdlbell_livesvc::ServiceConfig;

#[derive(Parser)]
#[command(name = "mdlbell", version, about = "Bell tests with measurement-dependent locality")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a session and write its trial log.
    Simulate {
        /// Flat `key = value` session config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Alice's setting bits: a file of 0/1 characters or `prng:<seed>`.
        #[arg(long)]
        bits_a: String,
        /// Bob's setting bits, same forms as `--bits-a`.
        #[arg(long)]
        bits_b: String,
        #[arg(long)]
        out: PathBuf,
        /// Overrides `max_trials` from the config.
        #[arg(long)]
        max_trials: Option<u64>,
    },
    /// Analyze a trial log.
    Analyze {
        /// Log file; omit when using `--published`.
        log: Option<PathBuf>,
        /// Analyze a published count table instead of a log.
        #[arg(long, value_enum, conflicts_with = "log")]
        published: Option<Published>,
        #[arg(long, default_value = "both")]
        inequality: InequalityChoice,
        #[arg(long, default_value = "pooled")]
        method: EstimateMethod,
        /// Section length for uncertainties: e.g. 1h, 5m, 30s or 10000-trials.
        #[arg(long)]
        section: Option<SectionSpec>,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Session config whose geometry is used for the timing margin.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Maximum of an inequality over measurement-dependent local models.
    Optimize {
        #[arg(long, value_enum)]
        inequality: OptInequality,
        /// Comma list (0,0.1,0.25) or range start:stop:step.
        #[arg(long)]
        l: String,
        /// Input distribution P(xy) for xy = 00,01,10,11.
        #[arg(long, default_value = "0.25,0.25,0.25,0.25")]
        inputs: String,
    },
    /// Statistical tests on a bitstream file.
    Rngtest {
        bitfile: PathBuf,
        /// `all` or a comma list of monobit, block-frequency, runs, serial.
        #[arg(long, default_value = "all")]
        tests: String,
        #[arg(long, default_value_t = DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long)]
        block_len: Option<usize>,
        #[arg(long)]
        pattern_len: Option<usize>,
        /// Bit patterns to count, comma separated.
        #[arg(long)]
        patterns: Option<String>,
        /// Block length for a min-entropy estimate.
        #[arg(long)]
        min_entropy: Option<usize>,
        #[arg(long)]
        csv: bool,
    },
    /// Run the live session HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long, default_value = "logs")]
        log_dir: PathBuf,
        #[arg(long, default_value_t = 500)]
        heartbeat_ms: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Published {
    /// Human-chosen settings.
    Human,
    /// QRNG-chosen settings.
    Qrng,
}

#[derive(Clone, Copy, ValueEnum)]
enum OptInequality {
    Chsh,
    Mdl,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Simulate {
            config,
            bits_a,
            bits_b,
            out,
            max_trials,
        } => simulate(config.as_deref(), &bits_a, &bits_b, &out, max_trials),
        Command::Analyze {
            log,
            published,
            inequality,
            method,
            section,
            format,
            config,
        } => {
            let report = match (log, published) {
                (_, Some(p)) => {
                    let counts = match p {
                        Published::Human => fixtures::human_run(),
                        Published::Qrng => fixtures::qrng_run(),
                    };
                    render(&analyze_counts(&counts, inequality), format)
                }
                (Some(path), None) => {
                    let log = read_log(&path).with_context(|| format!("reading {}", path.display()))?;
                    let geometry = config.as_deref().map(load_config).transpose()?.map(|c| c.geometry);
                    let opts = AnalysisOptions {
                        inequality,
                        method,
                        section,
                        geometry,
                        ..AnalysisOptions::default()
                    };
                    render(&analyze(&log, &opts), format)
                }
                (None, None) => bail!("give a log file or --published"),
            };
            print!("{report}");
            Ok(())
        }
        Command::Optimize { inequality, l, inputs } => optimize(inequality, &l, &inputs),
        Command::Rngtest {
            bitfile,
            tests,
            alpha,
            block_len,
            pattern_len,
            patterns,
            min_entropy: me_block,
            csv,
        } => {
            let text = fs::read_to_string(&bitfile).with_context(|| format!("reading {}", bitfile.display()))?;
            let bits = parse_bits(&text)?;
            let tests: Vec<RngTest> = RngTest::parse_list(&tests)?
                .into_iter()
                .map(|t| match t {
                    RngTest::BlockFrequency { block_len: d } => RngTest::BlockFrequency {
                        block_len: block_len.unwrap_or(d),
                    },
                    RngTest::Serial { pattern_len: d } => RngTest::Serial {
                        pattern_len: pattern_len.unwrap_or(d),
                    },
                    other => other,
                })
                .collect();
            let report = run_battery(&bits, &tests, alpha);
            if csv {
                print!("{}", report.to_csv());
            } else {
                println!("{report}");
            }
            if let Some(list) = patterns {
                let pats: Vec<&str> = list.split(',').map(str::trim).collect();
                for hit in pattern_scan(&bits, &pats)? {
                    println!("pattern {}: {}", hit.pattern, hit.count);
                }
            }
            if let Some(k) = me_block {
                println!("min-entropy (block {k}): {:.6} bits/bit", min_entropy(&bits, k)?);
            }
            Ok(())
        }
        Command::Serve {
            addr,
            log_dir,
            heartbeat_ms,
        } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind(&addr).await.with_context(|| format!("binding {addr}"))?;
                eprintln!("listening on http://{}", listener.local_addr()?);
                let config = ServiceConfig {
                    log_dir,
                    heartbeat: Duration::from_millis(heartbeat_ms),
                };
                mdlbell_livesvc::serve(listener, config).await?;
                Ok(())
            })
        }
    }
}

fn load_config(path: &Path) -> Result<SessionConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(SessionConfig::from_kv_text(&text)?)
}

enum Bits {
    File(BitStreamSource),
    Prng(PrngSource),
}

impl BitSource for Bits {
    fn next_bit(&mut self) -> Option<u8> {
        match self {
            Bits::File(s) => s.next_bit(),
            Bits::Prng(s) => s.next_bit(),
        }
    }
}

fn open_bits(arg: &str) -> Result<Bits> {
    if let Some(seed) = arg.strip_prefix("prng:") {
        let seed = seed.parse().with_context(|| format!("bad prng seed in {arg:?}"))?;
        return Ok(Bits::Prng(PrngSource::new(seed)));
    }
    Ok(Bits::File(
        BitStreamSource::from_file(arg).with_context(|| format!("reading bits from {arg}"))?,
    ))
}

fn simulate(config: Option<&Path>, bits_a: &str, bits_b: &str, out: &Path, max_trials: Option<u64>) -> Result<()> {
    let mut cfg = match config {
        Some(p) => load_config(p)?,
        None => SessionConfig::calibrated(StateKind::ChshMaximal),
    };
    if max_trials.is_some() {
        cfg.max_trials = max_trials;
    }
    let (a, b) = (open_bits(bits_a)?, open_bits(bits_b)?);
    if matches!((&a, &b), (Bits::Prng(_), Bits::Prng(_))) && cfg.max_trials.is_none() {
        bail!("both bit sources are endless; set max_trials in the config or pass --max-trials");
    }
    let run = run_session(&cfg, a, b)?;
    write_log(out, &run.log).with_context(|| format!("writing {}", out.display()))?;
    eprintln!(
        "{} trials, {} coincidences, stopped: {:?}",
        run.log.len(),
        run.log.coincidences(),
        run.stop
    );
    Ok(())
}

/// Grid values rounded to 12 decimals so `0:0.25:0.05` yields 0.15, not
/// 0.15000000000000002.
fn parse_grid(spec: &str) -> Result<Vec<f64>> {
    let round = |v: f64| (v * 1e12).round() / 1e12;
    let parts: Vec<&str> = spec.split(':').collect();
    match parts.as_slice() {
        [start, stop, step] => {
            let (start, stop, step): (f64, f64, f64) = (start.parse()?, stop.parse()?, step.parse()?);
            if !(step > 0.0) {
                bail!("grid step must be positive");
            }
            let n = ((stop - start) / step + 1e-9).floor() as i64;
            Ok((0..=n).map(|i| round(start + i as f64 * step)).collect())
        }
        [list] => list
            .split(',')
            .map(|v| v.trim().parse::<f64>().with_context(|| format!("bad grid value {v:?}")))
            .collect(),
        _ => bail!("grid must be a comma list or start:stop:step"),
    }
}

fn optimize(which: OptInequality, grid: &str, inputs: &str) -> Result<()> {
    let spec = match which {
        OptInequality::Chsh => InequalitySpec::chsh(),
        OptInequality::Mdl => InequalitySpec::mdl(),
    };
    let dist: Vec<f64> = inputs
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .context("bad --inputs")?;
    let dist: [f64; 4] = dist
        .try_into()
        .map_err(|_| anyhow::anyhow!("--inputs needs four values"))?;
    println!("l,bound");
    for l in parse_grid(grid)? {
        let sol = max_bell_mdl(&spec, l, dist).with_context(|| format!("l = {l}"))?;
        println!("{l},{}", sol.optimum_f64());
    }
    Ok(())
}
