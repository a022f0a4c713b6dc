//! `tsep`: forward synthesis, blind jet recovery, verification and curvature
//! probes from scenario configs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tsep_core::manifold::{metric_from_spec, MetricSpec};
use tsep_core::measurement::{Encoding, FailurePolicy, MeasurementTable};
use tsep_core::recovery::JetReport;
use tsep_core::scenario::{self, ScenarioConfig};
use tsep_core::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_FORWARD: u8 = 3;
const EXIT_RECOVERY: u8 = 4;
const EXIT_VERIFY: u8 = 5;
const EXIT_DATA: u8 = 6;
const EXIT_INVARIANTS: u8 = 7;

#[derive(Parser)]
#[command(name = "tsep", version, about = "Lorentzian time-separation data: synthesis and jet recovery")]
struct Cli {
    /// worker threads (default: all cores)
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// seed for randomized spot checks (overrides the config)
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Sample d on Σ×Σ and write the dataset
    Forward {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// strip the generating metric from the dataset
        #[arg(long)]
        blind: bool,
        /// override the fine grid spacing
        #[arg(long)]
        h: Option<f64>,
        /// store values as hex bit patterns
        #[arg(long)]
        hex: bool,
        /// record failing pairs as 0 instead of aborting
        #[arg(long)]
        skip_failures: bool,
        /// random pairs compared with the product closed form
        #[arg(long, default_value_t = 0)]
        check: usize,
    },
    /// Recover the jet at u₀ from a dataset alone
    Recover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a jet report with the Fermi-chart truth
    Verify {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// take the metric from this dataset instead of the config
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kretschmann samples, slope fit and completeness verdicts
    Invariants {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Timelike-convexity probe of Σ
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Minkowski vs flat torus over the same Σ patch
    DemoTorus {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

struct Failure {
    code: u8,
    msg: String,
}

fn fail(code: u8) -> impl Fn(Error) -> Failure {
    move |e| Failure { code, msg: e.to_string() }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ScenarioConfig, Failure> {
    let mut c = ScenarioConfig::load(path).map_err(fail(EXIT_CONFIG))?;
    if let Some(s) = seed {
        c.seed = s;
    }
    Ok(c)
}

fn write(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| fail(EXIT_DATA)(e.into()))?;
    }
    std::fs::write(path, text).map_err(|e| fail(EXIT_DATA)(e.into()))
}

fn to_json<T: serde::Serialize>(v: &T) -> Result<String, Failure> {
    serde_json::to_string_pretty(v).map_err(|e| fail(EXIT_DATA)(e.into()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn ladder_csv(r: &JetReport) -> String {
    let mut s = String::from("order,xi,anchors,lambda,value,rel_residual\n");
    for f in &r.diagnostics.families {
        let xi = f.xi.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ");
        for lam in &f.lambda_ladder {
            let _ = writeln!(
                s,
                "{},{},{},{:.12e},{},{}",
                f.order,
                xi,
                f.anchors,
                lam,
                f.value.map_or(String::new(), |v| format!("{v:.12e}")),
                f.rel_residual.map_or(String::new(), |v| format!("{v:.3e}"))
            );
        }
    }
    s
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Forward { config, out, blind, h, hex, skip_failures, check } => {
            let cfg = load_config(&config, cli.seed)?;
            let policy = if skip_failures { FailurePolicy::Skip } else { FailurePolicy::Abort };
            let mut t = cfg.forward(h, policy).map_err(fail(EXIT_FORWARD))?;
            if check > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let n = t.len();
                let pairs: Vec<(usize, usize)> = (0..check).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect();
                match scenario::product_spot_check(&cfg, &t, &pairs).map_err(fail(EXIT_FORWARD))? {
                    Some(err) => {
                        eprintln!("closed-form spot check over {check} pairs: max |Δd| = {err:.3e}");
                        if err > 1e-7 {
                            return Err(Failure { code: EXIT_FORWARD, msg: format!("closed-form mismatch {err:.3e}") });
                        }
                    }
                    None => eprintln!("no closed form for metric {}; spot check skipped", cfg.metric.name),
                }
            }
            if blind {
                t = t.blind();
            }
            if hex {
                t.meta.encoding = Encoding::Hex;
            }
            write(&out, &t.to_json().map_err(fail(EXIT_DATA))?)?;
            eprintln!("wrote {} nodes ({} ordered pairs) to {}", t.len(), t.len() * t.len(), out.display());
        }
        Cmd::Recover { config, table, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let t = MeasurementTable::load(&table).map_err(fail(EXIT_DATA))?;
            let r = cfg.recover(&t).map_err(fail(EXIT_RECOVERY))?;
            write(&out, &to_json(&r)?)?;
            write(&sibling(&out, "ladder.csv"), &ladder_csv(&r))?;
            for w in &r.diagnostics.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!("jet of order {} at u0 = {:?} written to {}", r.k, r.u0, out.display());
        }
        Cmd::Verify { config, report, table, out } => {
            let mut cfg = load_config(&config, cli.seed)?;
            if let Some(tp) = table {
                let t = MeasurementTable::load(&tp).map_err(fail(EXIT_DATA))?;
                let m: MetricSpec = t.meta.metric.clone().ok_or(Failure { code: EXIT_VERIFY, msg: Error::Blinded.to_string() })?;
                metric_from_spec(&m).map_err(fail(EXIT_CONFIG))?;
                cfg.metric = m;
            }
            let text = std::fs::read_to_string(&report).map_err(|e| fail(EXIT_DATA)(e.into()))?;
            let r: JetReport = serde_json::from_str(&text).map_err(|e| fail(EXIT_DATA)(Error::Corrupt(e.to_string())))?;
            let truth = cfg.truth_jet(r.k).map_err(fail(EXIT_VERIFY))?;
            let v = scenario::compare_jet(&r, &truth, &cfg.verify).map_err(fail(EXIT_VERIFY))?;
            for o in &v.orders {
                eprintln!("k = {}: max error {:.3e} (tolerance {:.1e}) {}", o.k, o.max_error, o.tolerance, if o.pass { "ok" } else { "FAIL" });
            }
            if let Some(out) = out {
                write(&out, &to_json(&v)?)?;
            }
            if !v.pass {
                return Err(Failure { code: EXIT_VERIFY, msg: "recovered jet does not match the truth".into() });
            }
        }
        Cmd::Invariants { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let r = scenario::invariants(&cfg).map_err(fail(EXIT_INVARIANTS))?;
            write(&out, &to_json(&r)?)?;
            let mut csv = String::from("r,kretschmann\n");
            for (x, k) in &r.samples {
                let _ = writeln!(csv, "{x:.12e},{k:.12e}");
            }
            write(&sibling(&out, "samples.csv"), &csv)?;
            if let Some(s) = r.slope {
                eprintln!("log-log slope {s:.5}, intercept {:.5}", r.intercept.unwrap_or(f64::NAN));
            }
            eprintln!("max |Ric| = {:.3e}", r.max_ricci);
            for (k, ray) in r.rays.iter().enumerate() {
                eprintln!("ray {k}: {ray:?}");
            }
        }
        Cmd::Probe { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let r = cfg.probe().map_err(fail(EXIT_FORWARD))?;
            eprintln!("{} of {} probes returned ({:.1}%)", r.returns, r.trials, 100.0 * r.fraction);
            if let Some(out) = out {
                write(&out, &to_json(&r)?)?;
            }
        }
        Cmd::DemoTorus { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let mut reports = Vec::new();
            let mut tables = Vec::new();
            for name in ["minkowski", "torus-minkowski"] {
                let mut c = cfg.clone();
                c.metric.name = name.to_string();
                let t = c.forward(None, FailurePolicy::Abort).map_err(fail(EXIT_FORWARD))?.blind();
                let text = t.to_json().map_err(fail(EXIT_DATA))?;
                write(&out.join(format!("{name}.table.json")), &text)?;
                let r = c.recover(&t).map_err(fail(EXIT_RECOVERY))?;
                let rtext = to_json(&r)?;
                write(&out.join(format!("{name}.jet.json")), &rtext)?;
                tables.push(text);
                reports.push(rtext);
            }
            let same_t = tables[0] == tables[1];
            let same_r = reports[0] == reports[1];
            eprintln!("tables identical: {same_t}; jet reports identical: {same_r}");
            if !(same_t && same_r) {
                return Err(Failure { code: EXIT_VERIFY, msg: "torus and Minkowski data differ".into() });
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}
