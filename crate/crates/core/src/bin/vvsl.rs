use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use vvsl::experiments::{canned, run, run_suite, worker_cap, Experiment, ExperimentConfig, FamilyConfig, CANNED};
use vvsl::graph::{build_graph, edges_csv, graph_from_csv, vertices_csv, PrefractalGraph};
use vvsl::heat::HeatKernel;
use vvsl::ifs::FamilySpec;
use vvsl::measures::WeightSystem;
use vvsl::pressure::{estimate_gamma, solve_dimension, McParams, PressureKind, EXACT_TOL, STAT_TOL};
use vvsl::spectral::{parse_sweep, phi, spectral_slope, BoundaryCondition, EigenProblem, FitWindow};
use vvsl::vtree::VTree;
use vvsl::Error;

#[derive(Parser)]
#[command(name = "vvsl", version, about = "Dimensions, spectra and heat kernels of V-variable Sierpinski gaskets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Hausdorff, resistance and spectral dimensions.
    Dims(ExpArgs),
    /// d_s(flat)/2 against d_f^r/(d_f^r + 1).
    FlatIdentity(ExpArgs),
    /// Perturbed weight systems against the flat measure.
    Maximality(ExpArgs),
    /// Dirichlet-Neumann bracketing on cut graphs.
    Bracketing(ExpArgs),
    /// Cut-set sizes against the counting function.
    NeckScale(ExpArgs),
    /// Counting-function fluctuations.
    Fluctuations(ExpArgs),
    /// Heat-kernel experiment with --config, or p_t(x,x) on a graph file.
    Heat(HeatArgs),
    /// Mean exit times and walk simulation.
    ExitTimes(ExpArgs),
    /// Neck frequency and gap statistics.
    NeckStats(ExpArgs),
    /// Several experiments on one config, in parallel.
    Suite(SuiteArgs),
    /// Pressure function value or root.
    Pressure(PressureArgs),
    /// Eigenvalue counts by matrix inertia on a graph file.
    Count(CountArgs),
    /// Writes the prefractal graph of a sampled tree as two CSV files.
    Graph(GraphArgs),
}

#[derive(Args, Clone)]
struct ExpArgs {
    /// TOML config file.
    #[arg(long, conflicts_with = "canned")]
    config: Option<PathBuf>,
    /// Bundled config name.
    #[arg(long)]
    canned: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SuiteArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Comma-separated experiment names; all when omitted.
    #[arg(long, value_delimiter = ',')]
    experiments: Vec<String>,
}

#[derive(Args)]
struct HeatArgs {
    #[command(flatten)]
    exp: ExpArgs,
    /// Graph stem (`<stem>.vertices.csv`, `<stem>.edges.csv`) or vertex CSV.
    #[arg(long, conflicts_with_all = ["config", "canned"])]
    graph: Option<PathBuf>,
    #[arg(long, default_value = "neumann")]
    bc: BoundaryCondition,
    #[arg(long)]
    x: Option<usize>,
    /// `lo:hi:n`, with a `log` suffix for log spacing.
    #[arg(long)]
    t: Option<String>,
    /// Exponent in the normalization `p t^{d_s/2}`; fitted from the counting
    /// function when omitted.
    #[arg(long)]
    ds: Option<f64>,
}

#[derive(Args)]
struct PressureArgs {
    /// hausdorff, resistance or spectral.
    #[arg(long)]
    kind: String,
    /// Catalog file or preset (sg2, sg3, model1, model2).
    #[arg(long)]
    family: String,
    #[arg(long = "V", alias = "v")]
    v: usize,
    #[arg(long, conflicts_with_all = ["beta", "solve"])]
    alpha: Option<f64>,
    #[arg(long, conflicts_with = "solve")]
    beta: Option<f64>,
    #[arg(long)]
    solve: bool,
    /// unit, conductance or flat:<d_f^r>, for the spectral kind.
    #[arg(long, default_value = "unit")]
    weights: String,
    #[arg(long, default_value_t = 200)]
    segments: usize,
    #[arg(long, default_value_t = 64)]
    replicas: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct CountArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value = "dirichlet")]
    bc: BoundaryCondition,
    #[arg(long, conflicts_with = "sweep", required_unless_present = "sweep")]
    lambda: Option<f64>,
    /// `lo:hi:n`, with a `log` suffix for log spacing.
    #[arg(long)]
    sweep: Option<String>,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GraphArgs {
    #[arg(long)]
    family: String,
    #[arg(long = "V", alias = "v", default_value_t = 1)]
    v: usize,
    #[arg(long)]
    depth: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "unit")]
    weights: String,
    /// Output stem.
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Config(String),
    Run(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Parse(_) => Failure::Config(e.to_string()),
            _ => Failure::Run(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Run(e.to_string())
    }
}

type Outcome = std::result::Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    #[cfg(feature = "parallel")]
    if let Some(n) = worker_cap() {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    let _ = worker_cap();
    let outcome = match cli.command {
        Command::Dims(a) => experiment(Experiment::Dims, &a),
        Command::FlatIdentity(a) => experiment(Experiment::FlatIdentity, &a),
        Command::Maximality(a) => experiment(Experiment::Maximality, &a),
        Command::Bracketing(a) => experiment(Experiment::Bracketing, &a),
        Command::NeckScale(a) => experiment(Experiment::NeckScale, &a),
        Command::Fluctuations(a) => experiment(Experiment::Fluctuations, &a),
        Command::ExitTimes(a) => experiment(Experiment::ExitTimes, &a),
        Command::NeckStats(a) => experiment(Experiment::NeckStats, &a),
        Command::Heat(a) => heat(&a),
        Command::Suite(a) => suite(&a),
        Command::Pressure(a) => pressure(&a),
        Command::Count(a) => count(&a),
        Command::Graph(a) => graph(&a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Config(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn load_config(a: &ExpArgs) -> std::result::Result<ExperimentConfig, Failure> {
    let mut cfg = match (&a.config, &a.canned) {
        (Some(path), None) => ExperimentConfig::load(path)?,
        (None, Some(name)) => canned(name)?,
        _ => return Err(Failure::Config(format!("pass --config <file> or --canned <name> ({})", CANNED.join(", ")))),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn experiment(which: Experiment, a: &ExpArgs) -> Outcome {
    let mut cfg = load_config(a)?;
    match cfg.experiment {
        Some(e) if e != which => {
            return Err(Failure::Config(format!("config is for {}, not {}", e.name(), which.name())));
        }
        _ => cfg.experiment = Some(which),
    }
    let report = run(&cfg)?;
    print!("{}", report.to_text());
    Ok(report.exit_code() as u8)
}

fn suite(a: &SuiteArgs) -> Outcome {
    let mut cfg = load_config(&a.exp)?;
    cfg.experiment = None;
    let list: Vec<Experiment> = if a.experiments.is_empty() {
        Experiment::ALL.to_vec()
    } else {
        a.experiments.iter().map(|s| s.parse()).collect::<vvsl::Result<_>>()?
    };
    let mut code = 0;
    for (e, r) in list.iter().zip(run_suite(&cfg, &list)?) {
        match r {
            Ok(report) => {
                print!("{}", report.to_text());
                code = code.max(report.exit_code() as u8);
            }
            Err(err) => {
                println!("experiment {}: error: {err}", e.name());
                code = code.max(1);
            }
        }
    }
    Ok(code)
}

fn family_arg(s: &str) -> std::result::Result<Arc<FamilySpec>, Failure> {
    let fc = if Path::new(s).is_file() {
        FamilyConfig { file: Some(s.into()), ..Default::default() }
    } else {
        FamilyConfig { preset: Some(s.into()), ..Default::default() }
    };
    let cfg = ExperimentConfig {
        experiment: None,
        family: fc,
        v: 1,
        weights: Default::default(),
        weights_file: None,
        mc: Default::default(),
        caps: Default::default(),
        seed: 0,
        out: PathBuf::new(),
    };
    cfg.validate()?;
    Ok(cfg.family()?)
}

fn weights_arg(s: &str) -> std::result::Result<WeightSystem, Failure> {
    match s {
        "unit" => Ok(WeightSystem::Unit),
        "conductance" => Ok(WeightSystem::Conductance),
        _ => match s.strip_prefix("flat:").map(str::parse::<f64>) {
            Some(Ok(a)) => Ok(WeightSystem::flat(a)),
            _ => Err(Failure::Config(format!("weights {s:?}: expected unit, conductance or flat:<d_f^r>"))),
        },
    }
}

fn pressure(a: &PressureArgs) -> Outcome {
    let family = family_arg(&a.family)?;
    let kind = match a.kind.as_str() {
        "hausdorff" => PressureKind::Hausdorff,
        "resistance" => PressureKind::Resistance,
        "spectral" => PressureKind::Spectral(weights_arg(&a.weights)?),
        k => return Err(Failure::Config(format!("unknown kind {k:?}: hausdorff, resistance or spectral"))),
    };
    let mc = McParams { segments: a.segments, replicas: a.replicas, seed: a.seed };
    let doc = if a.solve {
        let tol = if family.len() == 1 { EXACT_TOL } else { STAT_TOL };
        let d = solve_dimension(&kind, family, a.v, mc, tol)?;
        serde_json::json!({ "value": null, "se": d.se, "root": d.root, "bracket": d.bracket, "ci": d.ci })
    } else {
        let x = a.alpha.or(a.beta).ok_or_else(|| Failure::Config("pass --alpha, --beta or --solve".into()))?;
        let e = estimate_gamma(&kind, x, family, a.v, mc)?;
        serde_json::json!({ "value": e.value, "se": e.std_error, "root": null, "bracket": null, "ci": null })
    };
    println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    Ok(0)
}

fn read_graph(p: &Path) -> std::result::Result<PrefractalGraph, Failure> {
    let s = p.to_string_lossy();
    let (vpath, epath) = match s.strip_suffix(".vertices.csv") {
        Some(stem) => (p.to_path_buf(), PathBuf::from(format!("{stem}.edges.csv"))),
        None => (PathBuf::from(format!("{s}.vertices.csv")), PathBuf::from(format!("{s}.edges.csv"))),
    };
    let read = |q: &Path| std::fs::read_to_string(q).map_err(|e| Failure::Config(format!("{}: {e}", q.display())));
    Ok(graph_from_csv(&read(&vpath)?, &read(&epath)?)?)
}

fn emit(out: &Option<PathBuf>, body: &str) -> std::result::Result<(), Failure> {
    match out {
        Some(p) => std::fs::write(p, body)?,
        None => std::io::stdout().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn count(a: &CountArgs) -> Outcome {
    let g = read_graph(&a.graph)?;
    let p = EigenProblem::new(&g, a.bc)?;
    let lambdas = match (&a.lambda, &a.sweep) {
        (Some(l), _) => vec![*l],
        (None, Some(s)) => parse_sweep(s).map_err(|e| Failure::Config(e.to_string()))?,
        (None, None) => return Err(Failure::Config("pass --lambda or --sweep".into())),
    };
    let mut body = String::from("lambda,count_lo,count_hi\n");
    for c in p.sweep(&lambdas)? {
        body.push_str(&format!("{:.12e},{},{}\n", c.lambda, c.count_lo, c.count_hi));
    }
    emit(&a.out, &body)?;
    Ok(0)
}

fn heat(a: &HeatArgs) -> Outcome {
    let Some(gpath) = &a.graph else {
        return experiment(Experiment::Heat, &a.exp);
    };
    let g = read_graph(gpath)?;
    let x = a.x.ok_or_else(|| Failure::Config("--x is required with --graph".into()))?;
    let ts = parse_sweep(a.t.as_deref().ok_or_else(|| Failure::Config("--t is required with --graph".into()))?)
        .map_err(|e| Failure::Config(e.to_string()))?;
    let ds = match a.ds {
        Some(d) => d,
        None => 2.0 * spectral_slope(&EigenProblem::new(&g, a.bc)?, FitWindow::default())?.slope,
    };
    let hk = HeatKernel::new(&g, a.bc)?;
    let mut body = String::from("t,p,normalized,phi\n");
    for t in ts {
        let p = hk.diag(x, t)?;
        let ph = if t > 0.0 { phi(1.0 / t) } else { None };
        let ph = ph.map_or("nan".to_string(), |v| format!("{v:.12e}"));
        body.push_str(&format!("{t:.12e},{p:.12e},{:.12e},{ph}\n", p * t.powf(ds / 2.0)));
    }
    emit(&a.exp.out, &body)?;
    Ok(0)
}

fn graph(a: &GraphArgs) -> Outcome {
    let family = family_arg(&a.family)?;
    let w = weights_arg(&a.weights)?;
    let mut tree = VTree::new(family, a.v, a.seed)?;
    let g = build_graph(&mut tree, a.depth, &w)?;
    let s = a.out.to_string_lossy();
    std::fs::write(format!("{s}.vertices.csv"), vertices_csv(&g))?;
    std::fs::write(format!("{s}.edges.csv"), edges_csv(&g))?;
    println!("{} vertices, {} edges", g.num_vertices, g.edges.len());
    Ok(0)
}
