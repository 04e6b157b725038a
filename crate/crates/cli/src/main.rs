use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ara_core::autodiff::Tensor;
use ara_core::dataio::{load_csv, write_csv, AttributeCodebook, CsvMode, Dataset};
use ara_core::fedsim::{SnapshotStore, WindowName};
use ara_core::harness::{
    output_dir, prepare_run, read_rows_csv, run_attacks, run_grid, trend_report, Axis,
    ExperimentConfig, HarnessError, Knowledge, Method, PreparedRun, RunRecord,
};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

/// Federated learning simulator and attribute reconstruction attack lab.
#[derive(Parser)]
#[command(name = "ara", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one federation and save the victim's snapshots plus the data views
    /// the attacks need.
    Federate(FederateArgs),
    /// Attack a snapshot directory written by `federate`.
    Attack(AttackArgs),
    /// Run every grid point of a config, one result file pair per point.
    Grid(GridArgs),
    /// Summarize result CSVs along one axis.
    Report(ReportArgs),
}

#[derive(Args)]
struct FederateArgs {
    /// Experiment config (TOML) without grid axes.
    #[arg(long)]
    config: PathBuf,
    /// Snapshot directory to write.
    #[arg(long)]
    out: PathBuf,
    /// Repetition index; the run is seeded with `seed + repetition`.
    #[arg(long, default_value_t = 0)]
    repetition: usize,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AttackMethod {
    Cos,
    L2,
    Stats,
    Random,
    Public,
    /// Membership inference followed by cos matching on predicted members.
    Mia,
}

impl AttackMethod {
    fn name(self) -> &'static str {
        match self {
            AttackMethod::Cos => "cos",
            AttackMethod::L2 => "l2",
            AttackMethod::Stats => "stats",
            AttackMethod::Random => "random",
            AttackMethod::Public => "public",
            AttackMethod::Mia => "mia",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum KnowledgeArg {
    Known,
    Unknown,
}

impl From<KnowledgeArg> for Knowledge {
    fn from(k: KnowledgeArg) -> Self {
        match k {
            KnowledgeArg::Known => Knowledge::Known,
            KnowledgeArg::Unknown => Knowledge::Unknown,
        }
    }
}

#[derive(Args)]
struct AttackArgs {
    /// Directory written by `federate`.
    #[arg(long)]
    snapshots: PathBuf,
    #[arg(long, value_enum)]
    method: AttackMethod,
    /// pre1, pre2, pre5, gap10, last5 or all.
    #[arg(long, default_value = "pre5")]
    window: WindowName,
    /// Number of values the sensitive attribute takes. Checked against the
    /// snapshot directory.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_enum)]
    label: Option<KnowledgeArg>,
    #[arg(long, value_enum)]
    prior: Option<KnowledgeArg>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Result file. Defaults to `attack-<method>-<window>.json` in the
    /// output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Grid points run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory. Defaults to $ARA_OUTPUT_DIR, then `ara-output`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Markdown,
    Csv,
}

#[derive(Args)]
struct ReportArgs {
    /// Result CSVs written by `grid`.
    #[arg(long, required = true, num_args = 1..)]
    input: Vec<PathBuf>,
    /// window, batch, victim_size, hidden, isolate or participants.
    #[arg(long, default_value = "window")]
    axis: Axis,
    #[arg(long, value_enum, default_value_t = Format::Markdown)]
    format: Format,
    /// Write here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn config(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl Display) -> Self {
        Failure {
            code: 1,
            message: format!("{}: {e}", path.display()),
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        Failure {
            code: e.exit_code() as u8,
            message: e.to_string(),
        }
    }
}

const RUN_FILE: &str = "run.json";
const RUN_VERSION: u32 = 1;
const VICTIM_FILE: &str = "victim.csv";
const PUBLIC_FILE: &str = "public.csv";
const TEST_FILE: &str = "test.csv";

/// Everything in a snapshot directory besides the store itself.
#[derive(Serialize, Deserialize)]
struct RunMeta {
    version: u32,
    config: ExperimentConfig,
    repetition: usize,
    seed: u64,
    classes: usize,
    width: usize,
    sensitive_column: usize,
    attribute_values: Vec<f64>,
    rows: PartRows,
}

#[derive(Serialize, Deserialize)]
struct PartRows {
    victim: usize,
    public: usize,
    test: usize,
}

#[derive(Serialize)]
struct AttackReport<'a> {
    snapshots: String,
    method: &'a str,
    window: &'a str,
    k: usize,
    seed: u64,
    records: Vec<RunRecord>,
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
    ExperimentConfig::from_toml(&text)
        .map_err(|e| Failure::config(format!("{}: {e}", path.display())))
}

fn write_part(path: &Path, ds: &Dataset) -> Result<(), Failure> {
    let file = File::create(path).map_err(|e| Failure::io(path, e))?;
    write_csv(ds, io::BufWriter::new(file)).map_err(|e| Failure::io(path, e))
}

fn read_part(path: &Path, rows: usize, width: usize, classes: usize) -> Result<Dataset, Failure> {
    let bad = |e: &dyn Display| Failure::io(path, e);
    if rows == 0 {
        let x = Tensor::matrix(0, width, Vec::new()).map_err(|e| bad(&e))?;
        return Dataset::new(x, Vec::new(), classes).map_err(|e| bad(&e));
    }
    let ds = load_csv(path, CsvMode::Raw).map_err(|e| bad(&e))?;
    if ds.len() != rows || ds.width() != width {
        return Err(bad(&format!(
            "expected {rows} rows of {width} attributes, found {} of {}",
            ds.len(),
            ds.width()
        )));
    }
    Dataset::new(ds.x().clone(), ds.labels().to_vec(), classes).map_err(|e| bad(&e))
}

fn federate(args: FederateArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    let points = cfg.expand()?;
    let [point] = points.as_slice() else {
        return Err(Failure::config(format!(
            "federate needs a config without grid axes; this one has {} points",
            points.len()
        )));
    };
    let run = prepare_run(point, args.repetition)?;
    let dir = &args.out;
    run.store.save(dir).map_err(|e| Failure::io(dir, e))?;
    write_part(&dir.join(VICTIM_FILE), &run.victim)?;
    write_part(&dir.join(PUBLIC_FILE), &run.public)?;
    write_part(&dir.join(TEST_FILE), &run.test)?;
    let meta = RunMeta {
        version: RUN_VERSION,
        config: point.clone(),
        repetition: args.repetition,
        seed: run.seed,
        classes: run.victim.num_classes(),
        width: run.victim.width(),
        sensitive_column: run.codebook.column(),
        attribute_values: run.codebook.values().to_vec(),
        rows: PartRows {
            victim: run.victim.len(),
            public: run.public.len(),
            test: run.test.len(),
        },
    };
    let path = dir.join(RUN_FILE);
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Failure::io(&path, e))?;
    fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
    println!("{} rounds saved to {}", run.store.len(), dir.display());
    Ok(())
}

fn load_run(dir: &Path) -> Result<(RunMeta, PreparedRun), Failure> {
    let path = dir.join(RUN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Failure::io(&path, e))?;
    let meta: RunMeta = serde_json::from_str(&text).map_err(|e| Failure::io(&path, e))?;
    if meta.version != RUN_VERSION {
        return Err(Failure::io(&path, format!("unsupported version {}", meta.version)));
    }
    let store = SnapshotStore::load(dir).map_err(|e| Failure::io(dir, e))?;
    let codebook = AttributeCodebook::new(meta.sensitive_column, meta.attribute_values.clone())
        .map_err(|e| Failure::io(&path, e))?;
    let part = |name: &str, rows: usize| read_part(&dir.join(name), rows, meta.width, meta.classes);
    let run = PreparedRun {
        seed: meta.seed,
        codebook,
        store,
        victim: part(VICTIM_FILE, meta.rows.victim)?,
        public: part(PUBLIC_FILE, meta.rows.public)?,
        test: part(TEST_FILE, meta.rows.test)?,
    };
    Ok((meta, run))
}

fn attack(args: AttackArgs) -> Result<(), Failure> {
    let (meta, run) = load_run(&args.snapshots)?;
    if let Some(k) = args.k {
        if k != run.codebook.k() {
            return Err(Failure::config(format!(
                "--k {k} does not match the {} attribute values in {}",
                run.codebook.k(),
                args.snapshots.display()
            )));
        }
    }
    let mut cfg = meta.config;
    let a = &mut cfg.attack;
    a.windows = vec![args.window];
    a.membership = Knowledge::Known;
    a.methods = vec![match args.method {
        AttackMethod::Cos => Method::Cos,
        AttackMethod::L2 => Method::L2,
        AttackMethod::Stats => Method::Stats,
        AttackMethod::Random => Method::Random,
        AttackMethod::Public => Method::Public,
        AttackMethod::Mia => {
            a.membership = Knowledge::Unknown;
            Method::Cos
        }
    }];
    if let Some(l) = args.label {
        a.label = l.into();
    }
    if let Some(p) = args.prior {
        a.prior = p.into();
    }
    if let Some(i) = args.iterations {
        a.iterations = i;
    }
    if let Some(g) = args.gamma {
        a.gamma = g;
        a.gamma_grid = None;
    }
    cfg.validate()?;
    let records = run_attacks(&cfg, meta.repetition, &run)?;
    for r in &records {
        match r.mia_accuracy {
            Some(m) => println!("{} {}: accuracy {:.4}, membership accuracy {m:.4}", r.method, r.window, r.accuracy),
            None => println!("{} {}: accuracy {:.4}", r.method, r.window, r.accuracy),
        }
    }
    let report = AttackReport {
        snapshots: args.snapshots.display().to_string(),
        method: args.method.name(),
        window: args.window.as_str(),
        k: run.codebook.k(),
        seed: run.seed,
        records,
    };
    let path = args.out.unwrap_or_else(|| {
        output_dir().join(format!("attack-{}-{}.json", args.method.name(), args.window))
    });
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Failure::io(parent, e))?;
    }
    let text = serde_json::to_string_pretty(&report).map_err(|e| Failure::io(&path, e))?;
    fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn grid(args: GridArgs) -> Result<(), Failure> {
    let cfg = load_config(&args.config)?;
    if args.jobs == 0 {
        return Err(Failure::config("--jobs must be at least 1"));
    }
    let dir = args.out.unwrap_or_else(output_dir);
    let out = run_grid(&cfg, args.jobs, &dir)?;
    for c in &out.configs {
        println!("{}", dir.join(format!("{}.csv", c.name)).display());
    }
    Ok(())
}

fn report(args: ReportArgs) -> Result<(), Failure> {
    let mut rows = Vec::new();
    for path in &args.input {
        let file = File::open(path).map_err(|e| Failure::io(path, e))?;
        rows.extend(read_rows_csv(file).map_err(|e| Failure::io(path, e))?);
    }
    let rep = trend_report(&rows, args.axis);
    let text = match args.format {
        Format::Markdown => rep.markdown,
        Format::Csv => rep.csv,
    };
    match &args.out {
        Some(path) => fs::write(path, text).map_err(|e| Failure::io(path, e)),
        None => io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| Failure::io(Path::new("stdout"), e)),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Federate(a) => federate(a),
        Command::Attack(a) => attack(a),
        Command::Grid(a) => grid(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
