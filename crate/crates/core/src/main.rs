use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use tracegrad::block::Mode;
use tracegrad::data::{
    block_type_variance, generate_splits, read_dataset, sample_geometry, write_dataset, DatasetRecord, OracleParams,
    SizeRange, Split, SplitPlan, DEFAULT_CUTOFF, DEFAULT_SCALE,
};
use tracegrad::model::{AtomicSystem, Checkpoint, Model, ModelConfig, PairBlockSet};
use tracegrad::train::{
    checkpoint_metadata, evaluate, evaluate_predictions, lambda_sweep, make_selection, prepare_samples, run_ablation,
    train, AblationRow, Arm, MetricReport, Selection, TrainConfig, TrainState, CHALLENGING_FRACTION,
};
use tracegrad::verify::{cg_suite, data_suite, grad_suite, so3_suite, CheckOptions, Fault, PropertyResult};
use tracegrad::Error;

/// Default dataset file name inside the data directory.
const DATASET_NAME: &str = "dataset.jsonl";

#[derive(Parser, Debug)]
#[command(name = "tracegrad", version, about = "Trace-supervised equivariant Hamiltonian regression")]
struct Cli {
    /// TOML run configuration with `[model]`, `[train]`, `[data]` and `[ablation]` tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed of the command's randomness; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; 1 gives bitwise reproducible runs.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output file of the command.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Default directory for dataset files.
    #[arg(long, global = true, env = "TRACEGRAD_DATA_DIR")]
    data_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labelled synthetic dataset.
    GenData(GenArgs),
    /// Train a model on the train split of a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint, or the oracle itself, on a dataset.
    Eval(EvalArgs),
    /// Run the randomised property suites.
    Check(CheckArgs),
    /// Train and compare the six ablation arms, or sweep λ.
    Ablate(AblateArgs),
    /// Time inference against system size and fit a line.
    BenchScaling(BenchArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Training systems.
    #[arg(long, default_value_t = 64)]
    count: usize,
    /// Atom counts `min:max` of the training systems.
    #[arg(long, default_value = "4:14")]
    sizes: SizeRange,
    #[arg(long, default_value_t = 0)]
    val: usize,
    /// Sizes of validation systems; defaults to `--sizes`.
    #[arg(long)]
    val_sizes: Option<SizeRange>,
    #[arg(long, default_value_t = 0)]
    test: usize,
    /// Sizes of test systems; defaults to `--sizes`.
    #[arg(long)]
    test_sizes: Option<SizeRange>,
    /// Require pairwise disjoint split sizes.
    #[arg(long)]
    ood: bool,
    /// Seed of the oracle coefficients; defaults to `--seed`.
    #[arg(long)]
    oracle_seed: Option<u64>,
    #[arg(long, default_value_t = DEFAULT_CUTOFF)]
    cutoff: f64,
    /// Energy unit of the oracle in meV.
    #[arg(long, default_value_t = DEFAULT_SCALE)]
    scale: f64,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset file; defaults to the data directory's dataset.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    /// Trace weight; the trace head is built exactly when it is positive.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Continue the run stored in this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score the stored labels as predictions.
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Stored challenging-sample selection used for `mae_cha_s`.
    #[arg(long)]
    selection: Option<PathBuf>,
    /// Store this model's worst samples as the selection.
    #[arg(long)]
    save_selection: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum FaultArg {
    TransposedWigner,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[arg(long)]
    so3: bool,
    #[arg(long)]
    grad: bool,
    #[arg(long)]
    cg: bool,
    #[arg(long)]
    data: bool,
    #[arg(long)]
    all: bool,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Dataset file validated by the data suite.
    #[arg(long)]
    data_file: Option<PathBuf>,
    /// Inject a known defect; the affected suite must fail.
    #[arg(long, value_enum, hide = true)]
    inject: Option<FaultArg>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Trace weight of the trace-supervised arms.
    #[arg(long)]
    lambda: Option<f64>,
    /// Comma-separated arms; defaults to all six.
    #[arg(long, value_delimiter = ',')]
    arms: Option<Vec<Arm>>,
    /// Comma-separated training seeds; defaults to `--seed`.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    selection: Option<PathBuf>,
    #[arg(long)]
    save_selection: Option<PathBuf>,
    /// Sweep λ over 0.1, 0.2, …, 1.0 on the validation split instead.
    #[arg(long)]
    sweep: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Comma-separated atom counts.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64,128")]
    sizes: Vec<usize>,
    /// Timed runs per size; the median is kept.
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Systems per size.
    #[arg(long, default_value_t = 3)]
    systems: usize,
    /// Required coefficient of determination of the linear fit.
    #[arg(long, default_value_t = 0.95)]
    min_r2: f64,
}

/// Contents of a `--config` file.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    data: DataConfig,
    ablation: AblationConfig,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DataConfig {
    dataset: Option<PathBuf>,
    selection: Option<PathBuf>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AblationConfig {
    lambda_star: f64,
    seeds: Vec<u64>,
    arms: Vec<Arm>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            lambda_star: 0.3,
            seeds: Vec::new(),
            arms: Arm::ALL.to_vec(),
        }
    }
}

/// A failed command and its exit status.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Divergence { .. } | Error::NonFinite { .. } | Error::Generation(_) => 3,
            _ => 2,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        message: message.into(),
    }
}

type CmdResult = std::result::Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> CmdResult {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    let config = match &cli.config {
        Some(p) => load_config(p)?,
        None => RunConfig::default(),
    };
    let ctx = Context { cli: &cli, config };
    match &cli.command {
        Command::GenData(a) => gen_data(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Check(a) => cmd_check(&ctx, a),
        Command::Ablate(a) => cmd_ablate(&ctx, a),
        Command::BenchScaling(a) => cmd_bench(&ctx, a),
    }
}

fn load_config(path: &Path) -> std::result::Result<RunConfig, Failure> {
    let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

struct Context<'a> {
    cli: &'a Cli,
    config: RunConfig,
}

impl Context<'_> {
    /// Dataset path: flag, then configuration, then the data directory.
    fn dataset(&self, flag: &Option<PathBuf>) -> std::result::Result<PathBuf, Failure> {
        if let Some(p) = flag.clone().or_else(|| self.config.data.dataset.clone()) {
            return Ok(p);
        }
        match &self.cli.data_dir {
            Some(d) => Ok(d.join(DATASET_NAME)),
            None => Err(usage("no dataset given: use --data, [data] dataset or TRACEGRAD_DATA_DIR")),
        }
    }

    fn existing_dataset(&self, flag: &Option<PathBuf>) -> std::result::Result<PathBuf, Failure> {
        let p = self.dataset(flag)?;
        if !p.is_file() {
            return Err(usage(format!("dataset {} does not exist", p.display())));
        }
        Ok(p)
    }

    fn out(&self) -> std::result::Result<Option<PathBuf>, Failure> {
        match &self.cli.out {
            Some(p) => {
                writable(p)?;
                Ok(Some(p.clone()))
            }
            None => Ok(None),
        }
    }
}

/// Fails early when `path` cannot be created.
fn writable(path: &Path) -> CmdResult {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    if !parent.is_dir() {
        return Err(usage(format!("cannot write {}: {} is not a directory", path.display(), parent.display())));
    }
    if path.is_dir() {
        return Err(usage(format!("cannot write {}: it is a directory", path.display())));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CmdResult {
    let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn gen_data(ctx: &Context, a: &GenArgs) -> CmdResult {
    let out = match ctx.out()? {
        Some(p) => p,
        None => ctx.dataset(&None)?,
    };
    writable(&out)?;
    let seed = ctx.cli.seed.unwrap_or(0);
    let plan = SplitPlan {
        train: (a.count, a.sizes),
        val: (a.val, a.val_sizes.unwrap_or(a.sizes)),
        test: (a.test, a.test_sizes.unwrap_or(a.sizes)),
    };
    let plan = if a.ood { SplitPlan::ood(plan.train, plan.val, plan.test)? } else { plan };
    let oracle_seed = a.oracle_seed.unwrap_or(seed);
    let basis = ctx.config.model.basis.clone();
    let oracle = OracleParams::new(basis.clone(), oracle_seed, a.scale)?;
    let records = generate_splits(&oracle, &plan, a.cutoff, seed)?;
    let header = write_dataset(&out, &basis, a.cutoff, oracle_seed, a.scale, &records)?;
    println!("wrote {} ({} records, checksum {})", out.display(), header.records, header.checksum);
    print!("{}", dataset_summary(&records));
    Ok(())
}

fn dataset_summary(records: &[DatasetRecord]) -> String {
    let mut s = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let rs: Vec<&DatasetRecord> = records.iter().filter(|r| r.split == split).collect();
        if rs.is_empty() {
            continue;
        }
        let atoms: Vec<usize> = rs.iter().map(|r| r.system.len()).collect();
        let blocks: usize = rs.iter().map(|r| r.blocks.len()).sum();
        let (sum, n) = rs
            .iter()
            .flat_map(|r| r.blocks.values())
            .flat_map(|b| b.data())
            .fold((0.0, 0usize), |(s, n), x| (s + x.abs(), n + 1));
        let _ = writeln!(
            s,
            "{split:<5} systems {:>4}  atoms {}..{} (mean {:.2})  blocks {:>6}  mean |H| {:.4} meV",
            rs.len(),
            atoms.iter().min().unwrap(),
            atoms.iter().max().unwrap(),
            atoms.iter().sum::<usize>() as f64 / rs.len() as f64,
            blocks,
            sum / n.max(1) as f64
        );
    }
    let var = block_type_variance(records);
    let _ = writeln!(s, "block entry variance by (s_i, s_j, p, q):");
    for ((si, sj, p, q), v) in var {
        let _ = writeln!(s, "  ({si},{sj},{p},{q}) {v:.4}");
    }
    s
}

fn split_of(records: &[DatasetRecord], s: Split) -> Vec<DatasetRecord> {
    records.iter().filter(|r| r.split == s).cloned().collect()
}

/// Model settings forced by the dataset.
fn fit_to_data(mut m: ModelConfig, header: &tracegrad::data::DatasetHeader) -> ModelConfig {
    m.basis = header.basis.clone();
    m.cutoff = header.cutoff;
    m
}

fn epoch_line(e: &tracegrad::train::EpochLog) -> String {
    format!(
        "epoch {:>4}  loss_H {:.6e}  loss_T {:.6e}  mu {:.6e}  total {:.6e}  val_mae_all {}  lr {:.3e}",
        e.epoch,
        e.loss_h,
        e.loss_t,
        e.mu,
        e.total,
        e.val_mae_all.map_or("-".into(), |v| format!("{v:.6e}")),
        e.lr
    )
}

fn append(path: &Path, text: &str) -> CmdResult {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::from(Error::Io {
            path: path.to_path_buf(),
            source: e,
        }))?;
    f.write_all(text.as_bytes()).map_err(|e| Failure::from(Error::Io {
        path: path.to_path_buf(),
        source: e,
    }))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(ctx: &Context, a: &TrainArgs) -> CmdResult {
    let data = ctx.existing_dataset(&a.data)?;
    let out = ctx.out()?.unwrap_or_else(|| PathBuf::from("model.ckpt.json"));
    writable(&out)?;
    let (header, records) = read_dataset(&data)?;

    let (mut model, mut tc, resume) = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let tc: TrainConfig = ck
                .metadata
                .get("train_config")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| usage(format!("{} has no training configuration", p.display())))?;
            let state: TrainState = ck
                .metadata
                .get("state")
                .and_then(|v| serde_json::from_value(v.clone()).ok())
                .ok_or_else(|| usage(format!("{} has no training state", p.display())))?;
            if a.mode.is_some() || a.lambda.is_some() || a.lr.is_some() || a.batch.is_some() {
                return Err(usage("a resumed run keeps its mode, lambda, lr and batch; only --epochs may change"));
            }
            (ck.to_model()?, tc, Some(state))
        }
        None => {
            let mut tc = ctx.config.train.clone();
            if let Some(s) = ctx.cli.seed {
                tc.seed = s;
            }
            if let Some(l) = a.lambda {
                tc.lambda = l;
            }
            if let Some(lr) = a.lr {
                tc.lr = lr;
            }
            if let Some(b) = a.batch {
                tc.batch = b;
            }
            tc.validate()?;
            let mut mc = fit_to_data(ctx.config.model.clone(), &header);
            if let Some(m) = a.mode {
                mc.mode = m;
            }
            mc.trace_head = tc.lambda > 0.0;
            (Model::new(mc, tc.seed)?, tc, None)
        }
    };
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if model.config().cutoff != header.cutoff || model.config().basis != header.basis {
        return Err(usage("checkpoint and dataset disagree on basis or cutoff"));
    }
    let tr = split_of(&records, Split::Train);
    let va = split_of(&records, Split::Val);
    if tr.is_empty() {
        return Err(usage(format!("{} has no training records", data.display())));
    }
    let ts = prepare_samples(&model, &tr)?;
    let vs = prepare_samples(&model, &va)?;

    let log = with_suffix(&out, ".log");
    let sidecar = with_suffix(&out, ".log.jsonl");
    append(
        &log,
        &format!(
            "# run data={} mode={} lambda={} seed={} epochs={} start={}\n",
            data.display(),
            model.config().mode,
            tc.lambda,
            tc.seed,
            tc.epochs,
            resume.as_ref().map_or(0, |s| s.epoch)
        ),
    )?;
    let mut io_error = None;
    let report = train(&mut model, &ts, &vs, &tc, resume, |e| {
        let line = epoch_line(e);
        println!("{line}");
        let json = serde_json::to_string(e).expect("log entry serialises");
        if let Err(f) = append(&log, &(line + "\n")).and_then(|_| append(&sidecar, &(json + "\n"))) {
            io_error.get_or_insert(f);
        }
    });
    if let Some(f) = io_error {
        return Err(f);
    }
    let report = report.map_err(|e| {
        let _ = append(&log, &format!("# aborted: {e}\n"));
        Failure::from(e)
    })?;
    let mut meta = checkpoint_metadata(&tc, &report);
    meta.insert("state".into(), serde_json::to_value(&report.state).expect("state serialises"));
    meta.insert("dataset".into(), serde_json::json!(data.display().to_string()));
    Checkpoint::from_model(&model, tc.seed, meta).save(&out)?;
    println!(
        "initial loss_H {:.6e}; best epoch {} (val mae_all {}); wrote {}",
        report.initial.loss_h,
        report.state.best_epoch,
        report.state.best_val.map_or("-".into(), |v| format!("{v:.6e}")),
        out.display()
    );
    Ok(())
}

/// One row of a machine-readable metric report.
#[derive(Serialize)]
struct MetricRow {
    arm: String,
    seed: Option<u64>,
    metric: String,
    value: f64,
}

fn metric_rows(arm: &str, seed: Option<u64>, r: &MetricReport) -> Vec<MetricRow> {
    let mut rows = vec![
        ("mae_all".to_string(), r.mae_all),
        ("mae_cha_b".to_string(), r.mae_cha_b),
        ("mae_eps".to_string(), r.mae_eps),
        ("sim_psi".to_string(), r.sim_psi),
    ];
    if let Some(v) = r.mae_cha_s {
        rows.push(("mae_cha_s".into(), v));
    }
    for b in &r.mae_block {
        rows.push((format!("mae_block_{}{}", b.lp, b.lq), b.mae));
    }
    rows.into_iter()
        .map(|(metric, value)| MetricRow {
            arm: arm.to_string(),
            seed,
            metric,
            value,
        })
        .collect()
}

fn report_table(r: &MetricReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "mae_all    {:.6e} meV", r.mae_all);
    let _ = writeln!(s, "mae_cha_s  {}", r.mae_cha_s.map_or("- (no selection)".into(), |v| format!("{v:.6e} meV")));
    let _ = writeln!(s, "mae_cha_b  {:.6e} meV", r.mae_cha_b);
    let _ = writeln!(s, "mae_eps    {:.6e} meV", r.mae_eps);
    let _ = writeln!(s, "sim_psi    {:.9}", r.sim_psi);
    let _ = writeln!(s, "mae_block (rows l_p, columns l_q; meV):");
    s.push_str(&r.block_matrix());
    s
}

fn cmd_eval(ctx: &Context, a: &EvalArgs) -> CmdResult {
    let data = ctx.existing_dataset(&a.data)?;
    let out = ctx.out()?;
    if let Some(p) = &a.save_selection {
        writable(p)?;
    }
    let selection = match a.selection.clone().or_else(|| ctx.config.data.selection.clone()) {
        Some(p) => Some(Selection::load(&p)?),
        None => None,
    };
    let model = match (&a.checkpoint, a.oracle) {
        (Some(p), false) => Some(Checkpoint::load(p)?.to_model()?),
        (None, true) => None,
        _ => return Err(usage("give exactly one of --checkpoint or --oracle")),
    };
    let (header, records) = read_dataset(&data)?;
    let records: Vec<DatasetRecord> = match a.split {
        SplitArg::Train => split_of(&records, Split::Train),
        SplitArg::Val => split_of(&records, Split::Val),
        SplitArg::Test => split_of(&records, Split::Test),
        SplitArg::All => records,
    };
    if records.is_empty() {
        return Err(usage(format!("{} has no records in the requested split", data.display())));
    }
    let (label, report) = match &model {
        Some(m) => {
            if m.config().cutoff != header.cutoff || m.config().basis != header.basis {
                return Err(usage("checkpoint and dataset disagree on basis or cutoff"));
            }
            ("model", evaluate(m, &records, selection.as_ref())?)
        }
        None => {
            let preds: Vec<PairBlockSet> = records.iter().map(|r| r.blocks.clone()).collect();
            ("oracle", evaluate_predictions(&header.basis, &records, &preds, selection.as_ref())?)
        }
    };
    print!("{}", report_table(&report));
    if let Some(p) = &a.save_selection {
        let sel = make_selection(&report.per_sample, CHALLENGING_FRACTION);
        sel.save(p)?;
        println!("stored {} challenging samples in {}", sel.indices.len(), p.display());
    }
    if let Some(p) = out {
        write_json(&p, &metric_rows(label, None, &report))?;
    }
    Ok(())
}

fn cmd_check(ctx: &Context, a: &CheckArgs) -> CmdResult {
    let out = ctx.out()?;
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let none = !(a.so3 || a.grad || a.cg || a.data);
    let all = a.all || none;
    let opts = CheckOptions {
        seed: ctx.cli.seed.unwrap_or(0),
        trials: a.trials,
        fault: a.inject.map(|f| match f {
            FaultArg::TransposedWigner => Fault::TransposedWigner,
        }),
    };
    let mut rows: Vec<PropertyResult> = Vec::new();
    if all || a.so3 {
        rows.extend(so3_suite(&opts)?);
    }
    if all || a.cg {
        rows.extend(cg_suite(&opts)?);
    }
    if all || a.grad {
        rows.extend(grad_suite(&opts)?);
    }
    if all || a.data {
        rows.extend(data_suite(&opts, a.data_file.as_deref())?);
    }
    for r in &rows {
        println!("{r}");
    }
    if let Some(p) = out {
        #[derive(Serialize)]
        struct Row<'a> {
            suite: &'a str,
            property: &'a str,
            worst: f64,
            tol: f64,
            passed: bool,
        }
        let json: Vec<Row> = rows
            .iter()
            .map(|r| Row {
                suite: r.suite,
                property: r.name,
                worst: r.worst,
                tol: r.tol,
                passed: r.passed(),
            })
            .collect();
        write_json(&p, &json)?;
    }
    let failed: Vec<String> = rows.iter().filter(|r| !r.passed()).map(|r| format!("{}/{}", r.suite, r.name)).collect();
    if failed.is_empty() {
        println!("all {} properties hold", rows.len());
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: format!("violated: {}", failed.join(", ")),
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn cmd_ablate(ctx: &Context, a: &AblateArgs) -> CmdResult {
    let data = ctx.existing_dataset(&a.data)?;
    let out = ctx.out()?;
    if let Some(p) = &a.save_selection {
        writable(p)?;
    }
    let cfg = &ctx.config;
    let lambda_star = a.lambda.unwrap_or(cfg.ablation.lambda_star);
    let seeds = a
        .seeds
        .clone()
        .or_else(|| ctx.cli.seed.map(|s| vec![s]))
        .or_else(|| (!cfg.ablation.seeds.is_empty()).then(|| cfg.ablation.seeds.clone()))
        .unwrap_or_else(|| vec![cfg.train.seed]);
    let arms = a.arms.clone().unwrap_or_else(|| cfg.ablation.arms.clone());
    let selection = match a.selection.clone().or_else(|| cfg.data.selection.clone()) {
        Some(p) => Some(Selection::load(&p)?),
        None => None,
    };
    if selection.is_none() && !a.sweep && !arms.contains(&Arm::Baseline) {
        return Err(usage("without --selection the baseline arm must be run"));
    }
    let (header, records) = read_dataset(&data)?;
    let mc = fit_to_data(cfg.model.clone(), &header);
    let mut tc = cfg.train.clone();
    if let Some(e) = a.epochs {
        tc.epochs = e;
    }
    if !(lambda_star > 0.0 && lambda_star <= 1.0) {
        return Err(usage(format!("λ* must lie in (0, 1], got {lambda_star}")));
    }

    if a.sweep {
        let grid: Vec<f64> = (1..=10).map(|k| k as f64 / 10.0).collect();
        let mut rows = Vec::new();
        for &seed in &seeds {
            let t = TrainConfig { seed, ..tc.clone() };
            for p in lambda_sweep(&records, &mc, &t, &grid)? {
                println!("seed {seed}  lambda {:.1}  val mae_all {:.6e}", p.lambda, p.val_mae_all);
                rows.push(MetricRow {
                    arm: format!("lambda={:.1}", p.lambda),
                    seed: Some(seed),
                    metric: "val_mae_all".into(),
                    value: p.val_mae_all,
                });
            }
        }
        if let Some(p) = out {
            write_json(&p, &rows)?;
        }
        return Ok(());
    }

    let mut all_rows: Vec<AblationRow> = Vec::new();
    for &seed in &seeds {
        let t = TrainConfig { seed, ..tc.clone() };
        let started = Instant::now();
        let (rows, sel) = run_ablation(&records, &mc, &t, lambda_star, &arms, selection.as_ref(), |arm, e| {
            if e.epoch % 50 == 0 || e.epoch == t.epochs {
                eprintln!("[seed {seed} {arm}] {}", epoch_line(e));
            }
        })?;
        eprintln!("seed {seed} finished in {:.1} s", started.elapsed().as_secs_f64());
        if let (Some(p), Some(sel)) = (&a.save_selection, &sel) {
            let p = if seeds.len() > 1 { with_suffix(p, &format!(".seed{seed}")) } else { p.clone() };
            sel.save(&p)?;
        }
        all_rows.extend(rows);
    }
    print!("{}", ablation_table(&all_rows));
    if let Some(p) = out {
        let rows: Vec<MetricRow> = all_rows
            .iter()
            .flat_map(|r| metric_rows(&r.arm.to_string(), Some(r.seed), &r.test))
            .collect();
        write_json(&p, &rows)?;
    }
    Ok(())
}

fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<11} {:>5} {:>12} {:>12} {:>12} {:>12} {:>10} {:>6}",
        "arm", "seed", "mae_all", "mae_cha_s", "mae_cha_b", "mae_eps", "sim_psi", "best"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<11} {:>5} {:>12.5e} {:>12} {:>12.5e} {:>12.5e} {:>10.6} {:>6}",
            r.arm.to_string(),
            r.seed,
            r.test.mae_all,
            r.test.mae_cha_s.map_or("-".into(), |v| format!("{v:.5e}")),
            r.test.mae_cha_b,
            r.test.mae_eps,
            r.test.sim_psi,
            r.best_epoch
        );
    }
    let mut arms: Vec<Arm> = rows.iter().map(|r| r.arm).collect();
    arms.sort();
    arms.dedup();
    let med = |arm: Arm| median(rows.iter().filter(|r| r.arm == arm).map(|r| r.test.mae_all).collect());
    let base = arms.contains(&Arm::Baseline).then(|| med(Arm::Baseline));
    let _ = writeln!(s, "median test mae_all over seeds:");
    for arm in arms {
        let m = med(arm);
        let rel = base.map_or(String::new(), |b| format!("  ({:+.2}% vs baseline)", 100.0 * (m - b) / b));
        let _ = writeln!(s, "  {:<11} {m:.5e}{rel}", arm.to_string());
    }
    s
}

/// Least-squares line `t = a·N + b` and its coefficient of determination.
fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let slope = sxy / sxx;
    let icpt = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a - icpt).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    (slope, icpt, 1.0 - ss_res / ss_tot)
}

fn cmd_bench(ctx: &Context, a: &BenchArgs) -> CmdResult {
    let out = ctx.out()?;
    if a.sizes.len() < 3 || a.sizes.iter().any(|&n| n < 2) || a.repeats == 0 || a.systems == 0 {
        return Err(usage("bench needs at least three sizes ≥ 2 and positive repeats and systems"));
    }
    let model = Model::new(ctx.config.model.clone(), ctx.cli.seed.unwrap_or(0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.cli.seed.unwrap_or(0));
    let ns = model.config().basis.species_count();
    let mut times = Vec::new();
    for &n in &a.sizes {
        let systems: Vec<AtomicSystem> = (0..a.systems)
            .map(|_| {
                let pos = sample_geometry(&mut rng, n)?;
                let species = (0..n).map(|_| rng.random_range(0..ns)).collect();
                AtomicSystem::new(pos, species, model.config().cutoff)
            })
            .collect::<tracegrad::Result<_>>()?;
        // One untimed pass warms caches and the coupling tables.
        model.predict(&systems[0])?;
        let mut runs = Vec::new();
        for _ in 0..a.repeats {
            let t = Instant::now();
            for s in &systems {
                model.predict(s)?;
            }
            runs.push(t.elapsed().as_secs_f64() / a.systems as f64);
        }
        let t = median(runs);
        println!("N = {n:>5}  {:.4} ms per system", 1e3 * t);
        times.push(t);
    }
    let x: Vec<f64> = a.sizes.iter().map(|&n| n as f64).collect();
    let (slope, icpt, r2) = linear_fit(&x, &times);
    println!("fit t = {:.4e}·N + {:.4e} s, R² = {r2:.5}", slope, icpt);
    if let Some(p) = out {
        write_json(
            &p,
            &serde_json::json!({
                "sizes": a.sizes, "seconds": times, "slope": slope, "intercept": icpt, "r2": r2,
            }),
        )?;
    }
    if r2 >= a.min_r2 {
        Ok(())
    } else {
        Err(Failure {
            code: 4,
            message: format!("linear fit R² = {r2:.4} below {}", a.min_r2),
        })
    }
}
