use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use segattack::attack::{attack_batch, AttackConfig, AttackLoss};
use segattack::bench::{self, default_candidates};
use segattack::config::BenchConfig;
use segattack::data::{self, DirSource, ShapesWorldSpec, Split, SplitSizes};
use segattack::metrics::{rank_rows, Metric, TieRule};
use segattack::objectives::LossKind;
use segattack::report::{self, AttackRow, WideTable};
use segattack::schedules::{parse_eps, EpsPhases, QSchedule};
use segattack::segmodel::ModelParams;
use segattack::train::{clean_accuracy, train_logged, TrainConfig};
use segattack::{tseg, Error};

const WORKERS_ENV: &str = "SEGATTACK_WORKERS";

#[derive(Parser)]
#[command(name = "segattack", version, about = "Adversarial attacks on semantic segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a ShapesWorld dataset with train/val/test splits.
    GenData(GenDataArgs),
    /// Train a victim model on the train split.
    Train(TrainArgs),
    /// Attack every image of one split.
    Attack(AttackArgs),
    /// Run a benchmark from a config file.
    Bench(BenchArgs),
    /// Choose a q schedule on the validation split.
    SelectSchedule(SelectArgs),
    /// Rank attacks in a wide score table.
    Rank(RankArgs),
    /// Emit per-pixel gradient weighting curves.
    Curves(CurvesArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
    #[arg(long, default_value_t = 256)]
    train: usize,
    #[arg(long, default_value_t = 64)]
    val: usize,
    #[arg(long, default_value_t = 64)]
    test: usize,
    #[arg(long, default_value_t = 1)]
    min_shapes: usize,
    #[arg(long, default_value_t = 3)]
    max_shapes: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    #[arg(long, default_value_t = data::CONTRAST)]
    contrast: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset root from `gen-data`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    /// PGD steps per training image; 0 trains on clean inputs.
    #[arg(long, default_value_t = 0)]
    adv_steps: usize,
    #[arg(long, default_value = "8/255")]
    adv_eps: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    loss: String,
    #[arg(long)]
    q_schedule: Option<String>,
    #[arg(long, default_value = "8/255")]
    eps: String,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long)]
    phases: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated schedules; defaults to the config list, then the six-schedule grid.
    #[arg(long)]
    candidates: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RankArgs {
    /// Wide CSV `row,<attack>/acc,<attack>/miou,...`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "min")]
    tie_rule: String,
    /// Ranks in the same layout plus an `avg-rank` row.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CurvesArgs {
    /// Comma-separated loss kinds, e.g. `tsallis:-3,tsallis:0,ce`.
    #[arg(long, default_value = "tsallis:-3,tsallis:0,ce,js,cospgd")]
    kinds: String,
    #[arg(long, default_value_t = 1e-3)]
    step: f64,
    #[arg(long)]
    out: PathBuf,
}

/// A run that finished but left some cells failed.
#[derive(Debug)]
struct Partial(usize);

impl std::fmt::Display for Partial {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} cell(s) or image(s) failed", self.0)
    }
}

impl std::error::Error for Partial {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Partial>().is_some() {
        return 1;
    }
    match e.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Parse(_) | Error::Io { .. } | Error::Decode(_)) => 2,
        _ => 1,
    }
}

fn configure_workers() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .with_context(|| format!("{WORKERS_ENV} must be a positive integer, got {v:?}"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Attack(a) => attack(a),
        Command::Bench(a) => bench_cmd(a),
        Command::SelectSchedule(a) => select(a),
        Command::Rank(a) => rank(a),
        Command::Curves(a) => curves(a),
    }
}

fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let spec = ShapesWorldSpec {
        size: a.size,
        classes: a.classes,
        min_shapes: a.min_shapes,
        max_shapes: a.max_shapes,
        noise: a.noise,
        contrast: a.contrast,
        seed: a.seed,
    };
    spec.validate().map_err(config_error)?;
    let sizes = SplitSizes {
        train: a.train,
        val: a.val,
        test: a.test,
    };
    data::gen_dataset(&spec, sizes, &a.out)?;
    println!(
        "wrote {} train / {} val / {} test images to {}",
        a.train,
        a.val,
        a.test,
        a.out.display()
    );
    Ok(())
}

fn config_error(e: Error) -> Error {
    match e {
        Error::InvalidArgument(m) => Error::Config(m),
        other => other,
    }
}

fn parse_split(s: &str) -> anyhow::Result<Split> {
    Ok(match s {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => return Err(Error::Config(format!("unknown split {other:?} (train|val|test)")).into()),
    })
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let cfg = TrainConfig {
        epochs: a.epochs,
        learning_rate: a.lr,
        batch_size: a.batch_size,
        adv_steps: a.adv_steps,
        adv_eps: parse_eps(&a.adv_eps).map_err(config_error)?,
        seed: a.seed,
        classes: a.classes,
    };
    cfg.validate().map_err(config_error)?;
    let src = DirSource { root: a.data.clone() };
    let train_set = data::SplitSource::load(&src, Split::Train)?;
    let (model, losses) = train_logged(&cfg, &train_set)?;
    model.save(&a.out)?;
    if let Some(last) = losses.last() {
        println!("final epoch loss {last:.6}");
    }
    let val = data::SplitSource::load(&src, Split::Val)?;
    if !val.is_empty() {
        println!("val pixel accuracy {:.2}%", clean_accuracy(&model, &val)?);
    }
    println!("saved {}", a.out.display());
    Ok(())
}

fn attack(a: AttackArgs) -> anyhow::Result<()> {
    let loss = AttackLoss::from_parts(&a.loss, a.q_schedule.as_deref()).map_err(config_error)?;
    let phases: EpsPhases = match &a.phases {
        Some(p) => p.parse().map_err(config_error)?,
        None => EpsPhases::default(),
    };
    let cfg = AttackConfig {
        loss,
        eps: parse_eps(&a.eps).map_err(config_error)?,
        iters: a.iters,
        phases,
        seed: a.seed,
        restarts: a.restarts,
    };
    cfg.validate().map_err(config_error)?;
    let model = ModelParams::load(&a.model)?;
    let dir = data::split_dir(&a.data, parse_split(&a.split)?);
    let manifest = data::read_manifest(&dir)?;
    let samples = data::load_split_dir(&dir)?;
    if samples.is_empty() {
        bail!(Error::Config(format!("{} has no images", dir.display())));
    }
    std::fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    let results = attack_batch(&model, &samples, &cfg);
    let mut rows = Vec::new();
    let mut failed = 0;
    for (row, r) in manifest.iter().zip(&results) {
        match r {
            Ok(res) => {
                tseg::write_tensor(&a.out.join(format!("adv_{:05}.tseg", row.index)), &res.adversarial)?;
                rows.push(AttackRow {
                    index: row.index,
                    best_loss: res.best_loss,
                    feasible: res.feasible,
                });
            }
            Err(e) => {
                failed += 1;
                eprintln!("image {}: {e}", row.index);
            }
        }
    }
    report::write_text(&a.out.join("results.csv"), &report::attack_csv(&rows)?)?;
    println!("attacked {} images with {loss}, {failed} failed", samples.len());
    if failed > 0 {
        return Err(Partial(failed).into());
    }
    Ok(())
}

fn load_bench_config(path: &Path) -> anyhow::Result<BenchConfig> {
    Ok(BenchConfig::load(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(format!("{}: {e}", path.display())),
        other => other,
    })?)
}

fn bench_cmd(a: BenchArgs) -> anyhow::Result<()> {
    let mut cfg = load_bench_config(&a.config)?;
    if let Some(out) = a.out {
        cfg.output_dir = out;
    }
    let victims = bench::load_victims(&cfg)?;
    let src = DirSource {
        root: cfg.dataset.root.clone(),
    };
    let outcome = bench::run_benchmark(&cfg, &src, &victims)?;
    outcome.write(&cfg.output_dir)?;
    if let Some(t) = &outcome.ranks {
        for (i, name) in outcome.attacks.iter().enumerate() {
            println!("{name}: avg rank acc {:.2}, miou {:.2}", t.avg_acc[i], t.avg_miou[i]);
        }
    }
    println!("report written to {}", cfg.output_dir.display());
    if !outcome.failures.is_empty() {
        for f in &outcome.failures {
            eprintln!("{f}");
        }
        return Err(Partial(outcome.failures.len()).into());
    }
    Ok(())
}

fn select(a: SelectArgs) -> anyhow::Result<()> {
    let cfg = load_bench_config(&a.config)?;
    let candidates: Vec<QSchedule> = match &a.candidates {
        Some(list) => list
            .split(',')
            .map(|s| s.parse().map_err(config_error))
            .collect::<Result<_, _>>()?,
        None if !cfg.candidates.is_empty() => cfg.candidate_schedules()?,
        None => default_candidates(),
    };
    let victims = bench::load_victims(&cfg)?;
    let src = DirSource {
        root: cfg.dataset.root.clone(),
    };
    let sel = bench::schedule_selection(&cfg, &src, &victims, &candidates)?;
    let mut csv = String::from("schedule,avg_rank,avg_rank_acc,avg_rank_miou\n");
    for s in &sel.scores {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            s.schedule, s.avg_rank, s.avg_rank_acc, s.avg_rank_miou
        ));
        println!(
            "{}: avg rank {:.3} (acc {:.3}, miou {:.3})",
            s.schedule, s.avg_rank, s.avg_rank_acc, s.avg_rank_miou
        );
    }
    let out = a.out.unwrap_or_else(|| cfg.output_dir.join("selection.csv"));
    report::write_text(&out, &csv)?;
    println!("selected {}", sel.chosen);
    if !sel.outcome.failures.is_empty() {
        return Err(Partial(sel.outcome.failures.len()).into());
    }
    Ok(())
}

fn rank(a: RankArgs) -> anyhow::Result<()> {
    let rule: TieRule = a.tie_rule.parse().map_err(config_error)?;
    let text = report::read_text(&a.input)?;
    let table = WideTable::parse(&text)?;
    let ranks = rank_rows(&table.rows, rule)?;
    for m in Metric::BOTH {
        let parts: Vec<String> = table
            .attacks
            .iter()
            .zip(ranks.avg(m))
            .map(|(name, r)| format!("{name}={r:.2}"))
            .collect();
        println!("avg rank {} ({rule}): {}", m.name(), parts.join(" "));
    }
    if let Some(out) = a.out {
        report::write_text(&out, &table.ranks_csv(&ranks)?)?;
    }
    Ok(())
}

fn curves(a: CurvesArgs) -> anyhow::Result<()> {
    let kinds: Vec<LossKind> = a
        .kinds
        .split(',')
        .map(|s| s.parse().map_err(config_error))
        .collect::<Result<_, _>>()?;
    let rows = bench::emit_curves(&kinds, a.step).map_err(config_error)?;
    report::write_text(&a.out, &report::curves_csv(&rows)?)?;
    println!("wrote {} curve points to {}", rows.len(), a.out.display());
    Ok(())
}
