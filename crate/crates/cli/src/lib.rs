//! Pipeline commands behind the `diffalign` binary.
//!
//! Every command reads a [`RunConfig`], writes into one run directory under
//! fixed file names and returns a library error that [`exit_code`] maps to
//! the process status.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use diffalign_core::alignment::{self, AlignmentRecord};
use diffalign_core::checkpoint::Checkpoint;
use diffalign_core::critic::{self, QSource, RewardData};
use diffalign_core::dataset::BehaviorDataset;
use diffalign_core::envs2d::{self, DensityGrid, Ranges};
use diffalign_core::metrics::CsvSink;
use diffalign_core::oracle::{self, CheckResult};
use diffalign_core::{pretrain, rng, sampler, Error, Result, ScalarField};
use ndarray::Array2;
use serde::Serialize;

pub use config::RunConfig;

pub const BEHAVIOR_CKPT: &str = "behavior.ckpt";
pub const ALIGNED_CKPT: &str = "aligned.ckpt";
pub const CRITIC_CKPT: &str = "critic.ckpt";
pub const DATASET_CSV: &str = "dataset.csv";
pub const ALIGNMENT_CSV: &str = "alignment.csv";
pub const PRETRAIN_METRICS: &str = "pretrain_metrics.csv";
pub const FINETUNE_METRICS: &str = "finetune_metrics.csv";
pub const FINETUNE_SUMMARY: &str = "finetune_summary.json";
pub const SAMPLES_CSV: &str = "samples.csv";
pub const VERIFY_CSV: &str = "verify.csv";

#[derive(Debug, Parser)]
#[command(name = "diffalign", version, about = "Diffusion policy alignment on 2D bandit tasks")]
pub struct Cli {
    /// Run directory; overrides DIFFALIGN_OUT and the config file.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the behavior field to the task dataset.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Draw K behavior candidates per record and attach Q-values.
    Annotate {
        #[arg(long)]
        config: PathBuf,
        /// Behavior checkpoint; defaults to the run directory's.
        #[arg(long)]
        behavior: Option<PathBuf>,
    },
    /// Align a copy of the behavior field on the annotated records.
    Finetune {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        behavior: Option<PathBuf>,
        /// Alignment CSV; defaults to the run directory's.
        #[arg(long)]
        records: Option<PathBuf>,
        /// Share of records kept, in (0, 1].
        #[arg(long, default_value_t = 1.0)]
        fraction: f64,
    },
    /// Draw actions from a trained field.
    Sample {
        #[arg(long)]
        config: PathBuf,
        /// `behavior`, `aligned` or a checkpoint path.
        #[arg(long, default_value = "aligned")]
        field: String,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        /// Defaults to the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep the best of this many candidates under the task Q.
        #[arg(long, default_value_t = 1)]
        best_of: usize,
    },
    /// Evaluate a density on a regular 2D grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// `behavior`, `aligned`, `target` or a checkpoint path.
        #[arg(long, default_value = "behavior")]
        field: String,
        #[arg(long, default_value_t = 0.0)]
        t: f64,
        #[arg(long, default_value_t = envs2d::DEFAULT_RESOLUTION)]
        resolution: usize,
    },
    /// Run the exact oracle checks.
    Verify {
        #[arg(long, value_enum, default_value_t = Suite::All)]
        suite: Suite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Only used to locate the run directory.
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    All,
    Lemma1,
    Lemma23,
    Proposition,
}

/// 0 success, 1 internal, 2 input or configuration, 3 checkpoint mismatch.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::CheckpointMismatch(_) => 3,
        Error::Config(_)
        | Error::Input(_)
        | Error::Domain(_)
        | Error::Shape { .. }
        | Error::Checkpoint(_)
        | Error::Io { .. } => 2,
        Error::Numeric(_) | Error::Training { .. } | Error::Sampler { .. } => 1,
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(io_err(path))
}

/// Loads the config and prepares the run directory.
fn open_run(config: &Path, out: Option<&Path>) -> Result<(RunConfig, PathBuf)> {
    let plan = RunConfig::load(config)?.plan()?;
    let dir = plan.output_dir(out);
    std::fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let snap = dir.join(config::SNAPSHOT);
    std::fs::write(&snap, plan.to_toml()).map_err(io_err(&snap))?;
    Ok((plan, dir))
}

fn load_field(plan: &RunConfig, dir: &Path, which: &str) -> Result<ScalarField> {
    let path = match which {
        "behavior" => dir.join(BEHAVIOR_CKPT),
        "aligned" => dir.join(ALIGNED_CKPT),
        other => PathBuf::from(other),
    };
    Checkpoint::load(&path)?.into_field(Some(&plan.field))
}

pub fn run(cli: &Cli) -> Result<()> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Pretrain { config } => cmd_pretrain(config, out).map(|_| ()),
        Command::Annotate { config, behavior } => cmd_annotate(config, behavior.as_deref(), out).map(|_| ()),
        Command::Finetune {
            config,
            behavior,
            records,
            fraction,
        } => cmd_finetune(config, behavior.as_deref(), records.as_deref(), *fraction, out).map(|_| ()),
        Command::Sample {
            config,
            field,
            n,
            seed,
            best_of,
        } => {
            let rows = cmd_sample(config, field, *n, *seed, *best_of, out)?;
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            for r in rows {
                writeln!(lock, "{},{},{}", r[0], r[1], r[2]).ok();
            }
            Ok(())
        }
        Command::Grid {
            config,
            field,
            t,
            resolution,
        } => cmd_grid(config, field, *t, *resolution, out).map(|_| ()),
        Command::Verify { suite, seed, config } => {
            let dir = match config {
                Some(c) => RunConfig::load(c)?.output_dir(out),
                None => RunConfig::default().output_dir(out),
            };
            let results = cmd_verify(*suite, *seed, &dir)?;
            print!("{}", format_table(&results));
            if results.iter().all(|r| r.pass) {
                Ok(())
            } else {
                Err(Error::Numeric("oracle checks failed".into()))
            }
        }
    }
}

/// Trains the behavior field. Returns the run directory.
pub fn cmd_pretrain(config: &Path, out: Option<&Path>) -> Result<PathBuf> {
    let (plan, dir) = open_run(config, out)?;
    let data = match &plan.dataset {
        Some(p) => BehaviorDataset::read_csv(p)?,
        None => envs2d::generate(&plan.task)?,
    };
    if data.action_dim() != plan.field.action_dim || data.state_dim() != plan.field.state_dim {
        return Err(Error::Config(format!(
            "dataset has {} state and {} action columns, field expects {} and {}",
            data.state_dim(),
            data.action_dim(),
            plan.field.state_dim,
            plan.field.action_dim
        )));
    }
    data.write_csv(&dir.join(DATASET_CSV))?;
    let metrics = dir.join(PRETRAIN_METRICS);
    let mut sink = CsvSink::new(create(&metrics)?, &["loss"]).map_err(io_err(&metrics))?;
    let phi = pretrain::pretrain_run(&data, &plan.field, &plan.pretrain, &plan.schedule, &mut sink)?;
    sink.finish().map_err(io_err(&metrics))?;
    Checkpoint::from_field(&phi, plan.schedule, plan.seed)
        .with_meta("stage", "pretrain")
        .save(dir.join(BEHAVIOR_CKPT))?;
    Ok(dir)
}

/// Resolves the Q source, training and saving a critic when configured.
fn q_source(plan: &RunConfig, dir: &Path, data: &BehaviorDataset) -> Result<QSource> {
    match plan.annotate.q_source {
        config::QSourceKind::Analytic => {
            if data.state_dim() != 0 || data.action_dim() != 2 {
                return Err(Error::Config("the analytic Q source needs a stateless 2D task".into()));
            }
            Ok(QSource::Analytic(plan.task.q_field()))
        }
        config::QSourceKind::Expectile => {
            let mut r = rng::substream(plan.seed, "rewards");
            let rewards = data
                .actions()
                .rows()
                .into_iter()
                .map(|a| envs2d::true_q(&plan.task, [a[0], a[1]]) + plan.annotate.reward_noise * rng::normal(&mut r))
                .collect();
            let rd = RewardData::new(data.states().to_owned(), data.actions().to_owned(), rewards)?;
            let mut sink = diffalign_core::metrics::NullSink;
            let q = critic::train_expectile_critic(&rd, plan.annotate.tau, &plan.critic, &mut sink)?;
            if let QSource::Learned(c) = &q {
                Checkpoint::from_critic(c, plan.seed)
                    .with_meta("tau", plan.annotate.tau)
                    .save(dir.join(CRITIC_CKPT))?;
            }
            Ok(q)
        }
    }
}

/// Builds and writes the alignment dataset. Returns the record count.
pub fn cmd_annotate(config: &Path, behavior: Option<&Path>, out: Option<&Path>) -> Result<usize> {
    let (plan, dir) = open_run(config, out)?;
    let phi = match behavior {
        Some(p) => Checkpoint::load(p)?.into_field(Some(&plan.field))?,
        None => load_field(&plan, &dir, "behavior")?,
    };
    let data = BehaviorDataset::read_csv(&dir.join(DATASET_CSV))?;
    let n = plan.annotate.records;
    let states = Array2::from_shape_fn((n, data.state_dim()), |(i, j)| data.states()[[i % data.len(), j]]);
    let mut r = rng::substream(plan.seed, "annotate");
    let cands = alignment::sample_candidates(&phi, states.view(), plan.align.k, &plan.sampler, &plan.schedule, &mut r)?;
    let q = q_source(&plan, &dir, &data)?;
    let records = cands
        .into_iter()
        .map(|(s, actions)| {
            let st = Array2::from_shape_fn((actions.nrows(), s.len()), |(_, j)| s[j]);
            let qs = q.eval_batch(st.view(), actions.view())?;
            AlignmentRecord::new(s, actions, qs)
        })
        .collect::<Result<Vec<_>>>()?;
    alignment::write_records_file(&records, &dir.join(ALIGNMENT_CSV))?;
    Ok(records.len())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FinetuneSummary {
    pub fraction: f64,
    pub total_records: usize,
    pub used_records: usize,
    pub beta: f64,
    pub steps: usize,
}

pub fn cmd_finetune(
    config: &Path,
    behavior: Option<&Path>,
    records: Option<&Path>,
    fraction: f64,
    out: Option<&Path>,
) -> Result<FinetuneSummary> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let (plan, dir) = open_run(config, out)?;
    let phi = match behavior {
        Some(p) => Checkpoint::load(p)?.into_field(Some(&plan.field))?,
        None => load_field(&plan, &dir, "behavior")?,
    };
    let path = records.map(Path::to_path_buf).unwrap_or_else(|| dir.join(ALIGNMENT_CSV));
    let all = alignment::read_records_file(&path)?;
    let used = alignment::subsample(&all, fraction, plan.seed)?;
    let metrics = dir.join(FINETUNE_METRICS);
    let mut sink = CsvSink::new(create(&metrics)?, &["loss", "mean_implied_q"]).map_err(io_err(&metrics))?;
    let theta = alignment::finetune_run(&phi, &used, &plan.align, &plan.schedule, &mut sink)?;
    sink.finish().map_err(io_err(&metrics))?;
    let summary = FinetuneSummary {
        fraction,
        total_records: all.len(),
        used_records: used.len(),
        beta: plan.align.beta,
        steps: plan.align.steps,
    };
    Checkpoint::from_field(&theta, plan.schedule, plan.seed)
        .with_meta("stage", "finetune")
        .with_meta("fraction", fraction)
        .with_meta("records", used.len())
        .save(dir.join(ALIGNED_CKPT))?;
    let path = dir.join(FINETUNE_SUMMARY);
    std::fs::write(&path, serde_json::to_string_pretty(&summary).unwrap()).map_err(io_err(&path))?;
    Ok(summary)
}

/// Draws `n` actions; rows are `a0, a1, true Q`.
pub fn cmd_sample(
    config: &Path,
    field: &str,
    n: usize,
    seed: Option<u64>,
    best_of: usize,
    out: Option<&Path>,
) -> Result<Vec<[f64; 3]>> {
    let (plan, dir) = open_run(config, out)?;
    let f = load_field(&plan, &dir, field)?;
    if f.config().state_dim != 0 || f.config().action_dim != 2 {
        return Err(Error::Input("sample supports stateless 2D fields only".into()));
    }
    let mut r = rng::substream(seed.unwrap_or(plan.seed), "sample");
    let states = Array2::zeros((n, 0));
    let q = |_: &[f64], a: &[f64]| envs2d::true_q(&plan.task, [a[0], a[1]]);
    let actions = if best_of > 1 {
        sampler::rejection_sample_batch(&f, states.view(), q, best_of, &plan.sampler, &plan.schedule, &mut r)?
    } else {
        sampler::sample_batch(&f, states.view(), &plan.sampler, &plan.schedule, &mut r)?
    };
    let rows: Vec<[f64; 3]> = actions
        .rows()
        .into_iter()
        .map(|a| [a[0], a[1], envs2d::true_q(&plan.task, [a[0], a[1]])])
        .collect();
    let path = dir.join(SAMPLES_CSV);
    let mut w = create(&path)?;
    writeln!(w, "a0,a1,q").map_err(io_err(&path))?;
    for row in &rows {
        writeln!(w, "{},{},{}", row[0], row[1], row[2]).map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(rows)
}

/// Writes `grid_<name>.csv` and `grid_<name>.pgm`. Field grids hold
/// `exp f` normalized to unit mass; `target` is the exact tilted behavior density.
pub fn cmd_grid(config: &Path, field: &str, t: f64, resolution: usize, out: Option<&Path>) -> Result<DensityGrid> {
    let (plan, dir) = open_run(config, out)?;
    let ranges = Ranges::default();
    let grid = if field == "target" {
        if t != 0.0 {
            return Err(Error::Config("the target grid is only defined at t = 0".into()));
        }
        envs2d::tilted_grid(&plan.task, plan.align.beta, ranges, resolution)?
    } else {
        let f = load_field(&plan, &dir, field)?;
        let centers = DensityGrid::cell_centers(ranges, resolution);
        let actions = Array2::from_shape_fn((centers.len(), 2), |(i, d)| centers[i][d]);
        let states = Array2::zeros((centers.len(), f.config().state_dim));
        let logs = f.forward_batch(actions.view(), states.view(), &vec![t; centers.len()])?;
        let top = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = w.iter().sum::<f64>();
        let area = (ranges.xmax - ranges.xmin) * (ranges.ymax - ranges.ymin) / (resolution * resolution) as f64;
        DensityGrid::from_values(ranges, resolution, w.iter().map(|v| v / z / area).collect())?
    };
    let name = Path::new(field)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| field.to_string());
    grid.write_csv_file(&dir.join(format!("grid_{name}.csv")))?;
    grid.write_pgm_file(&dir.join(format!("grid_{name}.pgm")))?;
    Ok(grid)
}

fn in_suite(suite: Suite, name: &str) -> bool {
    match suite {
        Suite::All => true,
        Suite::Lemma1 => name.starts_with("lemma1"),
        Suite::Lemma23 => name.starts_with("lemma2") || name.starts_with("lemma3") || name.starts_with("naive"),
        Suite::Proposition => name.starts_with("prop"),
    }
}

/// Runs the oracle suite and writes `verify.csv` into `dir`.
pub fn cmd_verify(suite: Suite, seed: u64, dir: &Path) -> Result<Vec<CheckResult>> {
    let results: Vec<CheckResult> = oracle::run_suite(seed)?
        .into_iter()
        .filter(|r| in_suite(suite, &r.name))
        .collect();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let path = dir.join(VERIFY_CSV);
    let mut w = create(&path)?;
    writeln!(w, "check,value,threshold,bound,margin,pass").map_err(io_err(&path))?;
    for r in &results {
        writeln!(
            w,
            "{},{:e},{:e},{},{:e},{}",
            r.name,
            r.value,
            r.threshold,
            if r.lower_bound { "lower" } else { "upper" },
            r.margin(),
            r.pass
        )
        .map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;
    Ok(results)
}

pub fn format_table(results: &[CheckResult]) -> String {
    let mut s = format!("{:<42} {:>12} {:>12} {:>12}  result\n", "check", "value", "threshold", "margin");
    for r in results {
        let op = if r.lower_bound { ">" } else { "<" };
        s.push_str(&format!(
            "{:<42} {:>12.4e} {op}{:>11.1e} {:>12.4e}  {}\n",
            r.name,
            r.value,
            r.threshold,
            r.margin(),
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    s
}
