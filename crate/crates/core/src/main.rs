use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use dks_core::checkpoint;
use dks_core::config::{parse_head_list, run_training, write_snapshot, RunConfig};
use dks_core::data::{
    convert_cifar, convert_mnist, generate_synthetic, CifarVariant, Dataset, Split, SyntheticSpec,
};
use dks_core::loss::Strategy;
use dks_core::suites::{self, Suite, SuiteOptions};
use dks_core::train::{self, TrainOutcome};
use dks_core::{Error, HeadId, Result, Scalar};

/// Seeds of a multi-run ablation when none are given.
const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

#[derive(Parser)]
#[command(
    name = "dks",
    version,
    about = "Multi-head CNN training with deep supervision and knowledge synergy"
)]
#[command(
    after_help = "Exit codes: 0 ok, 1 verification failure, 2 config/usage error, 3 training abort, 4 I/O or corrupt file."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Precision {
    #[value(name = "32")]
    F32,
    #[value(name = "64")]
    F64,
}

impl Precision {
    fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides `train.seed` (also seeds model initialization).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's `out` directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "32")]
    precision: Precision,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train one model from a config file.
    Train(RunArgs),
    /// Train one model per axis value (and seed) and summarize.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// `strategy` or `attachments`.
        #[arg(long)]
        axis: String,
        /// Comma-separated values, e.g. `top-down,bottom-up` or `C1C2,C1C3`.
        #[arg(long, allow_hyphen_values = true)]
        values: String,
        /// Comma-separated seeds; `--seed` selects a single one.
        #[arg(long)]
        seeds: Option<String>,
        /// Run the grid on several threads; each run stays deterministic.
        #[arg(long)]
        parallel: bool,
    },
    /// Strip auxiliary heads from a checkpoint.
    Export {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run verification suites.
    Verify {
        /// `grads`, `synergy` or `all`.
        #[arg(long, default_value = "all")]
        suite: String,
        /// Directory for report CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Monte-Carlo samples per sigma.
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        /// Caps audited coordinates per parameter group.
        #[arg(long)]
        max_coords: Option<usize>,
        #[arg(long, default_value_t = 8)]
        image_size: usize,
    },
    /// Generate the synthetic template dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 128)]
        per_class: usize,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[arg(long, default_value_t = 16)]
        image_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        amplitude: Option<f64>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Convert raw CIFAR or MNIST files into the dataset format.
    ConvertData {
        #[arg(long, value_enum)]
        format: RawFormat,
        /// CIFAR: one or more batch files. MNIST: the image file then the label file.
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long, value_enum)]
        split: SplitArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate every head of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; defaults to the test split of `--config`.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
        #[arg(long, value_enum, default_value = "32")]
        precision: Precision,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum RawFormat {
    Cifar10,
    Cifar100,
    Mnist,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn dispatch(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Train(a) => cmd_train(&a),
        Cmd::Ablate {
            run,
            axis,
            values,
            seeds,
            parallel,
        } => cmd_ablate(&run, &axis, &values, seeds.as_deref(), parallel),
        Cmd::Export { checkpoint, out } => cmd_export(&checkpoint, &out),
        Cmd::Verify {
            suite,
            out,
            seed,
            samples,
            max_coords,
            image_size,
        } => {
            let suite: Suite = suite.parse()?;
            let opts = SuiteOptions {
                image_size,
                max_coords,
                n_samples: samples,
                seed,
                ..Default::default()
            };
            let outcomes = suites::run(suite, &opts, out.as_deref())?;
            for o in &outcomes {
                let tag = if o.pass { "PASS" } else { "FAIL" };
                println!("{tag} {}/{}: {}", o.suite, o.fixture, o.detail);
            }
            suites::require_pass(&outcomes)
        }
        Cmd::GenData {
            out,
            classes,
            per_class,
            test_per_class,
            image_size,
            seed,
            amplitude,
            noise,
        } => {
            let mut spec = SyntheticSpec::new(classes, per_class, image_size);
            if let Some(t) = test_per_class {
                spec.test_per_class = t;
            }
            if let Some(a) = amplitude {
                spec.amplitude = a;
            }
            if let Some(n) = noise {
                spec.noise = n;
            }
            let (tr, te) = generate_synthetic(&spec, seed)?;
            tr.save(&out.join("train"))?;
            te.save(&out.join("test"))?;
            #[derive(Serialize)]
            struct Snapshot<'a> {
                command: &'a str,
                synthetic: &'a SyntheticSpec,
                seed: u64,
            }
            write_snapshot(
                &out,
                &Snapshot {
                    command: "gen-data",
                    synthetic: &spec,
                    seed,
                },
            )?;
            println!(
                "wrote {} train / {} test samples to {}",
                tr.len(),
                te.len(),
                out.display()
            );
            Ok(())
        }
        Cmd::ConvertData {
            format,
            input,
            split,
            out,
        } => {
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Test => Split::Test,
            };
            let read = |p: &PathBuf| fs::read(p).map_err(|e| Error::io(p, e));
            let data = match format {
                RawFormat::Cifar10 | RawFormat::Cifar100 => {
                    let mut raw = Vec::new();
                    for p in &input {
                        raw.extend(read(p)?);
                    }
                    let v = match format {
                        RawFormat::Cifar10 => CifarVariant::Cifar10,
                        _ => CifarVariant::Cifar100,
                    };
                    convert_cifar(&raw, v, split)?
                }
                RawFormat::Mnist => {
                    if input.len() != 2 {
                        return Err(Error::usage("mnist needs --input <images> <labels>"));
                    }
                    convert_mnist(&read(&input[0])?, &read(&input[1])?, split)?
                }
            };
            data.save(&out)?;
            #[derive(Serialize)]
            struct Snapshot<'a> {
                command: &'a str,
                inputs: &'a [PathBuf],
                split: Split,
            }
            write_snapshot(
                &out,
                &Snapshot {
                    command: "convert-data",
                    inputs: &input,
                    split,
                },
            )?;
            println!(
                "wrote {} samples ({} classes) to {}",
                data.len(),
                data.num_classes,
                out.display()
            );
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            config,
            batch_size,
            precision,
        } => {
            let set = match (data, config) {
                (Some(d), _) => Dataset::load(&d)?,
                (None, Some(c)) => {
                    let cfg = RunConfig::load(&c)?;
                    cfg.validate()?;
                    cfg.load_data()?.1
                }
                (None, None) => return Err(Error::usage("eval needs --data or --config")),
            };
            let errors = match precision {
                Precision::F32 => eval::<f32>(&checkpoint, &set, batch_size)?,
                Precision::F64 => eval::<f64>(&checkpoint, &set, batch_size)?,
            };
            for (h, e) in errors {
                println!("{h} {e:.2}");
            }
            Ok(())
        }
    }
}

fn eval<T: Scalar>(ckpt: &Path, data: &Dataset, batch_size: usize) -> Result<Vec<(HeadId, f64)>> {
    let model = checkpoint::load::<T>(ckpt)?;
    train::evaluate(&model, data, batch_size)
}

fn load_run_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &a.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_one(
    cfg: &RunConfig,
    tr: &Dataset,
    te: &Dataset,
    dir: &Path,
    precision: Precision,
) -> Result<TrainOutcome> {
    run_training(cfg, tr, te, dir, precision.bits())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.out
        .clone()
        .ok_or_else(|| Error::config("out: no output directory (set `out` or pass --out)"))
}

fn cmd_train(a: &RunArgs) -> Result<()> {
    let cfg = load_run_config(a)?;
    let dir = out_dir(&cfg)?;
    let (tr, te) = cfg.load_data()?;
    let outcome = run_one(&cfg, &tr, &te, &dir, a.precision)?;
    if let Some(last) = outcome.metrics.last() {
        let heads: Vec<String> = last
            .head_test_errors
            .iter()
            .map(|(h, e)| format!("{h} {e:.2}"))
            .collect();
        println!(
            "epoch {}: train error {:.2}%, test error {}",
            last.epoch,
            last.train_error,
            heads.join(", ")
        );
    }
    println!("artifacts in {}", dir.display());
    Ok(())
}

#[derive(Debug, Clone)]
enum AxisValue {
    Strategy(Strategy),
    Attachments(Vec<HeadId>),
}

fn parse_axis(axis: &str, values: &str) -> Result<Vec<(String, AxisValue)>> {
    let items: Vec<&str> = values
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    if items.is_empty() {
        return Err(Error::config("ablate: --values lists no values"));
    }
    items
        .into_iter()
        .map(|v| {
            let parsed = match axis {
                "strategy" => {
                    let s: Strategy = v.parse()?;
                    if s == Strategy::Custom {
                        return Err(Error::config(
                            "ablate: the custom strategy needs a pair list; use a config",
                        ));
                    }
                    AxisValue::Strategy(s)
                }
                "attachments" => {
                    let mut heads = parse_head_list(v)?;
                    heads.sort();
                    heads.dedup();
                    AxisValue::Attachments(heads)
                }
                _ => {
                    return Err(Error::config(format!(
                        "ablate: unknown axis {axis:?} (expected strategy or attachments)"
                    )))
                }
            };
            Ok((v.to_string(), parsed))
        })
        .collect()
}

struct Job {
    label: String,
    seed: u64,
    cfg: RunConfig,
    dir: PathBuf,
    /// Names of the trained heads in the full preset, `C1` first.
    head_names: Vec<HeadId>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 {
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (m, var.sqrt())
}

/// Per ablation value: label, train errors, test errors, per-head test errors.
type ValueRuns = (String, Vec<f64>, Vec<f64>, Vec<(HeadId, Vec<f64>)>);

fn cmd_ablate(
    a: &RunArgs,
    axis: &str,
    values: &str,
    seeds: Option<&str>,
    parallel: bool,
) -> Result<()> {
    let base = load_run_config(a)?;
    let values = parse_axis(axis, values)?;
    let seeds: Vec<u64> = match (a.seed, seeds) {
        (Some(s), _) => vec![s],
        (None, Some(list)) => {
            let v = list
                .split(',')
                .map(|s| s.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(format!("ablate: --seeds: {e}")))?;
            if v.is_empty() {
                return Err(Error::config("ablate: --seeds lists no seeds"));
            }
            v
        }
        (None, None) => DEFAULT_SEEDS.to_vec(),
    };
    let root = out_dir(&base)?;
    let (tr, te) = base.load_data()?;
    let full_heads = base.model_spec(&tr)?.head_ids();

    let mut jobs = Vec::new();
    for (label, value) in &values {
        for &seed in &seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            let head_names = match value {
                AxisValue::Strategy(s) => {
                    cfg.train.loss.strategy = *s;
                    full_heads.clone()
                }
                AxisValue::Attachments(h) => {
                    cfg.model.attachments = Some(h.clone());
                    cfg.validate()?;
                    h.clone()
                }
            };
            cfg.model_spec(&tr)?;
            let dir = root
                .join(format!("{axis}-{label}"))
                .join(format!("seed{seed}"));
            jobs.push(Job {
                label: label.clone(),
                seed,
                cfg,
                dir,
                head_names,
            });
        }
    }

    let results: Vec<Result<TrainOutcome>> = if parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = jobs
                .iter()
                .map(|j| s.spawn(|| run_one(&j.cfg, &tr, &te, &j.dir, a.precision)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("ablation run panicked"))
                .collect()
        })
    } else {
        jobs.iter()
            .map(|j| run_one(&j.cfg, &tr, &te, &j.dir, a.precision))
            .collect()
    };

    let mut runs_csv = String::from("axis,value,seed,train_error,test_error,head_test_errors\n");
    let mut per_value: Vec<ValueRuns> = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let outcome = res?;
        let last = outcome
            .metrics
            .last()
            .ok_or_else(|| Error::config("ablate: runs need at least one epoch"))?;
        let heads: Vec<(HeadId, f64)> = job
            .head_names
            .iter()
            .zip(&last.head_test_errors)
            .map(|(name, (_, e))| (*name, *e))
            .collect();
        let fmt: Vec<String> = heads.iter().map(|(h, e)| format!("{h}:{e}")).collect();
        runs_csv += &format!(
            "{axis},{},{},{},{},{}\n",
            job.label,
            job.seed,
            last.train_error,
            last.test_error,
            fmt.join(";")
        );
        if per_value.last().map(|p| &p.0) != Some(&job.label) {
            per_value.push((
                job.label.clone(),
                Vec::new(),
                Vec::new(),
                heads.iter().map(|(h, _)| (*h, Vec::new())).collect(),
            ));
        }
        let entry = per_value.last_mut().expect("entry pushed");
        entry.1.push(last.train_error);
        entry.2.push(last.test_error);
        for ((_, v), (_, e)) in entry.3.iter_mut().zip(&heads) {
            v.push(*e);
        }
    }

    let mut summary = String::from(
        "axis,value,runs,train_error_mean,train_error_std,test_error_mean,test_error_std,head_test_error_means\n",
    );
    for (label, train_e, test_e, heads) in &per_value {
        let (trm, trs) = mean_std(train_e);
        let (tem, tes) = mean_std(test_e);
        let h: Vec<String> = heads
            .iter()
            .map(|(id, v)| format!("{id}:{}", mean_std(v).0))
            .collect();
        summary += &format!(
            "{axis},{label},{},{trm},{trs},{tem},{tes},{}\n",
            test_e.len(),
            h.join(";")
        );
        println!("{axis}={label}: test error {tem:.2} ({tes:.2}), train error {trm:.2} ({trs:.2})");
    }
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    for (name, text) in [("runs.csv", &runs_csv), ("summary.csv", &summary)] {
        let p = root.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    println!("summary in {}", root.join("summary.csv").display());
    Ok(())
}

fn cmd_export(src: &Path, out: &Path) -> Result<()> {
    let model = checkpoint::load::<f32>(src)?;
    let stripped = model.strip_aux()?;
    checkpoint::save(&stripped, out)?;
    let (before, after) = (model.trainable_count(), stripped.trainable_count());
    println!(
        "trainable parameters: {before} -> {after} (removed {})",
        before - after
    );
    Ok(())
}
