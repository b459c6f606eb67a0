//! `pml` command-line tool.
//!
//! Exit codes: 0 on success, 1 on usage or input errors, 2 when a checked
//! property fails (gradient tolerance exceeded, likelihood ordering violated).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use pml_core::eval::{ablation_run, evaluate, AblationConfig, BenchmarkConfig};
use pml_core::gradcheck::{grad_check, GradCheckConfig};
use pml_core::io::{read_dmap, read_points, write_dmap};
use pml_core::likelihood::{verify_theorem, TheoremConfig};
use pml_core::loss::{pml_loss, total_loss, DEFAULT_EPSILON, DEFAULT_N};
use pml_core::pyramid::{build_pyramid, rasterize};
use pml_core::synth::train::{predict, scene_set};
use pml_core::{DensityMap, LossKind, ResolutionSet};

#[derive(Debug, Parser)]
#[command(name = "pml", version, about = "Progressive multi-resolution loss toolkit")]
struct Cli {
    /// Cap on worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Count points per grid cell and write a .dmap file.
    Rasterize {
        #[arg(long)]
        points: PathBuf,
        #[arg(long)]
        scene_size: f64,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sum-pool a map to each listed level.
    Pyramid {
        #[arg(long)]
        input: PathBuf,
        /// Comma-separated, strictly increasing levels.
        #[arg(long)]
        levels: String,
        /// Write `level_<i>.dmap` files here.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Evaluate the loss on a prediction/ground-truth pair or batch.
    Loss {
        /// A .dmap file or a directory of them.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        /// Drop the full-resolution L2 regularizer.
        #[arg(long)]
        no_reg: bool,
        #[arg(long, default_value_t = DEFAULT_EPSILON)]
        eps: f64,
        #[arg(long)]
        json: bool,
    },
    /// Compare the analytic loss gradient with central finite differences.
    GradCheck {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        level: usize,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
    },
    /// Check that dense resolution sets never score below sparse ones.
    VerifyTheorem {
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        level: usize,
        #[arg(long)]
        nk: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the tiny regressor on synthetic scenes and write the metrics trace.
    TrainDemo {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        steps: usize,
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long, default_value_t = DEFAULT_N)]
        n: usize,
        /// Drop the L2 regularizer from the pml loss.
        #[arg(long)]
        no_reg: bool,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        #[arg(long, default_value_t = 10.0)]
        clip: f64,
        #[arg(long)]
        out: PathBuf,
        /// Also write test scenes, predictions and ground truths here.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Sweep n with and without the regularizer.
    Ablate {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value = "0,1,2,3,4,5")]
        n_values: String,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Count MAE/MSE between matching .dmap files of two directories.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        gt_dir: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Pml,
    L2,
}

/// A checked property did not hold.
#[derive(Debug)]
struct PropertyFailure(String);

impl fmt::Display for PropertyFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for PropertyFailure {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<PropertyFailure>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Rasterize {
            points,
            scene_size,
            level,
            out,
        } => {
            println!("# rasterize points={} scene_size={scene_size} level={level} out={}", points.display(), out.display());
            let ann = read_points(&points, scene_size)
                .with_context(|| format!("reading {}", points.display()))?;
            let map = rasterize(&ann, level)?;
            write_dmap(&out, &map)?;
            println!("points: {}", ann.len());
            println!("sum: {}", map.sum());
        }
        Command::Pyramid {
            input,
            levels,
            out_dir,
        } => {
            println!("# pyramid input={} levels={levels}", input.display());
            let map = read_dmap(&input).with_context(|| format!("reading {}", input.display()))?;
            let set: ResolutionSet = levels.parse()?;
            let pyramid = build_pyramid(&map, &set)?;
            if let Some(dir) = &out_dir {
                fs::create_dir_all(dir)?;
            }
            for m in pyramid.maps() {
                println!("level {}: side {} sum {}", m.level(), m.side(), m.sum());
                if let Some(dir) = &out_dir {
                    write_dmap(dir.join(format!("level_{}.dmap", m.level())), m)?;
                }
            }
        }
        Command::Loss {
            pred,
            gt,
            n,
            no_reg,
            eps,
            json,
        } => {
            let header = format!(
                "# loss pred={} gt={} n={n} reg={} eps={eps:e}",
                pred.display(),
                gt.display(),
                !no_reg
            );
            if json {
                eprintln!("{header}");
            } else {
                println!("{header}");
            }
            let (preds, gts) = read_pairs(&pred, &gt)?;
            let breakdown = if no_reg {
                pml_loss(&preds, &gts, n, eps)?
            } else {
                total_loss(&preds, &gts, n, eps)?
            };
            if json {
                println!("{}", breakdown.to_json());
            } else {
                print!("{}", breakdown.to_text());
            }
        }
        Command::GradCheck { seed, level, n, tol } => {
            println!("# grad-check seed={seed} level={level} n={n} tol={tol:e}");
            let report = grad_check(&GradCheckConfig::new(seed, level, n))?;
            println!("checked: {}", report.checked);
            println!("max_relative_error: {:e}", report.max_relative_error);
            println!(
                "worst: item {} cell {} analytic {:e} numeric {:e}",
                report.worst.0, report.worst.1, report.analytic, report.numeric
            );
            if !(report.max_relative_error < tol) {
                return Err(PropertyFailure(format!(
                    "gradient check failed: {:e} >= {tol:e}",
                    report.max_relative_error
                ))
                .into());
            }
            println!("ok");
        }
        Command::VerifyTheorem {
            trials,
            seed,
            level,
            nk,
            out,
        } => {
            println!("# verify-theorem trials={trials} seed={seed} level={level} nk={nk}");
            let report = verify_theorem(&TheoremConfig::new(trials, seed, level, nk))?;
            if let Some(path) = &out {
                fs::write(path, report.to_csv())?;
            }
            let worst = report.trials.iter().map(|t| t.diff).fold(f64::INFINITY, f64::min);
            println!("min relative log-likelihood gain: {worst:e}");
            println!("violations: {}", report.violations);
            if report.violations > 0 {
                return Err(PropertyFailure(format!(
                    "{} of {trials} trials violated the ordering",
                    report.violations
                ))
                .into());
            }
        }
        Command::TrainDemo {
            seed,
            steps,
            loss,
            n,
            no_reg,
            lr,
            clip,
            out,
            export,
        } => {
            let loss = match loss {
                LossArg::Pml => LossKind::Pml {
                    n,
                    regularized: !no_reg,
                },
                LossArg::L2 => LossKind::L2,
            };
            let bench = BenchmarkConfig {
                steps,
                lr,
                clip_norm: clip,
                ..BenchmarkConfig::default()
            };
            println!("# train-demo seed={seed} loss={} {}", loss.label(), describe(&bench));
            let result = bench.run(loss, seed)?;
            fs::write(&out, result.outcome.trace_csv())?;
            let first = result.outcome.trace.first().map_or(f64::NAN, |r| r.loss);
            let last = result.outcome.trace.last().map_or(f64::NAN, |r| r.loss);
            println!("loss: {first} -> {last}");
            println!("test_mae: {}", result.test.mae);
            println!("test_mse: {}", result.test.mse);
            if let Some(dir) = export {
                export_run(&dir, &bench, seed, bench.scored_model(&result.outcome))?;
            }
        }
        Command::Ablate {
            seed,
            n_values,
            repeats,
            steps,
            out,
        } => {
            let n_values = n_values
                .split(',')
                .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad n value {t:?}")))
                .collect::<Result<Vec<_>>>()?;
            let mut bench = BenchmarkConfig::default();
            if let Some(steps) = steps {
                bench.steps = steps;
            }
            println!("# ablate seed={seed} n_values={n_values:?} repeats={repeats} {}", describe(&bench));
            let table = ablation_run(&AblationConfig {
                bench,
                base_seed: seed,
                n_values,
                with_reg: vec![false, true],
                repeats,
            })?;
            fs::write(&out, table.to_csv())?;
            print!("{}", table.summary());
        }
        Command::Eval { pred_dir, gt_dir } => {
            println!("# eval pred_dir={} gt_dir={}", pred_dir.display(), gt_dir.display());
            let (preds, gts) = read_pairs(&pred_dir, &gt_dir)?;
            let m = evaluate(&preds, &gts)?;
            println!("samples: {}", m.per_sample.len());
            println!("mae: {}", m.mae);
            println!("mse: {}", m.mse);
        }
    }
    Ok(())
}

fn describe(b: &BenchmarkConfig) -> String {
    format!(
        "steps={} lr={:e} clip={} batch={} hidden={} output_bias={} select_best={} scenes_per_epoch={} test_scenes={} scene=[{}]",
        b.steps,
        b.lr,
        b.clip_norm,
        b.batch,
        b.hidden,
        b.output_bias,
        b.select_best,
        b.scenes_per_epoch,
        b.test_scenes,
        b.scene.manifest_line()
    )
}

fn dmap_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "dmap"))
        .collect();
    files.sort();
    Ok(files)
}

fn read_map(path: &Path) -> Result<DensityMap> {
    read_dmap(path).with_context(|| format!("reading {}", path.display()))
}

/// One file each, or two directories whose `.dmap` files pair up by name.
fn read_pairs(pred: &Path, gt: &Path) -> Result<(Vec<DensityMap>, Vec<DensityMap>)> {
    if pred.is_dir() != gt.is_dir() {
        bail!("--pred and --gt must both be files or both be directories");
    }
    if !pred.is_dir() {
        let g = read_map(gt)?;
        g.validate_ground_truth()
            .with_context(|| format!("ground truth {}", gt.display()))?;
        return Ok((vec![read_map(pred)?], vec![g]));
    }
    let pred_files = dmap_files(pred)?;
    if pred_files.is_empty() {
        bail!("no .dmap files in {}", pred.display());
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for p in pred_files {
        let name = p.file_name().expect("listed file has a name");
        let g = gt.join(name);
        if !g.exists() {
            bail!("no ground truth {} for {}", g.display(), p.display());
        }
        preds.push(read_map(&p)?);
        let gmap = read_map(&g)?;
        gmap.validate_ground_truth()
            .with_context(|| format!("ground truth {}", g.display()))?;
        gts.push(gmap);
    }
    if dmap_files(gt)?.len() != preds.len() {
        bail!("{} holds .dmap files without predictions", gt.display());
    }
    Ok((preds, gts))
}

fn export_run(dir: &Path, bench: &BenchmarkConfig, seed: u64, model: &pml_core::synth::TinyModel) -> Result<()> {
    let scenes = scene_set(&bench.scene, bench.test_seed(seed), bench.test_scenes)?;
    let preds = predict(model, &scenes)?;
    for sub in ["scenes", "preds", "gts"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    for (i, (scene, pred)) in scenes.iter().zip(&preds).enumerate() {
        let name = format!("{i:04}");
        scene.write_dir(dir.join("scenes").join(&name))?;
        write_dmap(dir.join("preds").join(format!("{name}.dmap")), pred)?;
        write_dmap(dir.join("gts").join(format!("{name}.dmap")), &scene.gt_map)?;
    }
    println!("exported {} test scenes to {}", scenes.len(), dir.display());
    Ok(())
}
