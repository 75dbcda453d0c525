mod config;
mod data;
mod export;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use frn_core::simdata::{crf_project, endmember_library, gaussian_crf, linear_wavelengths, save_cube, synth_scene, SceneSpec};
use frn_core::train::{evaluate_baseline, run_ablation, AblationAxis, Dataset, LogRecord, Model, Trainer};
use frn_core::FrnError;
use serde_json::json;

use config::{ConfigError, DataConfig, DataError, ExperimentConfig};

#[derive(Parser)]
#[command(name = "frn", version, about = "Recursive spectral reconstruction from RGB")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic low-rank scenes, their RGB renderings and the CRF.
    Synth(SynthArgs),
    /// Train a network; any config field can be overridden as `--section.key value`.
    Train(TrainArgs),
    /// Score a checkpoint on a data directory and export images.
    Eval(EvalArgs),
    /// Sweep one hyperparameter and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    scenes: usize,
    #[arg(long, default_value_t = 32)]
    bands: usize,
    #[arg(long, default_value_t = 96)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Materials per scene.
    #[arg(long, default_value_t = 3)]
    endmembers: usize,
    /// Size of the shared material library scenes draw from.
    #[arg(long, default_value_t = 6)]
    library: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Write zero wall times so repeated runs are byte-identical.
    #[arg(long)]
    deterministic: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// CRF CSV; defaults to `<data>/crf.csv` or the built-in response.
    #[arg(long)]
    crf: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Skip the per-band image export.
    #[arg(long)]
    no_images: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    axis: AblationAxis,
    /// Comma-separated sweep values, e.g. `0.2,0.3,0.5`.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    deterministic: bool,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 config, 3 data, 4 numeric failure; anything else is reported as 1.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return 2;
        }
        if cause.is::<DataError>() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<FrnError>() {
            return match e {
                FrnError::NonFinite { .. } | FrnError::NonFiniteLoss { .. } => 4,
                FrnError::Contract(_) | FrnError::Shape { .. } | FrnError::UnknownOp(_) => 2,
                _ => 3,
            };
        }
        if cause.is::<std::io::Error>() {
            return 3;
        }
    }
    1
}

fn synth(a: SynthArgs) -> Result<()> {
    if a.scenes == 0 || a.bands < 2 || a.size == 0 {
        return Err(ConfigError("need --scenes ≥ 1, --bands ≥ 2 and --size ≥ 1".into()).into());
    }
    if a.endmembers == 0 || a.library < a.endmembers {
        return Err(ConfigError(format!(
            "--library ({}) must hold at least --endmembers ({}) materials",
            a.library, a.endmembers
        ))
        .into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let crf = gaussian_crf(a.bands, frn_core::simdata::DEFAULT_CENTERS_NM, frn_core::simdata::DEFAULT_SIGMA_NM)?;
    crf.save_csv(a.out.join("crf.csv"))?;
    let library = endmember_library(a.library, a.seed);
    for i in 0..a.scenes {
        let spec = SceneSpec {
            endmembers: a.endmembers,
            seed: a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            library: Some(library.clone()),
            ..Default::default()
        };
        let cube = synth_scene(&spec, a.bands, a.size, a.size)?;
        let name = format!("scene_{i:03}");
        save_cube(a.out.join(format!("{name}.{}", data::CUBE_EXT)), &cube)?;
        let rgb = crf_project(&cube, &crf)?;
        export::write_rgb_png(&a.out.join(format!("{name}_rgb.png")), &rgb)?;
    }
    println!("wrote {} scenes of {}x{}x{} to {}", a.scenes, a.bands, a.size, a.size, a.out.display());
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn log_line(rec: &LogRecord, deterministic: bool) -> String {
    let mut rec = rec.clone();
    if deterministic {
        rec.wall_ms = 0.0;
    }
    serde_json::to_string(&rec).expect("log record serializes")
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = ExperimentConfig::resolve(a.config.as_deref(), &a.overrides)?;
    let split = data::load_split(&cfg.data)?;
    let out = &cfg.out_dir;
    let ckpt_dir = out.join("ckpt");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    fs::write(out.join("config.json"), cfg.to_json())?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::load(p, &split.train)?;
            if t.config != cfg.train || t.model != cfg.model {
                return Err(ConfigError(format!("checkpoint {} was trained with a different config", p.display())).into());
            }
            t
        }
        None => Trainer::new(cfg.train.clone(), cfg.model.clone(), &split.train)?,
    };
    let log_path = out.join("log.jsonl");
    let log_file = if a.resume.is_some() {
        fs::OpenOptions::new().create(true).append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .with_context(|| format!("opening {}", log_path.display()))?;
    let mut log = BufWriter::new(log_file);
    let mut evals = Vec::new();
    let every = cfg.train.checkpoint_every;
    let eval_every = cfg.train.eval_every;
    eprintln!(
        "training {} parameters for {} steps on {} scenes",
        trainer.frn.param_count(),
        cfg.train.total_steps,
        split.train.scenes.len()
    );
    trainer.run(|t, rec| {
        writeln!(log, "{}", log_line(rec, a.deterministic)).map_err(|e| FrnError::Io {
            path: log_path.clone(),
            source: e,
        })?;
        let done = rec.step + 1;
        if every > 0 && done % every == 0 && done < t.config.total_steps {
            t.save(ckpt_dir.join(format!("step_{done:06}.frnw")))?;
        }
        if eval_every > 0 && done % eval_every == 0 {
            let r = t.evaluate(&split.eval.scenes)?;
            eprintln!("step {done}: loss {:.5}, eval PSNR {:.2} dB", rec.loss, r.mean.psnr_db);
            evals.push(json!({ "step": done, "metrics": r.mean }));
        }
        Ok(())
    })?;
    log.flush()?;
    trainer.save(ckpt_dir.join("final.frnw"))?;
    let report = trainer.evaluate(&split.eval.scenes)?;
    let baseline = evaluate_baseline(&split.eval.scenes, &split.crf)?;
    write_json(
        &out.join("report.json"),
        &json!({
            "step": trainer.step,
            "frn": report,
            "pinv_baseline": baseline.mean,
            "evals": evals,
        }),
    )?;
    println!(
        "PSNR {:.2} dB (pseudo-inverse {:.2} dB), SSIM {:.4}, checkpoint {}",
        report.mean.psnr_db,
        baseline.mean.psnr_db,
        report.mean.ssim,
        ckpt_dir.join("final.frnw").display()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let cubes = data::load_cubes(&a.data, None)?;
    let bands = model.meta.data_bands;
    if let Some((name, c)) = cubes.iter().find(|(_, c)| c.bands() != bands) {
        return Err(DataError(format!(
            "scene {name} has {} bands but the checkpoint predicts {bands}",
            c.bands()
        ))
        .into());
    }
    let dcfg = DataConfig {
        dir: a.data.clone(),
        crf: a.crf.clone(),
        ..Default::default()
    };
    let crf = data::load_crf(&dcfg, bands)?;
    let wavelengths: Vec<Vec<f32>> = cubes
        .iter()
        .map(|(_, c)| c.wavelengths.clone().unwrap_or_else(|| linear_wavelengths(bands, 400.0, 700.0)))
        .collect();
    let ds = Dataset::from_cubes(cubes, &crf)?;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let report = model.evaluate(&ds.scenes)?;
    let baseline = evaluate_baseline(&ds.scenes, &crf)?;
    write_json(
        &a.out.join("report.json"),
        &json!({ "frn": report, "pinv_baseline": baseline.mean }),
    )?;
    if !a.no_images {
        for (scene, nm) in ds.scenes.iter().zip(&wavelengths) {
            let pred = model.predict(&scene.rgb)?;
            let dir = a.out.join("img").join(&scene.name);
            export::write_bands(&dir.join("pred"), &pred)?;
            export::write_bands(&dir.join("gt"), &scene.cube)?;
            export::write_bands(&dir.join("residual"), &export::abs_residual(&pred, &scene.cube))?;
            for (y, x) in export::probe_pixels(scene.cube.dim(1), scene.cube.dim(2)) {
                let path = dir.join(format!("curve_y{y}_x{x}.csv"));
                fs::write(&path, export::spectral_curve(&scene.cube, &pred, nm, y, x))?;
            }
        }
    }
    for s in &report.scenes {
        println!(
            "{:<16} PSNR {:6.2}  RMSE {:6.3}  UIQI {:.4}  SSIM {:.4}",
            s.name, s.metrics.psnr_db, s.metrics.rmse_255, s.metrics.uiqi, s.metrics.ssim
        );
    }
    println!(
        "{:<16} PSNR {:6.2}  RMSE {:6.3}  UIQI {:.4}  SSIM {:.4}",
        "mean", report.mean.psnr_db, report.mean.rmse_255, report.mean.uiqi, report.mean.ssim
    );
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let cfg = ExperimentConfig::resolve(a.config.as_deref(), &a.overrides)?;
    let split = data::load_split(&cfg.data)?;
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    fs::write(cfg.out_dir.join("config.json"), cfg.to_json())?;
    let eval = (cfg.data.holdout > 0).then_some(&split.eval);
    let mut table = run_ablation(a.axis, &a.values, &cfg.train, &cfg.model, &split.train, eval, |row| {
        eprintln!("{}: PSNR {:.2} dB after {:.0} s", row.label, row.metrics.psnr_db, row.seconds);
    })
    .map_err(|e| match e {
        FrnError::Contract(m) => anyhow::Error::new(ConfigError(m)),
        e => e.into(),
    })?;
    if a.deterministic {
        table.rows.iter_mut().for_each(|r| r.seconds = 0.0);
    }
    let stem = format!("ablation_{}", a.axis);
    let md = table.to_markdown();
    fs::write(cfg.out_dir.join(format!("{stem}.md")), &md)?;
    fs::write(cfg.out_dir.join(format!("{stem}.csv")), table.to_csv())?;
    write_json(&cfg.out_dir.join(format!("{stem}.json")), &table)?;
    print!("{md}");
    if let Some(trend) = table.trend() {
        println!("\n{trend}");
    }
    Ok(())
}
