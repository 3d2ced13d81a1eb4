//! One function per subcommand. Each returns a `CliError` whose exit code is
//! the process status.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use lkdn_core::autodiff::GradMap;
use lkdn_core::model::{count_multadds, count_params};
use lkdn_core::optim::{Optimizer, OptimizerKind};
use lkdn_core::reparam::{fuse_model, FusionReport};
use lkdn_core::{data, LkdnConfig, Model, Param, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::{load_model_config, RunConfig};
use crate::error::{CliError, Result};
use crate::eval::{evaluate_dir, EvalTable, Upscaler};
use crate::image_io;
use crate::train::{Corpus, Trainer, Validation};

/// Ground-truth resolution at which Multi-Adds are reported.
pub const COUNT_RESOLUTION: (usize, usize) = (720, 1280);

pub const CHECKPOINT_NAME: &str = "latest.ckpt";
pub const METRICS_NAME: &str = "metrics.csv";
const METRICS_HEADER: &str = "step,loss,lr,step_seconds,wall_clock_s,val_psnr,val_bicubic_psnr";

/// Rebuilds the inference model (EMA weights when present) of a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = Model::from_params(ckpt.config, ckpt.inference_params().clone())
        .map_err(|e| CliError::format(path, e.to_string()))?;
    Ok((model, ckpt))
}

pub fn train(config: &Path, resume: Option<&Path>) -> Result<Trainer> {
    let run = RunConfig::load(config)?;
    let corpus = Corpus::load(&run)?;
    log::info!(
        "{} training images, {} validation images",
        corpus.train.len(),
        corpus.val.len()
    );
    let mut trainer = match resume {
        Some(path) => Trainer::resume(run.clone(), corpus, Checkpoint::load(path)?)?,
        None => Trainer::new(run.clone(), corpus)?,
    };
    if trainer.step > 0 {
        log::info!("resuming at step {}", trainer.step);
    }
    fs::create_dir_all(&run.out_dir).map_err(|e| CliError::output(&run.out_dir, e))?;
    let metrics_path = run.out_dir.join(METRICS_NAME);
    let mut metrics = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)
        .map_err(|e| CliError::output(&metrics_path, e))?;
    let empty = metrics.metadata().map(|m| m.len() == 0).unwrap_or(true);
    if empty {
        writeln!(metrics, "{METRICS_HEADER}").map_err(|e| CliError::output(&metrics_path, e))?;
    }

    let total = run.total_steps();
    let ckpt_path = run.out_dir.join(CHECKPOINT_NAME);
    let clock = Instant::now();
    let every = |n: u64, step: u64| n > 0 && step.is_multiple_of(n);
    let result = trainer.train_until(total, |t, rec| {
        let last = rec.step == total;
        let val = if every(run.eval_every, rec.step) || last {
            t.validate()?
        } else {
            None
        };
        if every(run.log_every, rec.step) || val.is_some() || last {
            let (vp, vb) = val
                .map(|v: Validation| (format!("{:.4}", v.psnr), format!("{:.4}", v.bicubic_psnr)))
                .unwrap_or_default();
            writeln!(
                metrics,
                "{},{:.6},{:e},{:.4},{:.2},{vp},{vb}",
                rec.step,
                rec.loss,
                rec.lr,
                rec.elapsed_s,
                clock.elapsed().as_secs_f64()
            )
            .map_err(|e| CliError::output(&metrics_path, e))?;
            match val {
                Some(v) => log::info!(
                    "step {:>8}  loss {:.5}  lr {:.1e}  val {:.3} dB (bicubic {:.3} dB)",
                    rec.step,
                    rec.loss,
                    rec.lr,
                    v.psnr,
                    v.bicubic_psnr
                ),
                None => log::info!("step {:>8}  loss {:.5}  lr {:.1e}", rec.step, rec.loss, rec.lr),
            }
        }
        if every(run.checkpoint_every, rec.step) || last {
            t.checkpoint().save(&ckpt_path)?;
            log::info!("saved {}", ckpt_path.display());
        }
        Ok(())
    });
    if let Err(e) = result {
        log::error!(
            "training stopped after step {}: {e}; the last checkpoint at {} is kept",
            trainer.step,
            ckpt_path.display()
        );
        return Err(e);
    }
    Ok(trainer)
}

pub fn eval(ckpt: Option<&Path>, data_dir: &Path, scale: usize, csv: Option<&Path>) -> Result<EvalTable> {
    let loaded = ckpt.map(load_model).transpose()?;
    let upscaler = match &loaded {
        Some((m, _)) => Upscaler::Model(m),
        None => Upscaler::Bicubic,
    };
    let table = evaluate_dir(data_dir, scale, upscaler)?;
    if let Some(path) = csv {
        fs::write(path, table.to_csv()).map_err(|e| CliError::output(path, e))?;
    }
    Ok(table)
}

pub fn infer(ckpt: &Path, input: &Path, output: &Path) -> Result<()> {
    let (model, _) = load_model(ckpt)?;
    let lr = image_io::load_png(input)?;
    let sr = model.infer(&lr.to_tensor())?;
    image_io::save_png(&data::Image::from_tensor(&sr, 0)?, output)
}

/// Fuses parameters and EMA shadows. The optimizer state belongs to the
/// train-mode layout and is dropped.
pub fn fuse(input: &Path, output: &Path) -> Result<FusionReport> {
    let ckpt = Checkpoint::load(input)?;
    if ckpt.config.fused {
        log::warn!("{} is already fused; writing it unchanged", input.display());
        if input != output {
            ckpt.save(output)?;
        }
        return Ok(FusionReport::default());
    }
    let rebuild = |values: &BTreeMap<String, Tensor>| {
        Model::from_params(ckpt.config, values.clone()).map_err(|e| CliError::format(input, e.to_string()))
    };
    let weights = |m: &Model| -> BTreeMap<String, Tensor> {
        m.params().into_iter().map(|p| (p.name.clone(), p.value.clone())).collect()
    };
    let (fused, mut report) = fuse_model(&rebuild(&ckpt.params)?)?;
    let ema = match &ckpt.ema {
        Some(shadow) => {
            let (fused_ema, ema_report) = fuse_model(&rebuild(shadow)?)?;
            report = ema_report;
            Some(weights(&fused_ema))
        }
        None => None,
    };
    let mut out = Checkpoint::new(fused.config, weights(&fused));
    out.step = ckpt.step;
    out.ema = ema;
    out.meta = ckpt.meta.clone();
    out.save(output)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountRow {
    pub label: &'static str,
    pub config: LkdnConfig,
    pub params: usize,
    pub multadds: u64,
}

pub fn count(config: &LkdnConfig) -> Result<Vec<CountRow>> {
    let (h, w) = COUNT_RESOLUTION;
    let row = |label, c: LkdnConfig| -> Result<CountRow> {
        Ok(CountRow {
            label,
            config: c,
            params: count_params(&c)?,
            multadds: count_multadds(&c, h, w)?,
        })
    };
    let mut rows = vec![row(if config.fused { "fused" } else { "train" }, *config)?];
    if config.has_fusable_layers() {
        rows.push(row("fused", config.fused_config())?);
    }
    Ok(rows)
}

pub fn format_count(rows: &[CountRow]) -> String {
    let (h, w) = COUNT_RESOLUTION;
    let mut out = format!("{:<6}  {:>10}  {:>8}  {:>16}\n", "mode", "params", "K", format!("G Multi-Adds {w}x{h}"));
    for r in rows {
        out.push_str(&format!(
            "{:<6}  {:>10}  {:>8.1}  {:>16.2}\n",
            r.label,
            r.params,
            r.params as f64 / 1e3,
            r.multadds as f64 / 1e9
        ));
    }
    out
}

pub fn count_config_file(path: &Path) -> Result<Vec<CountRow>> {
    count(&load_model_config(path)?)
}

/// Writes `<stem>x<scale>.png` bicubic LR images for every PNG in `input`.
pub fn degrade(input: &Path, output: &Path, scale: usize) -> Result<usize> {
    if !(2..=4).contains(&scale) {
        return Err(CliError::usage(format!("scale must be 2, 3 or 4, got {scale}")));
    }
    let files = image_io::list_pngs(input)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("no PNG images in {}", input.display())));
    }
    fs::create_dir_all(output).map_err(|e| CliError::output(output, e))?;
    for path in &files {
        let hr = data::modcrop(&image_io::load_png(path)?, scale)?;
        let lr = data::degrade(&hr, scale)?;
        let name = format!("{}x{scale}.png", image_io::stem(path));
        image_io::save_png(&lr, &output.join(name))?;
    }
    Ok(files.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// f(θ) = θ², θ₀ = 5, η = 0.01.
    Quadratic,
    /// LKDN-tiny on 16 synthetic images, seed 0.
    TinySr,
}

impl std::str::FromStr for Objective {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "quadratic" => Ok(Objective::Quadratic),
            "tiny-sr" | "tiny_sr" => Ok(Objective::TinySr),
            other => Err(CliError::usage(format!("unknown objective `{other}` (quadratic | tiny-sr)"))),
        }
    }
}

pub const BENCH_OPTIMIZERS: [OptimizerKind; 2] = [OptimizerKind::Adan, OptimizerKind::Adam];

/// Loss before every step and after the last, so entry 0 is the start.
pub fn quadratic_curve(kind: OptimizerKind, steps: u64) -> Result<Vec<f64>> {
    let mut p = Param::new("theta", Tensor::<f64>::scalar(5.0));
    let mut opt = Optimizer::<f64>::new(kind);
    let mut curve = Vec::with_capacity(steps as usize + 1);
    for _ in 0..steps {
        let theta = p.value.item()?;
        curve.push(theta * theta);
        let grads = GradMap::from_entries([("theta".to_string(), Tensor::scalar(2.0 * theta))]);
        opt.step(&mut [&mut p], &grads, 0.01)?;
    }
    let theta = p.value.item()?;
    curve.push(theta * theta);
    Ok(curve)
}

/// Config text of the tiny-sr benchmark and the trainability check.
pub fn tiny_sr_config(steps: u64, optimizer: OptimizerKind) -> String {
    format!(
        "preset = tiny\nscale = {TINY_SR_SCALE}\nsynthetic = 16\nsynthetic_size = {TINY_SR_IMAGE}\n\
         steps = {steps}\nlr = {TINY_SR_LR:e}\nbatch_size = {TINY_SR_BATCH}\nlr_patch = {TINY_SR_PATCH}\n\
         optimizer = {}\nseed = 0\n",
        optimizer.as_str()
    )
}

pub const TINY_SR_SCALE: usize = 2;
pub const TINY_SR_IMAGE: usize = 128;
pub const TINY_SR_LR: f64 = 5e-3;
pub const TINY_SR_BATCH: usize = 16;
pub const TINY_SR_PATCH: usize = 24;

/// Training loss of every step.
pub fn tiny_sr_curve(kind: OptimizerKind, steps: u64) -> Result<Vec<f64>> {
    let run = RunConfig::parse(&tiny_sr_config(steps, kind))?;
    let corpus = Corpus::load(&run)?;
    let mut trainer = Trainer::new(run, corpus)?;
    let mut curve = Vec::with_capacity(steps as usize);
    trainer.train_until(steps, |_, rec| {
        curve.push(rec.loss as f64);
        Ok(())
    })?;
    Ok(curve)
}

/// CSV with one row per step and one loss column per optimizer.
pub fn optbench(objective: Objective, steps: u64) -> Result<String> {
    let curves = BENCH_OPTIMIZERS
        .iter()
        .map(|&k| match objective {
            Objective::Quadratic => quadratic_curve(k, steps),
            Objective::TinySr => tiny_sr_curve(k, steps),
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = String::from("step");
    for k in BENCH_OPTIMIZERS {
        out.push(',');
        out.push_str(k.as_str());
    }
    out.push('\n');
    let rows = curves.iter().map(Vec::len).min().unwrap_or(0);
    for i in 0..rows {
        out.push_str(&i.to_string());
        for c in &curves {
            out.push_str(&format!(",{:e}", c[i]));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `text` to `path`, or to standard output when `path` is absent.
pub fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = File::create(p).map_err(|e| CliError::output(p, e))?;
            f.write_all(text.as_bytes()).map_err(|e| CliError::output(p, e))
        }
        None => {
            print!("{text}");
            std::io::stdout().flush().map_err(|e| CliError::output(Path::new("<stdout>"), e))
        }
    }
}
