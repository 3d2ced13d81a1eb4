//! Training loop: sample → augment → forward → loss → backward → step → EMA.
//!
//! Every random draw for batch item `i` of step `k` comes from a generator
//! seeded by `(seed, k, i)`, so batches are independent of worker count and a
//! resumed run replays exactly the batches an uninterrupted run would see.
//! Gradients are computed per item in parallel and summed in item order.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::Instant;

use lkdn_core::autodiff::{GradMap, Graph};
use lkdn_core::data::{self, images_to_tensor, Augment, Image, PatchPair};
use lkdn_core::optim::{self, Ema, LossKind, Optimizer, EMA_DECAY};
use lkdn_core::{Model, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint::{Checkpoint, OptimizerState};
use crate::config::{RunConfig, StagePlan, TrainData};
use crate::error::{CliError, Result};
use crate::image_io;

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one `(seed, stream, item)` triple.
pub fn item_rng(seed: u64, stream: u64, item: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ stream) ^ item))
}

const SYNTHETIC_STREAM: u64 = u64::MAX;

/// Training and validation HR images.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub train: Vec<Image>,
    pub val: Vec<Image>,
}

impl Corpus {
    pub fn load(run: &RunConfig) -> Result<Self> {
        let (mut train, generated_val) = match &run.data {
            TrainData::Directory(dir) => {
                let files = image_io::list_pngs(dir)?;
                let images = files.iter().map(|p| image_io::load_png(p)).collect::<Result<Vec<_>>>()?;
                (images, None)
            }
            TrainData::Synthetic { count, size } => {
                let gen = |i: usize| data::synthetic_image(*size, *size, &mut item_rng(run.seed, SYNTHETIC_STREAM, i as u64));
                let train = (0..*count).map(gen).collect();
                let val = (*count..*count + run.val_count).map(gen).collect();
                (train, Some(val))
            }
        };
        let val = match (&run.val_dir, generated_val) {
            (Some(dir), _) => image_io::list_pngs(dir)?
                .iter()
                .map(|p| image_io::load_png(p))
                .collect::<Result<Vec<_>>>()?,
            (None, Some(val)) => val,
            (None, None) => {
                let keep = train.len().saturating_sub(run.val_count);
                train.split_off(keep)
            }
        };
        if train.is_empty() {
            return Err(CliError::usage("no training images"));
        }
        let min = run.stages.iter().map(|s| s.lr_patch * run.model.scale).max().unwrap_or(0);
        if let Some(small) = train.iter().find(|i| i.height() < min || i.width() < min) {
            return Err(CliError::usage(format!(
                "training image {}x{} is smaller than the {min}px HR patch",
                small.height(),
                small.width()
            )));
        }
        Ok(Corpus { train, val })
    }
}

/// One training batch as per-item `(1, 3, h, w)` tensors.
pub struct Batch {
    pub step: u64,
    pub lr: Vec<Tensor>,
    pub hr: Vec<Tensor>,
}

pub fn sample_item(train: &[Image], scale: usize, plan: &StagePlan, seed: u64, step: u64, item: u64) -> Result<PatchPair> {
    let mut rng = item_rng(seed, step, item);
    let index = rand::Rng::gen_range(&mut rng, 0..train.len());
    let pair = data::sample_patch_pair(&train[index], scale, plan.lr_patch, &mut rng)?;
    Ok(data::augment(&pair, Augment::random(&mut rng)))
}

pub fn make_batch(train: &[Image], scale: usize, plan: &StagePlan, seed: u64, step: u64) -> Result<Batch> {
    let pairs = (0..plan.batch_size as u64)
        .into_par_iter()
        .map(|i| sample_item(train, scale, plan, seed, step, i))
        .collect::<Result<Vec<_>>>()?;
    let to_tensor = |img: &Image| images_to_tensor(std::slice::from_ref(img)).map_err(CliError::from);
    Ok(Batch {
        step,
        lr: pairs.iter().map(|p| to_tensor(&p.lr)).collect::<Result<_>>()?,
        hr: pairs.iter().map(|p| to_tensor(&p.hr)).collect::<Result<_>>()?,
    })
}

/// Mean loss over the batch and its gradient for every parameter.
pub fn batch_gradients(model: &Model, batch: &Batch, kind: LossKind) -> Result<(f32, GradMap)> {
    let per_item = batch
        .lr
        .par_iter()
        .zip(&batch.hr)
        .map(|(lr, hr)| -> Result<(f32, GradMap)> {
            let mut tape = Tape::new();
            let x = tape.input(lr.clone());
            let y = model.forward(&mut tape, &x)?;
            let l = optim::loss(&mut tape, &y, hr, kind)?;
            let value = tape.value(&l).item()?;
            if !value.is_finite() {
                return Err(lkdn_core::Error::NonFinite(format!("training loss at step {}", batch.step)).into());
            }
            Ok((value, tape.backward(l)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = 1.0 / per_item.len() as f32;
    let mut loss = 0.0f32;
    let mut sum: BTreeMap<String, Tensor> = BTreeMap::new();
    for (l, grads) in &per_item {
        loss += l * inv;
        for (name, g) in grads.iter() {
            match sum.get_mut(name) {
                Some(acc) => acc.add_scaled_(g, inv)?,
                None => {
                    sum.insert(name.to_string(), g.map(|v| v * inv));
                }
            }
        }
    }
    Ok((loss, GradMap::from_entries(sum)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Validation {
    /// Mean Y PSNR of the model (EMA weights) on the held-out images.
    pub psnr: f64,
    /// Mean Y PSNR of bicubic upscaling on the same images.
    pub bicubic_psnr: f64,
}

/// Per-step training telemetry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    /// Steps completed, including this one.
    pub step: u64,
    pub loss: f32,
    pub lr: f64,
    pub elapsed_s: f64,
}

pub struct Trainer {
    pub run: RunConfig,
    pub model: Model,
    pub ema: Ema,
    pub optimizer: Optimizer,
    /// Steps completed.
    pub step: u64,
    pub corpus: Corpus,
}

impl Trainer {
    pub fn new(run: RunConfig, corpus: Corpus) -> Result<Self> {
        let model = Model::init(run.model, run.seed)?;
        let ema = Ema::new(model.params(), EMA_DECAY);
        let optimizer = Optimizer::new(run.optimizer);
        Ok(Trainer {
            run,
            model,
            ema,
            optimizer,
            step: 0,
            corpus,
        })
    }

    pub fn resume(run: RunConfig, corpus: Corpus, ckpt: Checkpoint) -> Result<Self> {
        if ckpt.config != run.model {
            return Err(CliError::usage("checkpoint model does not match the run config"));
        }
        if let Some(seed) = ckpt.meta.get("seed") {
            if seed.parse::<u64>().ok() != Some(run.seed) {
                return Err(CliError::usage(format!(
                    "checkpoint was trained with seed {seed}, config has {}",
                    run.seed
                )));
            }
        }
        let mut model = Model::init(run.model, run.seed)?;
        model.load_params(ckpt.params)?;
        let ema = match ckpt.ema {
            Some(shadow) => Ema::from_shadow(shadow, EMA_DECAY),
            None => Ema::new(model.params(), EMA_DECAY),
        };
        let mut optimizer = Optimizer::new(run.optimizer);
        if let Some(state) = ckpt.optimizer {
            if state.kind != run.optimizer {
                return Err(CliError::usage(format!(
                    "checkpoint optimizer is {}, config asks for {}",
                    state.kind.as_str(),
                    run.optimizer.as_str()
                )));
            }
            optimizer.load_state(state.step, state.tensors)?;
        }
        Ok(Trainer {
            run,
            model,
            ema,
            optimizer,
            step: ckpt.step,
            corpus,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let named = |ps: Vec<&lkdn_core::Param>| ps.into_iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        let mut ckpt = Checkpoint::new(self.run.model, named(self.model.params()));
        ckpt.step = self.step;
        ckpt.ema = Some(self.ema.shadow().clone());
        ckpt.optimizer = Some(OptimizerState {
            kind: self.optimizer.kind(),
            step: self.optimizer.step_count(),
            tensors: self.optimizer.state().clone(),
        });
        ckpt.meta.insert("seed".into(), self.run.seed.to_string());
        ckpt
    }

    /// Model carrying the EMA weights, for evaluation.
    pub fn ema_model(&self) -> Result<Model> {
        let mut m = self.model.clone();
        self.ema.copy_to(&mut m.params_mut())?;
        Ok(m)
    }

    pub fn apply(&mut self, batch: &Batch) -> Result<StepRecord> {
        let start = Instant::now();
        let plan = *self.run.stage_at(batch.step)?;
        let (loss, grads) = batch_gradients(&self.model, batch, plan.stage.loss)?;
        self.optimizer.step(&mut self.model.params_mut(), &grads, plan.stage.lr)?;
        self.ema.update(self.model.params())?;
        self.step = batch.step + 1;
        Ok(StepRecord {
            step: self.step,
            loss,
            lr: plan.stage.lr,
            elapsed_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `end` steps are complete, preparing batches on a
    /// background thread. `observe` sees every step and may stop the run by
    /// returning an error.
    pub fn train_until(&mut self, end: u64, mut observe: impl FnMut(&Trainer, &StepRecord) -> Result<()>) -> Result<()> {
        let end = end.min(self.run.total_steps());
        if self.step >= end {
            return Ok(());
        }
        let (tx, rx) = mpsc::sync_channel::<Result<Batch>>(self.run.prefetch);
        // the producer borrows the training images while `self` is mutated
        let images = std::mem::take(&mut self.corpus.train);
        let (train, scale, seed, start) = (&images, self.run.model.scale, self.run.seed, self.step);
        let stages = self.run.clone();
        let result = std::thread::scope(|scope| {
            scope.spawn(move || {
                for step in start..end {
                    let batch = stages
                        .stage_at(step)
                        .and_then(|plan| make_batch(train, scale, plan, seed, step));
                    let failed = batch.is_err();
                    if tx.send(batch).is_err() || failed {
                        break;
                    }
                }
            });
            // dropping the receiver on error stops the producer
            let rx = rx;
            let mut done = start;
            while done < end {
                let batch = rx
                    .recv()
                    .map_err(|_| CliError::usage("batch producer stopped unexpectedly"))??;
                let record = self.apply(&batch)?;
                observe(self, &record)?;
                done = record.step;
            }
            Ok(())
        });
        self.corpus.train = images;
        result
    }

    pub fn validate(&self) -> Result<Option<Validation>> {
        if self.corpus.val.is_empty() {
            return Ok(None);
        }
        let model = self.ema_model()?;
        validate_model(&model, &self.corpus.val).map(Some)
    }
}

/// Mean PSNR of `model` and of bicubic upscaling on held-out HR images.
pub fn validate_model(model: &Model, hr_images: &[Image]) -> Result<Validation> {
    let scale = model.config.scale;
    let rows = hr_images
        .par_iter()
        .map(|hr| -> Result<(f64, f64)> {
            let hr = data::modcrop(hr, scale)?;
            let lr = data::degrade(&hr, scale)?;
            let sr = Image::from_tensor(&model.infer(&lr.to_tensor())?, 0)?;
            let bicubic = data::bicubic_resize(&lr, hr.height(), hr.width())?;
            Ok((data::psnr(&sr, &hr, scale)?, data::psnr(&bicubic, &hr, scale)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = rows.len() as f64;
    Ok(Validation {
        psnr: rows.iter().map(|r| r.0).sum::<f64>() / n,
        bicubic_psnr: rows.iter().map(|r| r.1).sum::<f64>() / n,
    })
}
