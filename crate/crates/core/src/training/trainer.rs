//! The epoch loop: sample, augment, forward, distillation loss, Adam.

use std::fmt::Write as _;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;

use super::config::RunConfig;
use super::data::{mel_batch, mel_batch_with, Dataset, Sampler};
use super::loss::{kd_loss, teacher_targets};
use super::mixup::{mixup, KdBatch};
use super::schedule::{lr_at, tau_at};
use super::adam::{Adam, AdamConfig};
use crate::blocks::{apply_bn_updates, ForwardCtx, BN_MOMENTUM};
use crate::container::TeacherLogits;
use crate::error::{Error, Result};
use crate::frontend::augment::{perturb_mel_range, waveform_augment};
use crate::frontend::{MelConfig, MelExtractor, Waveform};
use crate::network::{Model, ModelConfig};
use crate::params::GradStore;
use crate::tensor::ops::bce_with_logits;
use crate::tensor::tape::Tape;
use crate::tensor::Tensor;

/// Seed offset separating the dropout stream from the data stream.
const DROPOUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub tau: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub tau: f64,
    pub mean_loss: f64,
    /// Mean `|z_S − z_T|` over the unaugmented training clips.
    pub teacher_deviation: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trace {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl Trace {
    /// `epoch,step,lr,tau,loss`.
    pub fn steps_csv(&self) -> String {
        let mut s = String::from("epoch,step,lr,tau,loss\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{:e},{},{:.9}", r.epoch, r.step, r.lr, r.tau, r.loss);
        }
        s
    }

    /// `epoch,lr,tau,mean_loss,teacher_deviation`.
    pub fn epochs_csv(&self) -> String {
        let mut s = String::from("epoch,lr,tau,mean_loss,teacher_deviation\n");
        for r in &self.epochs {
            let dev = r.teacher_deviation.map_or(String::new(), |d| format!("{d:.9}"));
            let _ = writeln!(s, "{},{:e},{},{:.9},{}", r.epoch, r.lr, r.tau, r.mean_loss, dev);
        }
        s
    }
}

/// Unperturbed spectrogram settings for a model.
pub fn mel_config_for(model: &ModelConfig) -> MelConfig {
    MelConfig {
        n_mels: model.n_mels,
        ..MelConfig::default()
    }
}

/// Unaugmented log-mels of every clip, `1 × 1 × F × T` each.
pub fn dataset_mels(data: &Dataset, mel: &MelConfig) -> Result<Vec<Tensor<f32>>> {
    let ex = MelExtractor::new(mel)?;
    data.clips.iter().map(|c| ex.compute(&c.wave)).collect()
}

/// Evaluation-mode logits `N × n_classes`, computed in chunks of `batch`.
pub fn predict_logits(model: &Model<f32>, mels: &[Tensor<f32>], batch: usize) -> Result<Tensor<f32>> {
    if mels.is_empty() {
        return Err(Error::Data("nothing to predict".into()));
    }
    let mut rows = Vec::new();
    for chunk in mels.chunks(batch.max(1)) {
        let z = model.predict(&Tensor::stack_batch(chunk)?)?;
        rows.extend_from_slice(z.data());
    }
    Tensor::new(vec![mels.len(), model.config().n_classes], rows)
}

/// Teacher rows in dataset order.
fn align_teacher(data: &Dataset, teacher: &TeacherLogits) -> Result<Tensor<f32>> {
    if teacher.n_classes() != data.n_classes {
        return Err(Error::Data(format!(
            "teacher has {} classes, dataset {}",
            teacher.n_classes(),
            data.n_classes
        )));
    }
    let mut rows = Vec::with_capacity(data.len() * data.n_classes);
    for c in &data.clips {
        let r = teacher
            .row(&c.id)
            .ok_or_else(|| Error::Data(format!("no teacher logits for clip {}", c.id)))?;
        rows.extend_from_slice(r);
    }
    Tensor::new(vec![data.len(), data.n_classes], rows)
}

fn gather(t: &Tensor<f32>, idx: &[usize]) -> Result<Tensor<f32>> {
    let per = t.numel() / t.shape()[0];
    let mut out = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        out.extend_from_slice(&t.data()[i * per..(i + 1) * per]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, out)
}

fn partner(n: usize, rng: &mut StdRng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

fn mix_batch(b: KdBatch<f32>, coef: f64, rng: &mut StdRng) -> Result<KdBatch<f32>> {
    let p = partner(b.len(), rng);
    let other = KdBatch {
        x: b.x.permute_batch(&p)?,
        y: b.y.permute_batch(&p)?,
        teacher: b.teacher.as_ref().map(|t| t.permute_batch(&p)).transpose()?,
    };
    Ok(mixup(&b, &other, coef, rng)?.0)
}

/// Mean `|a − b|`.
pub fn mean_abs_deviation(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    let d = a.zip_map(b, |x, y| (x - y).abs())?;
    Ok(d.data().iter().map(|&v| v as f64).sum::<f64>() / d.numel() as f64)
}

/// Mean label BCE of evaluation-mode predictions over the whole dataset.
pub fn dataset_bce(model: &Model<f32>, data: &Dataset, mels: &[Tensor<f32>], batch: usize) -> Result<f64> {
    let z = predict_logits(model, mels, batch)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    Ok(bce_with_logits(&z, &data.targets(&idx)?)? as f64)
}

/// Trains `model` in place for `run.schedule.epochs` epochs.
///
/// `on_epoch` runs after every epoch with the updated model. Runs are
/// deterministic for a fixed `run.train.seed`.
pub fn train_loop(
    model: &mut Model<f32>,
    data: &Dataset,
    run: &RunConfig,
    teacher: Option<&TeacherLogits>,
    sampler: &mut dyn Sampler,
    mut on_epoch: impl FnMut(&Model<f32>, &EpochRecord) -> Result<()>,
) -> Result<Trace> {
    run.validate()?;
    let tc = &run.train;
    if data.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    if data.n_classes != model.config().n_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model {}",
            data.n_classes,
            model.config().n_classes
        )));
    }
    if tc.kd_lambda < 1.0 && teacher.is_none() {
        return Err(Error::Config(format!("kd_lambda {} < 1 needs teacher logits", tc.kd_lambda)));
    }
    let teacher_logits = teacher.map(|t| align_teacher(data, t)).transpose()?;
    let soft = teacher_logits.as_ref().map(teacher_targets);

    let mel = mel_config_for(model.config());
    let extractor = MelExtractor::new(&mel)?;
    let clean_mels = dataset_mels(data, &mel)?;
    let waveform_stage = tc.mixup_waveform || tc.roll_ms > 0.0 || tc.gain_db > 0.0;
    let bs = tc.batch_size.min(data.len());
    let mut rng = StdRng::seed_from_u64(tc.seed);
    let mut drop_rng = StdRng::seed_from_u64(tc.seed ^ DROPOUT_STREAM);
    let mut adam = Adam::new(AdamConfig {
        weight_decay: tc.weight_decay,
        ..AdamConfig::default()
    });
    let mut grads = GradStore::zeros_like(&model.params);
    let mut trace = Trace::default();
    let mut global = 0;

    for epoch in 0..run.schedule.epochs {
        let order = sampler.epoch_order(data.len(), &mut rng);
        if order.is_empty() {
            return Err(Error::Data("sampler produced an empty epoch".into()));
        }
        // full batches only; the remainder of an epoch is skipped
        let steps = if tc.steps_per_epoch > 0 { tc.steps_per_epoch } else { (order.len() / bs).max(1) };
        let tau = tau_at(epoch, &run.schedule);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for step in 0..steps {
            lr = lr_at(epoch, step as f64 / steps as f64, &run.schedule);
            let idx: Vec<usize> = (0..bs).map(|k| order[(step * bs + k) % order.len()]).collect();
            let y = data.targets(&idx)?;
            let t = soft.as_ref().map(|s| gather(s, &idx)).transpose()?;

            let mut batch = if waveform_stage || tc.mel_perturb {
                let mut waves: Vec<Waveform> = idx
                    .iter()
                    .map(|&i| {
                        let w = &data.clips[i].wave;
                        if tc.roll_ms > 0.0 || tc.gain_db > 0.0 {
                            waveform_augment(w, tc.roll_ms, tc.gain_db, &mut rng)
                        } else {
                            w.clone()
                        }
                    })
                    .collect();
                let mut y = y;
                let mut t = t;
                if tc.mixup_waveform {
                    let n = waves[0].samples.len();
                    let flat: Vec<f32> = waves.iter().flat_map(|w| w.samples.iter().copied()).collect();
                    let mixed = mix_batch(
                        KdBatch {
                            x: Tensor::new(vec![bs, n], flat)?,
                            y,
                            teacher: t,
                        },
                        tc.mixup_coef,
                        &mut rng,
                    )?;
                    for (w, row) in waves.iter_mut().zip(mixed.x.data().chunks(n)) {
                        w.samples.copy_from_slice(row);
                    }
                    y = mixed.y;
                    t = mixed.teacher;
                }
                let refs: Vec<&Waveform> = waves.iter().collect();
                let x = if tc.mel_perturb {
                    let cfgs: Vec<MelConfig> = (0..bs).map(|_| perturb_mel_range(&mel, &mut rng)).collect();
                    mel_batch_with(&refs, &cfgs)?
                } else {
                    mel_batch(&refs, &extractor)?
                };
                KdBatch { x, y, teacher: t }
            } else {
                let picked: Vec<Tensor<f32>> = idx.iter().map(|&i| clean_mels[i].clone()).collect();
                KdBatch {
                    x: Tensor::stack_batch(&picked)?,
                    y,
                    teacher: t,
                }
            };
            if tc.mixup_spectrogram {
                batch = mix_batch(batch, tc.mixup_coef, &mut rng)?;
            }

            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::train(tau).with_dropout_rng(&mut drop_rng);
            let xv = tape.constant(batch.x);
            let z = model.forward(&mut tape, xv, &mut ctx)?;
            let updates = std::mem::take(&mut ctx.bn_updates);
            let loss = kd_loss(&mut tape, z, &batch.y, batch.teacher.as_ref(), tc.kd_lambda)?;
            let lv = tape.value(loss).data()[0] as f64;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "loss is {lv} at epoch {epoch} step {step} (lr {lr:e}, tau {tau}); aborting"
                )));
            }
            let g = tape.backward(loss)?;
            grads.reset();
            g.accumulate_into(&mut grads)?;
            let norm = grads.global_norm();
            if !norm.is_finite() {
                return Err(Error::Numeric(format!(
                    "gradient norm is {norm} at epoch {epoch} step {step} (loss {lv}); aborting"
                )));
            }
            adam.step(&mut model.params, &grads, lr)?;
            apply_bn_updates(&mut model.params, &updates, BN_MOMENTUM);
            loss_sum += lv;
            trace.steps.push(StepRecord {
                epoch,
                step: global,
                lr,
                tau,
                loss: lv,
            });
            global += 1;
        }
        let teacher_deviation = match &teacher_logits {
            Some(zt) => Some(mean_abs_deviation(&predict_logits(model, &clean_mels, bs)?, zt)?),
            None => None,
        };
        let rec = EpochRecord {
            epoch,
            lr,
            tau,
            mean_loss: loss_sum / steps as f64,
            teacher_deviation,
        };
        on_epoch(model, &rec)?;
        trace.epochs.push(rec);
    }
    Ok(trace)
}
