//! Patch-based training with Nesterov SGD and a poly schedule, plus
//! whole-volume inference and evaluation.

mod infer;
mod optim;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use infer::{
    evaluate, predict_labels, score_case, sliding_window_infer, window_starts, window_stride,
};
pub use optim::{sgd_nesterov_step, OptimizerState};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, VELOCITY_PREFIX};
use crate::data::{augment_flip, extract_patch, CaseVolume, Patch, PatchPolicy, MODALITIES};
use crate::error::{Error, Result};
use crate::losses::deep_supervision_loss;
use crate::regions::regions_from_labels;
use crate::tensor::{Scalar, Tensor};
use crate::unet::Network;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub poly_exponent: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Seeds both weight initialization and batch sampling.
    pub seed: u64,
    /// Validate every this many epochs, and always after the last one.
    pub eval_every: usize,
    /// Sliding-window overlap fraction used for validation.
    pub overlap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            momentum: 0.99,
            poly_exponent: 0.9,
            epochs: 25,
            batches_per_epoch: 40,
            batch_size: 2,
            seed: 42,
            eval_every: 5,
            overlap: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::invalid("train_config", msg));
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("lr0 must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.poly_exponent >= 0.0) {
            return bad("poly_exponent must be >= 0");
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return bad("epochs, batches_per_epoch and batch_size must be >= 1");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1");
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return bad("overlap must lie in [0, 1)");
        }
        Ok(())
    }
}

/// `lr0 (1 - epoch / epochs)^exponent` for `0 <= epoch <= epochs`.
pub fn poly_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs || cfg.epochs == 0 {
        return Err(Error::invalid(
            "poly_lr",
            format!("epoch {epoch} outside 0..={}", cfg.epochs),
        ));
    }
    Ok(cfg.lr0 * (1.0 - epoch as f64 / cfg.epochs as f64).powf(cfg.poly_exponent))
}

/// One line of the training log. Wall-clock time lives in a separate file
/// so that the log itself is reproducible byte for byte.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    /// Mean validation Dice, ordered ET, TC, WT.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_dice: Option<[f64; 3]>,
    #[serde(skip)]
    pub seconds: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    /// Epoch and mean validation Dice of the best checkpoint.
    pub best: Option<(usize, f64)>,
    pub state: OptimizerState<f32>,
}

/// Input `[B, 4, s, s, s]` and region targets `[B, 3, s, s, s]`.
pub fn assemble_batch<T: Scalar>(patches: &[Patch]) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = patches
        .first()
        .ok_or_else(|| Error::invalid("assemble_batch", "empty batch"))?
        .size;
    let mut x = Vec::with_capacity(patches.len() * MODALITIES.len() * s * s * s);
    let mut y = Vec::with_capacity(patches.len() * 3 * s * s * s);
    for p in patches {
        if p.size != s {
            return Err(Error::invalid("assemble_batch", "patches differ in size"));
        }
        x.extend(p.intensities.iter().map(|&v| T::of(v as f64)));
        y.extend(
            regions_from_labels(&p.label_volume()?)
                .to_tensor::<T>()
                .into_data(),
        );
    }
    let b = patches.len();
    Ok((
        Tensor::from_vec([b, MODALITIES.len(), s, s, s], x)?,
        Tensor::from_vec([b, 3, s, s, s], y)?,
    ))
}

/// Draw a batch: a uniformly chosen case, a foreground-biased patch and a
/// random flip per item, all from `rng`.
pub fn sample_batch(
    cases: &[CaseVolume],
    patch: usize,
    batch: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Patch>> {
    (0..batch)
        .map(|_| {
            let case = &cases[rng.random_range(0..cases.len())];
            let p = extract_patch(case, patch, PatchPolicy::RandomForeground, rng)?;
            Ok(augment_flip(&p, rng).0)
        })
        .collect()
}

/// Loss of one batch; with `state` set, also take an optimizer step.
pub fn train_step<T: Scalar>(
    net: &mut Network<T>,
    input: &Tensor<T>,
    targets: &Tensor<T>,
    step: Option<(&mut OptimizerState<T>, f64, f64)>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bound = net.params().bind(&mut tape);
    let x = tape.constant(input.clone());
    let heads = net.forward(&mut tape, &bound, x)?;
    let loss = deep_supervision_loss(&mut tape, &heads, targets)?;
    let value = tape.value(loss).item().f64();
    if let Some((state, lr, mu)) = step {
        tape.backward(loss)?;
        let grads: Vec<_> = bound.vars().iter().map(|&v| tape.grad(v)).collect();
        sgd_nesterov_step(net.params_mut(), &grads, state, lr, mu)?;
    }
    Ok(value)
}

fn diverged(e: Error, epoch: usize, batch: usize, lr: f64) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            batch,
            lr,
            loss: f64::NAN,
        },
        other => other,
    }
}

/// Checkpoint of the network weights plus optimizer velocities.
pub fn training_checkpoint(
    net: &Network<f32>,
    state: &OptimizerState<f32>,
    epoch: usize,
) -> Result<Checkpoint> {
    let mut ckpt = net.to_checkpoint()?;
    ckpt.meta.insert("epoch".into(), epoch.to_string());
    for (p, v) in net.params().iter().zip(&state.velocities) {
        ckpt.push(format!("{VELOCITY_PREFIX}{}", p.name), v.clone());
    }
    Ok(ckpt)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    writeln!(f, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Train on normalized `train` cases, validating on `val`.
///
/// With `out` set, the epoch log, timings, `final.ckpt` and `best.ckpt`
/// (highest mean validation Dice) are written there; an existing log is
/// replaced.
pub fn train_loop(
    net: &mut Network<f32>,
    train: &[CaseVolume],
    val: &[CaseVolume],
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("train_loop", "no training cases"));
    }
    let patch = net.config().patch_size;
    let paths = out.map(|dir| -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let log = dir.join(LOG_FILE);
        let timing = dir.join(TIMING_FILE);
        for p in [&log, &timing] {
            fs::write(p, "").map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        Ok((log, timing))
    });
    let paths = paths.transpose()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = OptimizerState::new(net.params());
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = poly_lr(epoch, cfg)?;
        let mut total = 0.0;
        for batch in 0..cfg.batches_per_epoch {
            let patches = sample_batch(train, patch, cfg.batch_size, &mut rng)?;
            let (x, y) = assemble_batch::<f32>(&patches)?;
            let loss = train_step(net, &x, &y, Some((&mut state, lr, cfg.momentum)))
                .map_err(|e| diverged(e, epoch, batch, lr))?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    lr,
                    loss,
                });
            }
            total += loss;
        }
        let validate =
            !val.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let val_dice = if validate {
            Some(evaluate(net, val, cfg.overlap)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            train_loss: total / cfg.batches_per_epoch as f64,
            lr,
            val_dice: val_dice.as_ref().map(|r| r.mean),
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.5} lr {lr:.6}{}",
            record.train_loss,
            val_dice
                .as_ref()
                .map(|r| format!(
                    " val ET {:.4} TC {:.4} WT {:.4}",
                    r.mean[0], r.mean[1], r.mean[2]
                ))
                .unwrap_or_default()
        );
        if let Some(report) = &val_dice {
            if best.is_none_or(|(_, d)| report.avg_mean > d) {
                best = Some((epoch, report.avg_mean));
                if let Some(dir) = out {
                    training_checkpoint(net, &state, epoch)?.save(&dir.join(BEST_CHECKPOINT))?;
                }
            }
        }
        if let Some((log_path, timing_path)) = &paths {
            append_line(log_path, &serde_json::to_string(&record)?)?;
            append_line(
                timing_path,
                &serde_json::json!({"epoch": epoch, "seconds": record.seconds}).to_string(),
            )?;
        }
        log.push(record);
    }
    if let Some(dir) = out {
        training_checkpoint(net, &state, cfg.epochs - 1)?.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { log, best, state })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_anchors() {
        let cfg = TrainConfig {
            epochs: 260,
            ..TrainConfig::default()
        };
        assert_eq!(poly_lr(0, &cfg).unwrap(), 0.01);
        assert_eq!(poly_lr(260, &cfg).unwrap(), 0.0);
        assert!((poly_lr(130, &cfg).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(261, &cfg).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        for cfg in [
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr0: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                epochs: 0,
                ..TrainConfig::default()
            },
        ] {
            assert!(cfg.validate().is_err());
        }
    }
}
