//! Training loop, loss, Adam, and evaluation.
//!
//! Everything is deterministic per (seed, config): clip generation, epoch
//! shuffles, drop masks and the loss trajectory. Two runs with the same
//! config produce byte-identical `metrics.csv` files.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::TrainConfig;
use crate::data::{generate_clip, load_dataset, write_pgm};
use crate::error::{Error, Result};
use crate::metrics::{j_measure, mean, miou};
use crate::model::Model;
use crate::pipeline::ClipSample;
use crate::rng::{derive_seed, tag, SplitMix64};
use crate::tensor::{Graph, NodeId, ParamStore, Tensor};

const DICE_EPS: f32 = 1e-6;

/// Loss nodes of one clip: `total = bce + dice`.
pub struct LossParts {
    pub total: NodeId,
    pub bce: NodeId,
    pub dice: NodeId,
}

/// Mean binary cross-entropy from logits plus soft Dice loss (weight 1.0).
pub fn seg_loss(g: &mut Graph, logits: NodeId, gt: &Tensor) -> Result<LossParts> {
    if g.shape(logits) != gt.shape() {
        return Err(Error::ShapeMismatch {
            op: "seg_loss",
            lhs: g.shape(logits).to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let target = g.constant(gt);
    let bce_map = g.bce_with_logits(logits, target);
    let bce = g.mean_all(bce_map);

    let probs = g.sigmoid(logits);
    let inter = {
        let prod = g.mul(probs, target);
        g.sum_all(prod)
    };
    let psum = g.sum_all(probs);
    let gsum = g.sum_all(target);
    let two_inter = g.scale(inter, 2.0);
    let num = g.add_scalar(two_inter, DICE_EPS);
    let den_sum = g.add(psum, gsum);
    let den = g.add_scalar(den_sum, DICE_EPS);
    let ratio = g.div(num, den);
    let neg = g.scale(ratio, -1.0);
    let dice = g.add_scalar(neg, 1.0);

    let total = g.add(bce, dice);
    Ok(LossParts { total, bce, dice })
}

/// Adam with bias correction (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
pub struct Adam {
    pub lr: f32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(lr: f32, store: &ParamStore) -> Adam {
        let m = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        let v = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m,
            v,
        }
    }

    /// One update from the accumulated gradients; gradients are cleared.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
        for (idx, id) in ids.into_iter().enumerate() {
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i] as f64;
                let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * g;
                let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * g * g;
                m[i] = mi as f32;
                v[i] = vi as f32;
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                data[i] -= self.lr * update as f32;
            }
            tensor.zero_grad();
        }
    }
}

/// Generate the synthetic train/val splits, or load them from
/// `dataset_root/train` and `dataset_root/val`.
pub fn prepare_data(cfg: &TrainConfig) -> Result<(Vec<ClipSample>, Vec<ClipSample>)> {
    match &cfg.dataset_root {
        Some(root) => {
            let train = load_dataset(&root.join("train"))?.load_all()?;
            let val = load_dataset(&root.join("val"))?.load_all()?;
            Ok((train, val))
        }
        None => {
            let train = (0..cfg.train_clips)
                .map(|i| generate_clip(&cfg.synth_config("train", i)))
                .collect::<Result<Vec<_>>>()?;
            let val = (0..cfg.val_clips)
                .map(|i| generate_clip(&cfg.synth_config("val", i)))
                .collect::<Result<Vec<_>>>()?;
            Ok((train, val))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub val_miou: f64,
}

#[derive(Debug)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_miou: f64,
    pub checkpoint: PathBuf,
    pub metrics_csv: PathBuf,
}

/// Validation mIoU of a model over clips, with deterministic per-clip drop
/// seeds.
pub fn validation_miou(model: &Model, clips: &[ClipSample], seed: u64) -> Result<f64> {
    let mut scores = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let fwd = derive_seed(seed, &[tag("valdrop"), i as u64]);
        let pred = model.predict(&clip.frames, fwd)?;
        scores.push(miou(&pred.binary, &clip.masks)?);
    }
    Ok(mean(&scores))
}

/// Train a model, logging one line per epoch and keeping the best-mIoU
/// checkpoint. Outputs: `<out>/metrics.csv` (header `epoch,loss,val_miou`)
/// and `<out>/model.ckpt`.
pub fn train(cfg: &TrainConfig, out_dir: &Path) -> Result<TrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let (train_clips, val_clips) = prepare_data(cfg)?;
    if train_clips.is_empty() || val_clips.is_empty() {
        return Err(Error::InvalidConfig(
            "training needs non-empty train and val splits".into(),
        ));
    }

    let mut model = Model::new(cfg.model_config(), cfg.seed)?;
    let mut adam = Adam::new(cfg.learning_rate, &model.store);
    let ckpt_path = out_dir.join("model.ckpt");
    let metrics_path = out_dir.join("metrics.csv");

    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (0usize, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        shuffle(&mut order, derive_seed(cfg.seed, &[tag("shuffle"), epoch as u64]));

        let mut epoch_loss = 0.0f64;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let inv_batch = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for (k, &clip_idx) in batch.iter().enumerate() {
                let clip = &train_clips[clip_idx];
                let fwd = derive_seed(
                    cfg.seed,
                    &[tag("fwd"), epoch as u64, step as u64, k as u64],
                );
                let mut g = Graph::new();
                let logits = model.forward_logits(&mut g, &clip.frames, fwd)?;
                let loss = seg_loss(&mut g, logits, &clip.masks)?;
                batch_loss += g.scalar_f64(loss.total);
                let scaled = g.scale(loss.total, inv_batch);
                g.backward(scaled)?;
                g.apply_param_grads(&mut model.store);
            }
            batch_loss /= batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NanLoss { epoch, step });
            }
            adam.step(&mut model.store);
            epoch_loss += batch_loss * batch.len() as f64;
        }
        epoch_loss /= train_clips.len() as f64;

        let val = validation_miou(&model, &val_clips, derive_seed(cfg.seed, &[epoch as u64]))?;
        epochs.push(EpochStats {
            epoch,
            loss: epoch_loss,
            val_miou: val,
        });
        if val > best.1 {
            best = (epoch, val);
            crate::checkpoint::save(&model.store, &ckpt_path)?;
        }
    }

    let mut csv = String::from("epoch,loss,val_miou\n");
    for e in &epochs {
        csv.push_str(&format!("{},{:.6},{:.6}\n", e.epoch, e.loss, e.val_miou));
    }
    fs::write(&metrics_path, csv).map_err(|e| Error::io(&metrics_path, e))?;

    Ok(TrainReport {
        epochs,
        best_epoch: best.0,
        best_miou: best.1,
        checkpoint: ckpt_path,
        metrics_csv: metrics_path,
    })
}

fn shuffle(items: &mut [usize], seed: u64) {
    let mut rng = SplitMix64::new(seed);
    for i in (1..items.len()).rev() {
        let j = rng.below(i + 1);
        items.swap(i, j);
    }
}

#[derive(Clone, Debug)]
pub struct EvalRow {
    pub clip_id: String,
    pub miou: f64,
    pub j: f64,
}

#[derive(Clone, Debug)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_miou: f64,
    pub mean_j: f64,
}

/// Evaluate a model over clips: per-clip and aggregate mIoU / J, an
/// `eval.csv`, and predicted masks as `masks/<clip>/%05d.pgm`.
pub fn evaluate(
    model: &Model,
    clips: &[ClipSample],
    seed: u64,
    out_dir: &Path,
) -> Result<EvalReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(clips.len());
    for (i, clip) in clips.iter().enumerate() {
        let fwd = derive_seed(seed, &[tag("evaldrop"), i as u64]);
        let pred = model.predict(&clip.frames, fwd)?;
        let (t, h, w) = clip.dims();
        let mask_dir = out_dir.join("masks").join(&clip.clip_id);
        fs::create_dir_all(&mask_dir).map_err(|e| Error::io(&mask_dir, e))?;
        for ti in 0..t {
            let path = mask_dir.join(format!("{ti:05}.pgm"));
            write_pgm(&path, &pred.binary.data()[ti * h * w..(ti + 1) * h * w], h, w)?;
        }
        rows.push(EvalRow {
            clip_id: clip.clip_id.clone(),
            miou: miou(&pred.binary, &clip.masks)?,
            j: j_measure(&pred.binary, &clip.masks)?,
        });
    }
    let mean_miou = mean(&rows.iter().map(|r| r.miou).collect::<Vec<_>>());
    let mean_j = mean(&rows.iter().map(|r| r.j).collect::<Vec<_>>());

    let mut csv = String::from("clip_id,miou,j\n");
    for r in &rows {
        csv.push_str(&format!("{},{:.6},{:.6}\n", r.clip_id, r.miou, r.j));
    }
    csv.push_str(&format!("mean,{mean_miou:.6},{mean_j:.6}\n"));
    let csv_path = out_dir.join("eval.csv");
    fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;

    Ok(EvalReport {
        rows,
        mean_miou,
        mean_j,
    })
}
