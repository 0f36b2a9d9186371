//! Training loop, inference and evaluation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::{Precision, TrainConfig};
use crate::data::{make_batch, SamplePair};
use crate::error::{Error, Result};
use crate::loss::total_loss;
use crate::metrics::{evaluate_maps, EvalReport, SaliencyMap};
use crate::model::Cinet;
use crate::optim::Sgd;
use crate::resample::{bilinear_resize, ResizeSpec};
use crate::tensor::{Scalar, Tensor};

/// Batch size used for inference.
pub const PREDICT_BATCH: usize = 8;

/// Loss components averaged over the samples of one epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub final_bce: f64,
    pub final_iou: f64,
    pub side_bce_sum: f64,
    pub side_iou_sum: f64,
    pub empty_keep_sets: usize,
}

pub const LOG_HEADER: &str = "epoch,total,final_bce,final_iou,side_bce_sum,side_iou_sum";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.total, self.final_bce, self.final_iou, self.side_bce_sum, self.side_iou_sum
        )
    }
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut s = format!("{LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

/// Train a fresh model on `data`. `on_epoch` sees each epoch's log as it
/// completes.
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    data: &[SamplePair],
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Cinet<T>, Vec<EpochLog>)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let data = data
        .iter()
        .map(|p| p.resized(cfg.input_size))
        .collect::<Result<Vec<_>>>()?;
    let mut model = Cinet::<T>::new(cfg.model.clone())?;
    let mut opt = Sgd::new(cfg.sgd(), model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut acc = EpochLog {
            epoch,
            ..Default::default()
        };
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let pairs: Vec<&SamplePair> = idx.iter().map(|&i| &data[i]).collect();
            let (images, masks) = make_batch::<T>(&pairs)?;
            let mut g = model.graph();
            let x = g.constant(images);
            let out = model.forward(&mut g, x)?;
            if !g.value(out.final_logits).is_finite() {
                return Err(Error::Diverged(format!(
                    "non-finite logits at epoch {epoch}, step {step}"
                )));
            }
            let (loss, br) = total_loss(&mut g, &out, &masks, &cfg.supervision)?;
            if !br.total.is_finite() {
                return Err(Error::Diverged(format!(
                    "loss is {} at epoch {epoch}, step {step} (final bce {}, final iou {})",
                    br.total, br.final_bce, br.final_iou
                )));
            }
            let grads = g.backward(loss)?;
            drop(g);
            opt.step(model.params_mut(), &grads)?;

            let w = pairs.len() as f64;
            acc.total += w * br.total;
            acc.final_bce += w * br.final_bce;
            acc.final_iou += w * br.final_iou;
            acc.side_bce_sum += w * br.side_bce.iter().sum::<f64>();
            acc.side_iou_sum += w * br.side_iou.iter().sum::<f64>();
            acc.empty_keep_sets += br.empty_keep_sets;
        }
        let n = data.len() as f64;
        for v in [
            &mut acc.total,
            &mut acc.final_bce,
            &mut acc.final_iou,
            &mut acc.side_bce_sum,
            &mut acc.side_iou_sum,
        ] {
            *v /= n;
        }
        on_epoch(&acc);
        log.push(acc);
    }
    Ok((model, log))
}

/// Saliency maps for `images` (each `[3, H, W]` in `[0, 1]`), at each image's
/// own resolution.
pub fn predict<T: Scalar>(model: &Cinet<T>, images: &[&Tensor<f64>]) -> Result<Vec<SaliencyMap>> {
    let size = model.config().input_size;
    let spec = ResizeSpec::new(size, size)?;
    let mut maps = Vec::with_capacity(images.len());
    for chunk in images.chunks(PREDICT_BATCH) {
        let mut data = Vec::with_capacity(chunk.len() * 3 * size * size);
        for img in chunk {
            if img.ndim() != 3 || img.shape()[0] != 3 {
                return Err(Error::shape(format!("expected a [3, H, W] image, got {:?}", img.shape())));
            }
            let r = bilinear_resize(img, spec)?;
            data.extend(r.data().iter().map(|&v| T::of(v)));
        }
        let batch = Tensor::new([chunk.len(), 3, size, size], data)?;
        let mut g = model.graph();
        let x = g.constant(batch);
        let out = model.forward(&mut g, x)?;
        let probs = g.sigmoid(out.final_logits);
        let probs: Tensor<f64> = g.value(probs).cast();
        for (i, img) in chunk.iter().enumerate() {
            let plane = Tensor::new([size, size], probs.data()[i * size * size..(i + 1) * size * size].to_vec())?;
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let full = bilinear_resize(&plane, ResizeSpec::new(h, w)?)?;
            let values = full.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
            maps.push(SaliencyMap::new(h, w, values)?);
        }
    }
    Ok(maps)
}

/// Predict every pair and score against its ground truth.
pub fn evaluate<T: Scalar>(model: &Cinet<T>, data: &[SamplePair]) -> Result<EvalReport> {
    let images: Vec<&Tensor<f64>> = data.iter().map(|p| &p.image).collect();
    let maps = predict(model, &images)?;
    let pairs: Vec<_> = maps.into_iter().zip(data.iter().map(|p| p.mask.clone())).collect();
    evaluate_maps(&pairs)
}

/// A model in either working precision.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(Cinet<f32>),
    F64(Cinet<f64>),
}

impl AnyModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.precision {
            Precision::F32 => AnyModel::F32(Cinet::new(cfg.model.clone())?),
            Precision::F64 => AnyModel::F64(Cinet::new(cfg.model.clone())?),
        })
    }

    pub fn load(cfg: &TrainConfig, path: &Path) -> Result<Self> {
        Ok(match cfg.precision {
            Precision::F32 => AnyModel::F32(checkpoint::load_model(cfg.model.clone(), path)?),
            Precision::F64 => AnyModel::F64(checkpoint::load_model(cfg.model.clone(), path)?),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        match self {
            AnyModel::F32(m) => checkpoint::save_model(m, path),
            AnyModel::F64(m) => checkpoint::save_model(m, path),
        }
    }

    pub fn predict(&self, images: &[&Tensor<f64>]) -> Result<Vec<SaliencyMap>> {
        match self {
            AnyModel::F32(m) => predict(m, images),
            AnyModel::F64(m) => predict(m, images),
        }
    }

    pub fn evaluate(&self, data: &[SamplePair]) -> Result<EvalReport> {
        match self {
            AnyModel::F32(m) => evaluate(m, data),
            AnyModel::F64(m) => evaluate(m, data),
        }
    }
}

/// File names written by [`train_to_dir`].
pub const CHECKPOINT_FILE: &str = "checkpoint.cin";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "metrics.csv";

/// Sidecar config path for a checkpoint: `config.txt` in the same directory.
pub fn sidecar_config(checkpoint: &Path) -> PathBuf {
    checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE)
}

/// Train in the configured precision and write the checkpoint, the config
/// and the per-epoch log under `out`.
pub fn train_to_dir(
    cfg: &TrainConfig,
    data: &[SamplePair],
    out: &Path,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(AnyModel, Vec<EpochLog>)> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let (model, log) = match cfg.precision {
        Precision::F32 => {
            let (m, l) = train::<f32>(cfg, data, on_epoch)?;
            (AnyModel::F32(m), l)
        }
        Precision::F64 => {
            let (m, l) = train::<f64>(cfg, data, on_epoch)?;
            (AnyModel::F64(m), l)
        }
    };
    model.save(&out.join(CHECKPOINT_FILE))?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(CONFIG_FILE, cfg.to_text())?;
    write(LOG_FILE, log_csv(&log))?;
    Ok((model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::loss::SupervisionMode;

    fn tiny_cfg() -> TrainConfig {
        let mut cfg = TrainConfig::desk();
        cfg.set("input_size", "32").unwrap();
        cfg.set("unified_channels", "8").unwrap();
        cfg.set("cascade_depth", "1").unwrap();
        cfg.set("attention_reduction", "2").unwrap();
        cfg.epochs = 2;
        cfg.batch_size = 3;
        cfg.precision = Precision::F64;
        cfg
    }

    fn data(n: usize) -> Vec<SamplePair> {
        synth_dataset(&SynthSpec {
            count: n,
            size: 32,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn training_is_deterministic_in_f64() {
        let d = data(5);
        let (m1, l1) = train::<f64>(&tiny_cfg(), &d, |_| {}).unwrap();
        let (m2, l2) = train::<f64>(&tiny_cfg(), &d, |_| {}).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(l1.len(), 2);
        for (a, b) in m1.params().iter().zip(m2.params().iter()) {
            assert_eq!(a.value, b.value);
        }
        assert_eq!(log_csv(&l1).lines().next(), Some(LOG_HEADER));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(matches!(train::<f64>(&tiny_cfg(), &[], |_| {}), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn huge_learning_rate_trips_the_divergence_guard() {
        let mut cfg = tiny_cfg();
        cfg.lr = 1e30;
        cfg.epochs = 3;
        cfg.supervision.mode = SupervisionMode::None;
        match train::<f64>(&cfg, &data(6), |_| {}) {
            Err(Error::Diverged(_)) => {}
            other => panic!("expected divergence, got {:?}", other.map(|(_, l)| l)),
        }
    }

    #[test]
    fn predictions_match_image_size() {
        let cfg = tiny_cfg();
        let model = Cinet::<f64>::new(cfg.model.clone()).unwrap();
        let img = Tensor::full([3, 20, 28], 0.5);
        let maps = predict(&model, &[&img]).unwrap();
        assert_eq!((maps[0].height(), maps[0].width()), (20, 28));
        let r = evaluate(&model, &data(2)).unwrap();
        assert_eq!(r.images, 2);
    }
}
