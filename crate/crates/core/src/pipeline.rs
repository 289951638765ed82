//! The three training stages, CDAE pretraining and evaluation.
//!
//! Every stage runs the same loop: per epoch, seeded mini-batches, one tape
//! per batch, backward, AdamW with a per-epoch cosine learning rate.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corruption::{Corrupt, Corruption, CorruptionKind};
use crate::data::{Batch, Dataset};
use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::metrics::{ConfusionMatrix, MetricsReport};
use crate::models::{
    Autoencoder, ClassifierModel, Classify, Encoder, EncoderConfig, FusionConfig, FusionModel,
};
use crate::nn::{argmax, Linear, Parameters};
use crate::optim::{AdamW, AdamWConfig, CosineSchedule};
use crate::seed;
use crate::tensor::{Precision, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    CdaePretrain,
    Stage2Finetune,
    Stage3,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Stage1 => "stage1",
            Stage::CdaePretrain => "cdae_pretrain",
            Stage::Stage2Finetune => "stage2_finetune",
            Stage::Stage3 => "stage3",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stage1" => Ok(Stage::Stage1),
            "cdae_pretrain" => Ok(Stage::CdaePretrain),
            "stage2_finetune" => Ok(Stage::Stage2Finetune),
            "stage3" => Ok(Stage::Stage3),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: Stage,
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub eta_min: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
    /// Random horizontal flips during supervised stages.
    #[serde(default)]
    pub augment: bool,
    #[serde(default)]
    pub precision: Precision,
}

pub const DEFAULT_BATCH_SIZE: usize = 32;

impl StageConfig {
    pub fn defaults(stage: Stage) -> Self {
        let (epochs, lr) = match stage {
            Stage::Stage1 => (20, 1e-4),
            Stage::CdaePretrain => (30, 1e-3),
            Stage::Stage2Finetune => (20, 1e-4),
            Stage::Stage3 => (10, 1e-4),
        };
        StageConfig {
            stage,
            epochs,
            lr,
            eta_min: 0.0,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            adamw: AdamWConfig::default(),
            augment: false,
            precision: Precision::F64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid(format!(
                "{}: epochs and batch_size must be positive",
                self.stage
            )));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!(
                "{}: lr must be positive",
                self.stage
            )));
        }
        self.adamw.validate()?;
        self.schedule().map(|_| ())
    }

    pub fn schedule(&self) -> Result<CosineSchedule> {
        CosineSchedule::new(self.lr, self.eta_min, self.epochs)
    }

    fn expect_stage(&self, stage: Stage) -> Result<()> {
        if self.stage != stage {
            return Err(Error::invalid(format!(
                "{stage} received a {} configuration",
                self.stage
            )));
        }
        self.validate()
    }
}

/// Outcome of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean of the batch losses.
    pub loss: f64,
    pub lr: f64,
    /// Seconds spent in the epoch.
    pub wall_time: f64,
}

/// One record per completed epoch, stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn first_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| Error::Data(e.to_string()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<TrainLog> {
        let mut records = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::Data(format!("train log line {}: {e}", i + 1)))?,
            );
        }
        Ok(TrainLog { records })
    }
}

fn batch_seed(stage_seed: u64, epoch: usize, batch: usize) -> u64 {
    seed::derive(
        seed::derive_named(stage_seed, "batch"),
        ((epoch as u64) << 32) | batch as u64,
    )
}

/// Mirrors each image left-right with probability one half.
fn flip_horizontal(images: &mut ImageBatch, seed: u64) {
    let dims = images.dims();
    let mut rng = seed::rng(seed);
    for i in 0..images.len() {
        if !rng.random_bool(0.5) {
            continue;
        }
        for row in images.image_mut(i).chunks_mut(dims.width) {
            row.reverse();
        }
    }
}

/// Shared optimisation loop. `loss_of` builds the batch loss on a fresh tape.
fn fit<M, F>(model: &mut M, cfg: &StageConfig, data: &Dataset, mut loss_of: F) -> Result<TrainLog>
where
    M: Parameters,
    F: FnMut(&M, &mut Tape, &Batch, u64) -> Result<Var>,
{
    let schedule = cfg.schedule()?;
    let mut opt = AdamW::new(cfg.adamw)?.with_precision(cfg.precision);
    let shuffle = seed::derive_named(cfg.seed, "shuffle");
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = schedule.lr(epoch)?;
        let mut total = 0.0;
        for (b, mut batch) in data
            .batches(cfg.batch_size, Some(seed::derive(shuffle, epoch as u64)))
            .enumerate()
        {
            let bseed = batch_seed(cfg.seed, epoch, b);
            if cfg.augment {
                flip_horizontal(&mut batch.images, seed::derive_named(bseed, "flip"));
            }
            let mut tape = Tape::with_precision(cfg.precision);
            let loss = loss_of(model, &mut tape, &batch, bseed)?;
            let value = tape.scalar(loss);
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch: epoch + 1,
                    value,
                });
            }
            tape.backward(loss)?;
            model.zero_grad();
            model.pull_grads(&tape)?;
            let mut params = model.params_mut();
            let mut refs: Vec<_> = params.iter_mut().map(|(_, t)| &mut **t).collect();
            opt.step(&mut refs, lr)?;
            total += value * batch.labels.len() as f64;
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            loss: total / data.len() as f64,
            lr,
            wall_time: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "{} epoch {}/{} loss {:.6} lr {:.3e}",
            cfg.stage,
            record.epoch,
            cfg.epochs,
            record.loss,
            lr
        );
        log.records.push(record);
    }
    Ok(log)
}

fn check_input(model_channels: usize, data: &Dataset) -> Result<()> {
    if data.dims().channels != model_channels {
        return Err(Error::Model(format!(
            "model expects {model_channels} input channels, dataset has {}",
            data.dims().channels
        )));
    }
    Ok(())
}

fn fit_classifier<M: Parameters + Classify>(
    model: &mut M,
    cfg: &StageConfig,
    data: &Dataset,
) -> Result<TrainLog> {
    if model.num_classes() != data.num_classes() {
        return Err(Error::Model(format!(
            "model has {} classes, dataset {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    check_input(model.input_channels(), data)?;
    fit(model, cfg, data, |m, tape, batch, _| {
        let x = batch.images.to_var(tape);
        let logits = m.logits(tape, x)?;
        tape.cross_entropy(logits, &batch.labels)
    })
}

fn init_seed(cfg: &StageConfig) -> u64 {
    seed::derive_named(cfg.seed, "init")
}

/// Trains a supervised backbone from scratch; the result is frozen.
pub fn train_stage1(
    cfg: &StageConfig,
    encoder: &EncoderConfig,
    data: &Dataset,
) -> Result<(ClassifierModel, TrainLog)> {
    cfg.expect_stage(Stage::Stage1)?;
    let mut rng = seed::rng(init_seed(cfg));
    let mut model = ClassifierModel::new(encoder.clone(), data.num_classes(), &mut rng)?;
    let log = fit_classifier(&mut model, cfg, data)?;
    model.freeze();
    Ok((model, log))
}

/// Reconstruction loss given the decoder output and the clean target.
pub type ReconLoss<'a> = dyn FnMut(&mut Tape, Var, Var) -> Result<Var> + 'a;

/// Fresh autoencoder for `data`, initialised from the stage seed.
pub fn init_autoencoder(
    cfg: &StageConfig,
    encoder: &EncoderConfig,
    data: &Dataset,
) -> Result<Autoencoder> {
    let dims = data.dims();
    if dims.height != dims.width {
        return Err(Error::Data("autoencoder needs square images".into()));
    }
    let mut rng = seed::rng(init_seed(cfg));
    Autoencoder::new(encoder.clone(), dims.height, &mut rng)
}

/// Trains `ae` to reconstruct each clean batch from its corrupted copy.
/// Labels are ignored. `loss` sees the reconstruction and the clean batch.
pub fn pretrain_with_loss(
    cfg: &StageConfig,
    mut ae: Autoencoder,
    unlabeled: &Dataset,
    corruption: &dyn Corrupt,
    loss: &mut ReconLoss<'_>,
) -> Result<(Autoencoder, TrainLog)> {
    cfg.expect_stage(Stage::CdaePretrain)?;
    check_input(ae.encoder.config().input_channels, unlabeled)?;
    let log = fit(&mut ae, cfg, unlabeled, |m, tape, batch, bseed| {
        let corrupted = corruption.corrupt(&batch.images, bseed)?;
        let x_prime = corrupted.to_var(tape);
        let x = batch.images.to_var(tape);
        let recon = m.forward(tape, x_prime)?;
        loss(tape, recon, x)
    })?;
    Ok((ae, log))
}

/// CDAE pretraining with mean squared reconstruction error.
pub fn pretrain_cdae(
    cfg: &StageConfig,
    encoder: &EncoderConfig,
    unlabeled: &Dataset,
    corruption: &dyn Corrupt,
) -> Result<(Autoencoder, TrainLog)> {
    let ae = init_autoencoder(cfg, encoder, unlabeled)?;
    pretrain_with_loss(cfg, ae, unlabeled, corruption, &mut |tape, recon, x| {
        tape.mse(recon, x)
    })
}

/// Attaches a zero-initialised head to `encoder` (decoder already
/// discarded) and trains the whole network; the result is frozen.
pub fn finetune_stage2(
    cfg: &StageConfig,
    encoder: Encoder,
    data: &Dataset,
) -> Result<(ClassifierModel, TrainLog)> {
    cfg.expect_stage(Stage::Stage2Finetune)?;
    let head = Linear::zeros(encoder.feature_dim(), data.num_classes());
    let mut model = ClassifierModel::from_parts(encoder, head)?;
    let log = fit_classifier(&mut model, cfg, data)?;
    model.freeze();
    Ok((model, log))
}

/// Fusion training: only attention and classifier parameters move.
pub fn train_stage3(
    cfg: &StageConfig,
    b1: ClassifierModel,
    b2: ClassifierModel,
    fusion: &FusionConfig,
    data: &Dataset,
) -> Result<(FusionModel, TrainLog)> {
    cfg.expect_stage(Stage::Stage3)?;
    if !b1.is_frozen() || !b2.is_frozen() {
        return Err(Error::Model(
            "stage 3 requires frozen backbones from stages 1 and 2".into(),
        ));
    }
    let mut rng = seed::rng(init_seed(cfg));
    let mut model = fusion.build(b1, b2, &mut rng)?;
    let log = fit_classifier(&mut model, cfg, data)?;
    Ok((model, log))
}

/// Class predictions with ties resolved toward the lowest index.
pub fn predict(model: &dyn Classify, images: &ImageBatch, batch_size: usize) -> Result<Vec<usize>> {
    let k = model.num_classes();
    let mut out = Vec::with_capacity(images.len());
    let indices: Vec<usize> = (0..images.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let x = images.select(chunk).to_var(&mut tape);
        let logits = model.logits(&mut tape, x)?;
        out.extend(tape.value(logits).chunks(k).map(argmax));
    }
    Ok(out)
}

/// Confusion matrix and report of `model` on `data`.
pub fn evaluate(model: &dyn Classify, data: &Dataset) -> Result<MetricsReport> {
    if model.num_classes() != data.num_classes() {
        return Err(Error::Model(format!(
            "model predicts {} classes, dataset has {}",
            model.num_classes(),
            data.num_classes()
        )));
    }
    check_input(model.input_channels(), data)?;
    let pred = predict(model, data.images(), DEFAULT_BATCH_SIZE)?;
    let mut cm = ConfusionMatrix::new(data.num_classes())?;
    cm.update(data.labels(), &pred)?;
    MetricsReport::new(cm, data.class_names())
}

/// Downstream check run after each ablation pretraining.
#[derive(Debug, Clone)]
pub struct AblationFinetune<'a> {
    pub cfg: &'a StageConfig,
    pub train: &'a Dataset,
    pub val: &'a Dataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub corruption: CorruptionKind,
    pub pretrain: TrainLog,
    pub autoencoder_checksum: u64,
    pub finetune: Option<TrainLog>,
    pub val_accuracy: Option<f64>,
    pub val_macro_f1: Option<f64>,
}

/// Pretrains one autoencoder per corruption through [`pretrain_cdae`] with
/// an identical configuration, optionally finetuning and evaluating each.
pub fn ablate(
    cfg: &StageConfig,
    encoder: &EncoderConfig,
    unlabeled: &Dataset,
    corruptions: &[Corruption],
    finetune: Option<&AblationFinetune<'_>>,
) -> Result<Vec<AblationResult>> {
    corruptions
        .iter()
        .map(|c| {
            let (ae, pretrain) = pretrain_cdae(cfg, encoder, unlabeled, c)?;
            let autoencoder_checksum = ae.checksum();
            let mut result = AblationResult {
                corruption: c.kind(),
                pretrain,
                autoencoder_checksum,
                finetune: None,
                val_accuracy: None,
                val_macro_f1: None,
            };
            if let Some(ft) = finetune {
                let (model, log) = finetune_stage2(ft.cfg, ae.into_encoder(), ft.train)?;
                let report = evaluate(&model, ft.val)?;
                result.finetune = Some(log);
                result.val_accuracy = Some(report.accuracy);
                result.val_macro_f1 = Some(report.macro_f1);
            }
            Ok(result)
        })
        .collect()
}

/// Plain-text comparison table of ablation runs.
pub fn ablation_table(results: &[AblationResult]) -> String {
    let mut s =
        String::from("corruption  first_mse   final_mse   ratio     val_acc  val_macro_f1\n");
    for r in results {
        let first = r.pretrain.first_loss().unwrap_or(f64::NAN);
        let last = r.pretrain.final_loss().unwrap_or(f64::NAN);
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        s.push_str(&format!(
            "{:<10}  {:<10.6}  {:<10.6}  {:<8.4}  {:<7}  {}\n",
            r.corruption.as_str(),
            first,
            last,
            last / first,
            opt(r.val_accuracy),
            opt(r.val_macro_f1)
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corruption::ChaosParams;
    use crate::data::{generate_synthetic, SyntheticTextureConfig};

    fn tiny_data() -> Dataset {
        generate_synthetic(&SyntheticTextureConfig {
            num_classes: 2,
            samples_per_class: vec![12, 12],
            image_size: 8,
            ..Default::default()
        })
        .unwrap()
    }

    fn tiny_encoder() -> EncoderConfig {
        EncoderConfig::new(vec![4, 4], 3, 3)
    }

    fn quick(stage: Stage, epochs: usize) -> StageConfig {
        StageConfig {
            epochs,
            lr: 1e-2,
            batch_size: 8,
            ..StageConfig::defaults(stage)
        }
    }

    #[test]
    fn stage_defaults() {
        let s1 = StageConfig::defaults(Stage::Stage1);
        assert_eq!((s1.epochs, s1.lr, s1.batch_size), (20, 1e-4, 32));
        let s3 = StageConfig::defaults(Stage::Stage3);
        assert_eq!((s3.epochs, s3.lr), (10, 1e-4));
        let p = StageConfig::defaults(Stage::CdaePretrain);
        assert_eq!((p.epochs, p.lr, p.eta_min), (30, 1e-3, 0.0));
    }

    #[test]
    fn wrong_stage_config_rejected() {
        let d = tiny_data();
        assert!(train_stage1(&quick(Stage::Stage3, 1), &tiny_encoder(), &d).is_err());
    }

    #[test]
    fn log_has_one_record_per_epoch_and_round_trips() {
        let d = tiny_data();
        let (model, log) = train_stage1(&quick(Stage::Stage1, 3), &tiny_encoder(), &d).unwrap();
        assert!(model.is_frozen());
        assert_eq!(log.records.len(), 3);
        assert_eq!(log.records[0].lr, 1e-2);
        let mut buf = Vec::new();
        log.write_jsonl(&mut buf).unwrap();
        assert_eq!(TrainLog::read_jsonl(&buf[..]).unwrap(), log);
    }

    #[test]
    fn spy_loss_sees_clean_target() {
        let d = tiny_data();
        let cfg = quick(Stage::CdaePretrain, 1);
        let ae = init_autoencoder(&cfg, &tiny_encoder(), &d).unwrap();
        let corruption = Corruption::Chaotic(ChaosParams::default());
        let mut checked = 0;
        pretrain_with_loss(&cfg, ae, &d, &corruption, &mut |tape, recon, target| {
            let t = tape.value(target).to_vec();
            let clean = (0..d.len()).any(|i| {
                let img = d.images().image(i);
                t[..img.len()] == *img
            });
            assert!(clean, "target is not a clean image");
            checked += 1;
            tape.mse(recon, target)
        })
        .unwrap();
        assert_eq!(checked, 3);
    }

    #[test]
    fn stage3_rejects_unfrozen() {
        let d = tiny_data();
        let mut rng = seed::rng(0);
        let b1 = ClassifierModel::new(tiny_encoder(), 2, &mut rng).unwrap();
        let mut b2 = b1.clone();
        b2.freeze();
        assert!(matches!(
            train_stage3(
                &quick(Stage::Stage3, 1),
                b1,
                b2,
                &FusionConfig::default(),
                &d
            ),
            Err(Error::Model(_))
        ));
    }

    #[test]
    fn evaluate_is_order_independent() {
        let d = tiny_data();
        let (model, _) = train_stage1(&quick(Stage::Stage1, 1), &tiny_encoder(), &d).unwrap();
        let a = evaluate(&model, &d).unwrap();
        let mut order: Vec<usize> = (0..d.len()).rev().collect();
        order.rotate_left(5);
        let b = evaluate(&model, &d.subset(&order).unwrap()).unwrap();
        assert_eq!(a.confusion, b.confusion);
        assert_eq!(a.confusion.total(), d.len() as u64);
    }

    #[test]
    fn flips_are_involutive_per_row() {
        let d = tiny_data();
        let mut imgs = d.images().clone();
        flip_horizontal(&mut imgs, 3);
        flip_horizontal(&mut imgs, 3);
        assert_eq!(&imgs, d.images());
    }
}
