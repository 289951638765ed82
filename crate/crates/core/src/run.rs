//! Run directories: each command reads its inputs from and writes its
//! artifacts to `out_dir`.
//!
//! ```text
//! out_dir/
//!   config.toml            resolved configuration
//!   checkpoints/<stage>.ckpt
//!   logs/<stage>.jsonl     one record per epoch
//!   report.txt             fusion model on the test split
//!   report_b1.txt, report_b2.txt
//!   ablation.txt
//! ```

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use crate::checkpoint::{Checkpoint, CheckpointMeta};
use crate::config::RunConfig;
use crate::corruption::{Corruption, CorruptionKind};
use crate::data::{stratified_split, Dataset};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::models::{AnyModel, Autoencoder, ClassifierModel, FusionModel};
use crate::pipeline::{self, AblationFinetune, AblationResult, StageConfig, TrainLog};

/// Process exit status for an error: 1 configuration, 2 data, 3 numeric.
pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config { .. } | Error::InvalidArgument(_) => 1,
        Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

/// Loaded configuration, dataset and splits of one run.
pub struct Run {
    pub cfg: RunConfig,
    pub data: Dataset,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Run {
    /// Loads and splits the dataset and writes the configuration snapshot.
    pub fn open(cfg: RunConfig) -> Result<Run> {
        let data = cfg.data.load()?;
        let [a, b, c] = cfg.split;
        let (train, val, test) = stratified_split(&data, (a, b, c), cfg.split_seed())?;
        fs::create_dir_all(cfg.out_dir.join("checkpoints"))?;
        fs::create_dir_all(cfg.out_dir.join("logs"))?;
        fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml())?;
        Ok(Run {
            cfg,
            data,
            train,
            val,
            test,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.cfg.out_dir
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.dir().join("checkpoints").join(format!("{name}.ckpt"))
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.dir().join("logs").join(format!("{name}.jsonl"))
    }

    fn meta(&self, stage: &StageConfig) -> CheckpointMeta {
        CheckpointMeta {
            stage: Some(stage.stage),
            epoch: stage.epochs,
            seed: stage.seed,
            class_names: self.data.class_names().to_vec(),
        }
    }

    fn persist(
        &self,
        name: &str,
        model: AnyModel,
        stage: &StageConfig,
        log: &TrainLog,
    ) -> Result<()> {
        Checkpoint::new(model, self.meta(stage)).save(&self.checkpoint_path(name))?;
        log.write_jsonl(fs::File::create(self.log_path(name))?)
    }

    fn load(&self, name: &str) -> Result<AnyModel> {
        let path = self.checkpoint_path(name);
        if !path.exists() {
            return Err(Error::Data(format!(
                "{} is missing; run the `{name}` step first",
                path.display()
            )));
        }
        Ok(Checkpoint::load(&path)?.model)
    }

    fn load_classifier(&self, name: &str) -> Result<ClassifierModel> {
        match self.load(name)? {
            AnyModel::Classifier(m) => Ok(m),
            other => Err(Error::Checkpoint(format!(
                "{name} holds a {}",
                other.kind()
            ))),
        }
    }

    /// Corruption of the configured kind, or `kind` when given.
    pub fn corruption(&self, kind: Option<CorruptionKind>) -> Corruption {
        self.cfg
            .corruption
            .build(kind.unwrap_or(self.cfg.corruption.kind))
    }

    pub fn stage1(&self) -> Result<(ClassifierModel, TrainLog)> {
        let (m, log) = pipeline::train_stage1(&self.cfg.stage1, &self.cfg.models.b1, &self.train)?;
        self.persist("stage1", m.clone().into(), &self.cfg.stage1, &log)?;
        Ok((m, log))
    }

    /// Pretrains on the training images with labels ignored.
    pub fn pretrain(&self, kind: Option<CorruptionKind>) -> Result<(Autoencoder, TrainLog)> {
        let corruption = self.corruption(kind);
        let (ae, log) = pipeline::pretrain_cdae(
            &self.cfg.pretrain,
            &self.cfg.models.b2,
            &self.train,
            &corruption,
        )?;
        self.persist("pretrain", ae.clone().into(), &self.cfg.pretrain, &log)?;
        Ok((ae, log))
    }

    pub fn stage2(&self) -> Result<(ClassifierModel, TrainLog)> {
        let ae = match self.load("pretrain")? {
            AnyModel::Autoencoder(ae) => ae,
            other => {
                return Err(Error::Checkpoint(format!(
                    "pretrain holds a {}",
                    other.kind()
                )))
            }
        };
        let (m, log) = pipeline::finetune_stage2(&self.cfg.stage2, ae.into_encoder(), &self.train)?;
        self.persist("stage2", m.clone().into(), &self.cfg.stage2, &log)?;
        Ok((m, log))
    }

    pub fn stage3(&self) -> Result<(FusionModel, TrainLog)> {
        let b1 = self.load_classifier("stage1")?;
        let b2 = self.load_classifier("stage2")?;
        let (m, log) = pipeline::train_stage3(
            &self.cfg.stage3,
            b1,
            b2,
            &self.cfg.models.fusion,
            &self.train,
        )?;
        self.persist("stage3", m.clone().into(), &self.cfg.stage3, &log)?;
        Ok((m, log))
    }

    /// Evaluates the fusion model and both backbones on the test split.
    pub fn eval(&self) -> Result<MetricsReport> {
        let fusion = match self.load("stage3")? {
            AnyModel::Fusion(m) => m,
            other => {
                return Err(Error::Checkpoint(format!(
                    "stage3 holds a {}",
                    other.kind()
                )))
            }
        };
        for (name, model) in [("b1", fusion.b1()), ("b2", fusion.b2())] {
            let r = pipeline::evaluate(model, &self.test)?;
            fs::write(self.dir().join(format!("report_{name}.txt")), r.to_string())?;
        }
        let report = pipeline::evaluate(&fusion, &self.test)?;
        fs::write(self.dir().join("report.txt"), report.to_string())?;
        Ok(report)
    }

    /// `stage1 -> pretrain -> stage2 -> stage3 -> eval`.
    pub fn pipeline(&self) -> Result<MetricsReport> {
        self.stage1()?;
        self.pretrain(None)?;
        self.stage2()?;
        self.stage3()?;
        self.eval()
    }

    /// Pretrains under every corruption, finetunes each encoder and scores
    /// it on the validation split.
    pub fn ablate(&self) -> Result<Vec<AblationResult>> {
        let corruptions: Vec<Corruption> = CorruptionKind::ALL
            .iter()
            .map(|&k| self.corruption(Some(k)))
            .collect();
        let finetune = AblationFinetune {
            cfg: &self.cfg.stage2,
            train: &self.train,
            val: &self.val,
        };
        let results = pipeline::ablate(
            &self.cfg.pretrain,
            &self.cfg.models.b2,
            &self.train,
            &corruptions,
            Some(&finetune),
        )?;
        for r in &results {
            r.pretrain.write_jsonl(fs::File::create(
                self.log_path(&format!("ablate_{}", r.corruption)),
            )?)?;
        }
        fs::write(
            self.dir().join("ablation.txt"),
            pipeline::ablation_table(&results),
        )?;
        Ok(results)
    }
}

/// Human-readable summary of whatever a run directory contains.
pub fn summarize(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::Data(format!(
            "{} is not a run directory",
            dir.display()
        )));
    }
    let mut out = format!("run directory {}\n", dir.display());
    for name in ["stage1", "pretrain", "stage2", "stage3"] {
        let path = dir.join("logs").join(format!("{name}.jsonl"));
        if !path.exists() {
            continue;
        }
        let log = TrainLog::read_jsonl(BufReader::new(fs::File::open(&path)?))?;
        if let (Some(first), Some(last)) = (log.records.first(), log.records.last()) {
            let time: f64 = log.records.iter().map(|r| r.wall_time).sum();
            out.push_str(&format!(
                "{name:<9} epochs {:>3}  loss {:.6} -> {:.6}  ({time:.1}s)\n",
                log.records.len(),
                first.loss,
                last.loss
            ));
        }
    }
    for (title, file) in [
        ("fusion (test)", "report.txt"),
        ("b1 (test)", "report_b1.txt"),
        ("b2 (test)", "report_b2.txt"),
    ] {
        let path = dir.join(file);
        if path.exists() {
            let report: MetricsReport = fs::read_to_string(&path)?.parse()?;
            out.push_str(&format!(
                "{title:<14} accuracy {:.4}  macro_f1 {:.4}\n",
                report.accuracy, report.macro_f1
            ));
        }
    }
    let ablation = dir.join("ablation.txt");
    if ablation.exists() {
        out.push_str("ablation:\n");
        out.push_str(&fs::read_to_string(ablation)?);
    }
    Ok(out)
}
