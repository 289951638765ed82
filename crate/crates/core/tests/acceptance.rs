//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any
//! failure. The full-scale criteria (5, 6, 7, 9) share two default
//! pipeline runs at master seed 0.

mod support;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use cdae::checkpoint::{load_checkpoint, Checkpoint, CheckpointMeta};
use cdae::config::RunConfig;
use cdae::corruption::{logistic_map, ChaosParams, Corruption, CorruptionKind};
use cdae::image::{ImageBatch, ImageDims};
use cdae::metrics::ConfusionMatrix;
use cdae::models::{AnyModel, Autoencoder, ClassifierModel, EncoderConfig, FusionModel};
use cdae::nn::Parameters;
use cdae::optim::{AdamW, AdamWConfig, CosineSchedule};
use cdae::pipeline::{
    ablate, ablation_table, evaluate, finetune_stage2, init_autoencoder, pretrain_cdae, Stage,
};
use cdae::run::Run;
use cdae::seed;
use cdae::tensor::{Tape, Tensor};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn metrics_oracle() -> Outcome {
    use support::published::*;
    let mut details = Vec::new();
    let mut ok = true;
    for (name, rows, acc, f1) in [
        ("ISIC", isic_rows(), ISIC_ACCURACY, ISIC_MACRO_F1),
        ("APTOS", aptos_rows(), APTOS_ACCURACY, APTOS_MACRO_F1),
    ] {
        let cm = ConfusionMatrix::from_rows(&rows).map_err(|e| e.to_string())?;
        let a = cm.accuracy().map_err(|e| e.to_string())?;
        let f = cm.macro_f1();
        ok &= format!("{a:.4}") == format!("{acc:.4}") && (f - f1).abs() <= 5e-4;
        ok &= a == reference_accuracy(&rows) && (f - reference_macro_f1(&rows)).abs() < 1e-15;
        details.push(format!("{name} accuracy {a:.4} macro-F1 {f:.4}"));
    }
    ensure(ok, details.join(", "))
}

fn chaos_properties() -> Outcome {
    let p = ChaosParams::default();
    let mut rng = seed::rng(2);
    let xs: Vec<f64> = (0..1_000_000).map(|_| rng.random::<f64>()).collect();
    let batch =
        ImageBatch::new(xs.len(), ImageDims::square(1, 1), xs).map_err(|e| e.to_string())?;
    let a = logistic_map(&batch, &p).map_err(|e| e.to_string())?;
    let b = logistic_map(&batch, &p).map_err(|e| e.to_string())?;
    let max = a.data().iter().copied().fold(f64::MIN, f64::max);
    let in_range = a.data().iter().all(|&v| (0.0..=0.9975).contains(&v));
    let identical = a
        .data()
        .iter()
        .zip(b.data())
        .all(|(x, y)| x.to_bits() == y.to_bits());
    let endpoints = p.map(0.5) == 0.9975 && p.map(0.0) == 0.0 && p.map(1.0) == 0.0;
    let asym = (0..10_000)
        .map(|_| {
            let v: f64 = rng.random();
            (p.map(v) - p.map(1.0 - v)).abs()
        })
        .fold(0.0, f64::max);
    ensure(
        in_range && (max - p.r() / 4.0).abs() <= 1e-9 && endpoints && asym <= 1e-15 && identical,
        format!(
            "range ok {in_range}, max {max:.12}, T(0.5) {}, symmetry gap {asym:.1e}, repeat bit-identical {identical}",
            p.map(0.5)
        ),
    )
}

fn gradient_suite() -> Outcome {
    let results = support::gradients::suite();
    let (worst_name, worst) = results
        .iter()
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .cloned()
        .unwrap_or_default();
    let failing: Vec<&str> = results
        .iter()
        .filter(|r| r.1.is_nan() || r.1 >= 1e-6)
        .map(|r| r.0.as_str())
        .collect();
    ensure(
        failing.is_empty(),
        format!(
            "{} checks x {} configurations, worst {worst:.2e} ({worst_name}){}",
            results.len(),
            support::gradients::CONFIGS,
            if failing.is_empty() {
                String::new()
            } else {
                format!(", failing: {failing:?}")
            }
        ),
    )
}

fn optimizer_oracle() -> Outcome {
    let mut theta = Tensor::zeros(&[1]).with_requires_grad(true);
    theta.accumulate_grad(&[1.0]).map_err(|e| e.to_string())?;
    let mut opt = AdamW::new(AdamWConfig::default()).map_err(|e| e.to_string())?;
    opt.step(&mut [&mut theta], 1e-4)
        .map_err(|e| e.to_string())?;
    let step = theta.data()[0];
    let mut ends = true;
    for eta_min in [0.0, 1e-6] {
        let s = CosineSchedule::new(1e-4, eta_min, 20).map_err(|e| e.to_string())?;
        ends &= s.lr(0).map_err(|e| e.to_string())? == 1e-4
            && s.lr(20).map_err(|e| e.to_string())? == eta_min;
    }
    ensure(
        (step - -9.99999995e-5).abs() <= 1e-12 && ends,
        format!("theta after one step {step:.10e}, cosine endpoints exact {ends}"),
    )
}

/// Two default pipeline runs at master seed 0 in separate directories.
struct Pipelines {
    a: Run,
    reports: [String; 2],
    seconds: f64,
}

fn pipelines() -> &'static Result<Pipelines, String> {
    static CELL: OnceLock<Result<Pipelines, String>> = OnceLock::new();
    CELL.get_or_init(|| {
        let root = std::env::temp_dir().join(format!("cdae-acceptance-{}", std::process::id()));
        let start = Instant::now();
        let mut runs = Vec::new();
        let mut reports = Vec::new();
        for name in ["a", "b"] {
            let mut cfg = RunConfig::from_seed(0);
            cfg.out_dir = root.join(name);
            let run = Run::open(cfg).map_err(|e| e.to_string())?;
            run.pipeline().map_err(|e| e.to_string())?;
            reports.push(
                std::fs::read_to_string(run.dir().join("report.txt")).map_err(|e| e.to_string())?,
            );
            runs.push(run);
        }
        let seconds = start.elapsed().as_secs_f64();
        let a = runs.swap_remove(0);
        Ok(Pipelines {
            a,
            reports: [reports[0].clone(), reports[1].clone()],
            seconds,
        })
    })
}

fn shared() -> Result<&'static Pipelines, String> {
    pipelines()
        .as_ref()
        .map_err(|e| format!("pipeline run failed: {e}"))
}

fn classifier(path: &Path) -> Result<ClassifierModel, String> {
    match load_checkpoint(path).map_err(|e| e.to_string())?.model {
        AnyModel::Classifier(m) => Ok(m),
        other => Err(format!("{} holds a {}", path.display(), other.kind())),
    }
}

fn fusion(path: &Path) -> Result<FusionModel, String> {
    match load_checkpoint(path).map_err(|e| e.to_string())?.model {
        AnyModel::Fusion(m) => Ok(m),
        other => Err(format!("{} holds a {}", path.display(), other.kind())),
    }
}

fn freezing_contract() -> Outcome {
    let run = &shared()?.a;
    let b1 = classifier(&run.checkpoint_path("stage1"))?;
    let b2 = classifier(&run.checkpoint_path("stage2"))?;
    let f = fusion(&run.checkpoint_path("stage3"))?;
    let same = f.b1().checksum() == b1.checksum() && f.b2().checksum() == b2.checksum();
    let heads = f.attention.param_count() + f.classifier.param_count();
    ensure(
        same && f.trainable_count() == heads && f.head_param_count() == heads,
        format!(
            "backbone checksums unchanged {same}, trainable {} = attention {} + classifier {}",
            f.trainable_count(),
            f.attention.param_count(),
            f.classifier.param_count()
        ),
    )
}

fn pretraining_learnability() -> Outcome {
    let run = &shared()?.a;
    let log = cdae::pipeline::TrainLog::read_jsonl(std::io::BufReader::new(
        std::fs::File::open(run.log_path("pretrain")).map_err(|e| e.to_string())?,
    ))
    .map_err(|e| e.to_string())?;
    let (first, last) = (
        log.first_loss().unwrap_or(f64::NAN),
        log.final_loss().unwrap_or(f64::NAN),
    );
    let ratio = last / first;
    ensure(
        log.records.len() == 30 && ratio <= 0.2,
        format!(
            "{} epochs, MSE {first:.5} -> {last:.5}, ratio {ratio:.3}",
            log.records.len()
        ),
    )
}

fn cdae_benefit() -> Outcome {
    let run = &shared()?.a;
    let cfg = &run.cfg;
    let read_log = |name: &str| -> Result<Vec<f64>, String> {
        let file = std::fs::File::open(run.log_path(name)).map_err(|e| e.to_string())?;
        Ok(
            cdae::pipeline::TrainLog::read_jsonl(std::io::BufReader::new(file))
                .map_err(|e| e.to_string())?
                .losses(),
        )
    };
    let pretrained = read_log("stage2")?;
    // Same encoder initialisation the CDAE run started from, without pretraining.
    let fresh = init_autoencoder(&cfg.pretrain, &cfg.models.b2, &run.train)
        .map_err(|e| e.to_string())?
        .into_encoder();
    let (_, random_log) =
        finetune_stage2(&cfg.stage2, fresh, &run.train).map_err(|e| e.to_string())?;
    let random = random_log.losses();
    let (lc, lr) = (pretrained[2], random[2]);

    let acc = |m: &dyn cdae::models::Classify| {
        evaluate(m, &run.val)
            .map(|r| r.accuracy)
            .map_err(|e| e.to_string())
    };
    let a1 = acc(&classifier(&run.checkpoint_path("stage1"))?)?;
    let a2 = acc(&classifier(&run.checkpoint_path("stage2"))?)?;
    let af = acc(&fusion(&run.checkpoint_path("stage3"))?)?;
    ensure(
        lc < lr && af >= a1.max(a2) - 0.02,
        format!(
            "epoch-3 loss CDAE {lc:.4} vs random {lr:.4}; val accuracy fusion {af:.4}, B1 {a1:.4}, B2 {a2:.4}"
        ),
    )
}

fn ablation_harness() -> Outcome {
    use support::small::{dataset, narrow, stage};
    let data = dataset(8);
    let cfg = stage(Stage::CdaePretrain, 3, 4);
    let corruptions: Vec<Corruption> = CorruptionKind::ALL
        .iter()
        .map(|&k| Corruption::from_parts(k, ChaosParams::default(), Default::default()))
        .collect();
    let results = ablate(&cfg, &narrow(), &data, &corruptions, None).map_err(|e| e.to_string())?;
    let mut identical = results.len() == 3;
    for (r, c) in results.iter().zip(&corruptions) {
        let (ae, log) = pretrain_cdae(&cfg, &narrow(), &data, c).map_err(|e| e.to_string())?;
        identical &= r.autoencoder_checksum == ae.checksum() && r.pretrain.losses() == log.losses();
    }
    let distinct = results
        .iter()
        .map(|r| r.autoencoder_checksum)
        .collect::<std::collections::BTreeSet<_>>()
        .len()
        == 3;
    let table = ablation_table(&results);
    let reported = ["chaotic", "mask", "gaussian"]
        .iter()
        .all(|k| table.contains(k));
    ensure(
        identical && distinct && reported,
        format!("each arm equals standalone pretraining {identical}, outcomes distinct {distinct}, report lists all three {reported}"),
    )
}

fn determinism() -> Outcome {
    let p = shared()?;
    let [a, b] = &p.reports;
    ensure(
        a == b && !a.is_empty(),
        format!(
            "final reports identical {} ({} bytes), two pipelines took {:.0}s",
            a == b,
            a.len(),
            p.seconds
        ),
    )
}

fn checkpoint_round_trip() -> Outcome {
    let mut r = seed::rng(10);
    let err = |e: cdae::Error| e.to_string();
    let ae = Autoencoder::new(EncoderConfig::narrow(), 32, &mut r).map_err(err)?;
    let mut b1 = ClassifierModel::new(EncoderConfig::wide(), 4, &mut r).map_err(err)?;
    let mut b2 = ClassifierModel::new(EncoderConfig::narrow(), 4, &mut r).map_err(err)?;
    let unfrozen = b2.clone();
    b1.freeze();
    b2.freeze();
    let fused = FusionModel::new(b1, b2, 4, &mut r).map_err(err)?;
    let models: Vec<AnyModel> = vec![ae.into(), unfrozen.into(), fused.into()];
    let mut ok = true;
    let mut kinds = Vec::new();
    for model in models {
        let back = Checkpoint::from_bytes(
            &Checkpoint::new(model.clone(), CheckpointMeta::default()).to_bytes(),
        )
        .map_err(err)?
        .model;
        for input in 0..10 {
            let x = support::gradients::tensor(
                &mut support::gradients::rng(100 + input),
                &[2, 3, 32, 32],
                0.0,
                1.0,
            );
            let run = |m: &AnyModel| -> Result<Vec<u64>, String> {
                let mut tape = Tape::new();
                let xv = tape.constant(x.shape(), x.data().to_vec()).map_err(err)?;
                let y = m.forward(&mut tape, xv).map_err(err)?;
                Ok(tape.value(y).iter().map(|v| v.to_bits()).collect())
            };
            ok &= run(&model)? == run(&back)?;
        }
        kinds.push(model.kind());
    }
    ensure(
        ok,
        format!("{} bit-identical on 10 inputs each: {ok}", kinds.join(", ")),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("metrics oracle", metrics_oracle),
        ("chaotic map properties", chaos_properties),
        ("gradient correctness", gradient_suite),
        ("optimizer oracle", optimizer_oracle),
        ("freezing contract", freezing_contract),
        ("pretraining learnability", pretraining_learnability),
        ("pretraining benefit", cdae_benefit),
        ("ablation harness", ablation_harness),
        ("end-to-end determinism", determinism),
        ("checkpoint round trip", checkpoint_round_trip),
    ];
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|panic| {
            let msg = panic
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let (status, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {:>2} {status} {name}: {detail} [{:.1}s]",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    if let Ok(p) = shared() {
        let _ = std::fs::remove_dir_all(p.a.dir().parent().unwrap_or(p.a.dir()));
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    }
}
