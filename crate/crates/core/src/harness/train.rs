//! Training and evaluation loops.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::{Instance, MissingPattern};
use crate::error::{Error, Result};
use crate::head::HeadKind;
use crate::memory::{build_memory, BankDims, MemoryBank};
use crate::model::{Model, Prepared};
use crate::numerics::{AdamWConfig, AdamWState, ParamStore, Tape};

use super::config::ExperimentConfig;
use super::metrics::{accuracy, argmax, auroc_multiclass, f1_micro, f1_sample, one_hot};
use super::missing::apply_missing_pattern;
use super::synthetic::{generate_synthetic, Dataset};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternMetrics {
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub auroc: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auroc_note: Option<String>,
    pub f1_micro: f64,
    pub f1_sample: f64,
    /// Keyed by `full`, `text_only`, `image_only`.
    pub per_pattern: BTreeMap<String, PatternMetrics>,
    pub test_size: usize,
    pub loss_curve: Vec<f64>,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// Excluded from serialized reports so identical runs serialize identically.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

/// Data, memory bank and masked splits for one run.
#[derive(Debug, Clone)]
pub struct RunData {
    pub dataset: Dataset,
    pub bank: MemoryBank,
    pub train: Vec<Instance>,
    pub test: Vec<Instance>,
}

/// Generates data, builds the bank from the complete train and validation
/// splits, and masks train and test at their configured rates.
pub fn prepare_data(cfg: &ExperimentConfig, model: &Model) -> Result<RunData> {
    let dataset = generate_synthetic(&cfg.data, &cfg.model, cfg.seed)?;
    let corpus: Vec<Instance> = dataset.train.iter().chain(&dataset.val).cloned().collect();
    let dims = BankDims {
        n: cfg.model.n,
        m: cfg.model.m,
        d: cfg.model.d,
        classes: cfg.model.classes,
    };
    let bank = build_memory(&model.encoders, &corpus, dims)?;
    let train = apply_missing_pattern(&dataset.train, cfg.missing_type, cfg.train_rate(), cfg.seed ^ 0x7472)?;
    let test = apply_missing_pattern(&dataset.test, cfg.missing_type, cfg.missing_rate, cfg.seed ^ 0x7465)?;
    let bank_ids: BTreeSet<u64> = bank.source_ids().collect();
    if let Some(leak) = test.iter().find(|i| bank_ids.contains(&i.id)) {
        return Err(Error::Precondition(format!(
            "test instance {} is in the memory bank",
            leak.id
        )));
    }
    Ok(RunData {
        dataset,
        bank,
        train,
        test,
    })
}

pub fn prepare_all(model: &Model, bank: &MemoryBank, instances: &[Instance]) -> Result<Vec<Prepared>> {
    instances.iter().map(|i| model.prepare(Some(bank), i)).collect()
}

/// Mini-batch AdamW over the trainable parameters; returns the mean training
/// loss of each epoch.
pub fn train(cfg: &ExperimentConfig, model: &Model, store: &mut ParamStore, train: &[Prepared]) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Precondition("training set is empty".into()));
    }
    let mut opt = AdamWState::new(
        store,
        AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006f_7264_6572);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6472_6f70);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            store.zero_grad();
            let weight = 1.0 / batch.len() as f64;
            for &i in batch {
                let mut tape = Tape::new();
                let (loss, _) = model.loss(&mut tape, store, &train[i], Some(&mut dropout_rng))?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        step,
                        reason: format!("loss is {value} on instance {}", train[i].id),
                    });
                }
                total += value;
                let scaled = tape.scale(loss, weight);
                tape.backward_into(scaled, store)?;
            }
            opt.step(store).map_err(|e| Error::Divergence {
                epoch,
                step,
                reason: e.to_string(),
            })?;
        }
        curve.push(total / train.len() as f64);
    }
    Ok(curve)
}

/// Mean loss over a set, evaluation mode.
pub fn mean_loss(model: &Model, store: &ParamStore, set: &[Prepared]) -> Result<f64> {
    let mut total = 0.0;
    for p in set {
        let mut tape = Tape::new();
        let (loss, _) = model.loss(&mut tape, store, p, None)?;
        total += tape.scalar(loss);
    }
    Ok(total / set.len().max(1) as f64)
}

fn pattern_key(p: MissingPattern) -> &'static str {
    match p {
        MissingPattern::Full => "full",
        MissingPattern::TextMissing => "image_only",
        MissingPattern::ImageMissing => "text_only",
    }
}

/// Test metrics; the loss curve, seed and config echo are left empty.
pub fn evaluate(model: &Model, store: &ParamStore, test: &[Prepared]) -> Result<MetricsReport> {
    let classes = model.config.classes;
    let mut probs = Vec::with_capacity(test.len());
    for p in test {
        probs.push(model.predict_probs(store, p)?);
    }
    let labels: Vec<usize> = test.iter().map(|p| p.label).collect();
    let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let pred_sets: Vec<Vec<bool>> = match model.config.head {
        HeadKind::Softmax => predicted.iter().map(|&c| one_hot(c, classes)).collect(),
        HeadKind::Sigmoid => probs.iter().map(|p| p.iter().map(|&v| v >= 0.5).collect()).collect(),
    };
    let true_sets: Vec<Vec<bool>> = labels.iter().map(|&y| one_hot(y, classes)).collect();
    let (auroc, auroc_note) = match auroc_multiclass(&probs, &labels, classes) {
        Ok(v) => (Some(v), None),
        Err(reason) => (None, Some(reason)),
    };
    let mut per_pattern = BTreeMap::new();
    for pattern in [
        MissingPattern::Full,
        MissingPattern::TextMissing,
        MissingPattern::ImageMissing,
    ] {
        let idx: Vec<usize> = (0..test.len()).filter(|&i| test[i].pattern == pattern).collect();
        let pp: Vec<usize> = idx.iter().map(|&i| predicted[i]).collect();
        let ll: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        per_pattern.insert(
            pattern_key(pattern).to_string(),
            PatternMetrics {
                count: idx.len(),
                accuracy: accuracy(&pp, &ll),
            },
        );
    }
    Ok(MetricsReport {
        accuracy: accuracy(&predicted, &labels),
        auroc,
        auroc_note,
        f1_micro: f1_micro(&pred_sets, &true_sets),
        f1_sample: f1_sample(&pred_sets, &true_sets),
        per_pattern,
        test_size: test.len(),
        loss_curve: Vec::new(),
        seed: 0,
        config: BTreeMap::new(),
        wall_clock_secs: 0.0,
    })
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: MetricsReport,
    pub model: Model,
    pub store: ParamStore,
    pub data: RunData,
}

/// Generate, build memory, mask, train and evaluate one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (model, mut store) = Model::new(cfg.model_config())?;
    let data = prepare_data(cfg, &model)?;
    let train_set = prepare_all(&model, &data.bank, &data.train)?;
    let test_set = prepare_all(&model, &data.bank, &data.test)?;
    let curve = train(cfg, &model, &mut store, &train_set)?;
    let mut report = evaluate(&model, &store, &test_set)?;
    report.loss_curve = curve;
    report.seed = cfg.seed;
    report.config = cfg.to_pairs();
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(RunOutcome {
        report,
        model,
        store,
        data,
    })
}
