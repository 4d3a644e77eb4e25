use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::artifact::MODEL_ARTIFACT;
use super::metrics::{auroc, EvalReport};
use super::model::{batch_loss_and_grad, Network, Sample};
use super::splits::DatasetSplits;
use super::tracking::{RunStatus, Tracking};
use super::{AnyNetwork, BundleData, ModelSpec, TrainError, TrainedModel, TrainerConfig};
use crate::features::{FeatureBundle, Preprocessor};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the validation split lacks a class.
    pub val_auroc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: TrainedModel,
    pub test_report: EvalReport,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, n: usize) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains, evaluates on the test split and, with `tracking`, records the run.
pub fn train(
    spec: &ModelSpec,
    bundle: &FeatureBundle,
    splits: &DatasetSplits,
    config: &TrainerConfig,
    tracking: Option<Tracking<'_>>,
) -> Result<(TrainedModel, EvalReport), TrainError> {
    train_detailed(spec, bundle, splits, config, tracking).map(|o| (o.model, o.test_report))
}

pub fn train_detailed(
    spec: &ModelSpec,
    bundle: &FeatureBundle,
    splits: &DatasetSplits,
    config: &TrainerConfig,
    tracking: Option<Tracking<'_>>,
) -> Result<TrainOutcome, TrainError> {
    spec.validate()?;
    config.validate()?;
    check_splits(bundle, splits)?;

    let Some(tracking) = tracking else {
        return fit(spec, bundle, splits, config, &mut |_, _, _| Ok(()));
    };
    let tracker = tracking.tracker;
    let run_id = tracker.create_run(&tracking.experiment)?;
    let result = (|| {
        for (k, v) in run_params(spec, bundle, splits, config) {
            tracker.log_param(&run_id, &k, &v)?;
        }
        let mut outcome = fit(spec, bundle, splits, config, &mut |key, step, value| {
            tracker.log_metric(&run_id, key, step, value).map_err(Into::into)
        })?;
        outcome.model.run_id = Some(run_id.clone());
        let r = &outcome.test_report;
        let finals = [
            ("test_auroc", r.auroc),
            ("test_auprc", r.auprc),
            ("test_brier", Some(r.brier)),
            ("test_accuracy", Some(r.accuracy_at_0_5)),
        ];
        for (key, value) in finals {
            if let Some(v) = value {
                tracker.log_metric(&run_id, key, 0, v)?;
            }
        }
        tracker.log_param(&run_id, "train.best_epoch", &outcome.best_epoch.to_string())?;
        tracker.log_artifact(&run_id, MODEL_ARTIFACT, &outcome.model.to_bytes())?;
        Ok(outcome)
    })();
    match result {
        Ok(outcome) => {
            tracker.finish_run(&run_id, RunStatus::Finished)?;
            Ok(outcome)
        }
        Err(e) => {
            let _ = tracker.finish_run(&run_id, RunStatus::Failed);
            Err(e)
        }
    }
}

fn check_splits(bundle: &FeatureBundle, splits: &DatasetSplits) -> Result<(), TrainError> {
    let n = bundle.len();
    let mut seen = vec![false; n];
    for &i in splits.train.iter().chain(&splits.validation).chain(&splits.test) {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(TrainError::ShapeMismatch(format!(
                "split index {i} is out of range or repeated for {n} rows"
            )));
        }
    }
    if splits.train.is_empty() {
        return Err(TrainError::ShapeMismatch("training split is empty".into()));
    }
    Ok(())
}

fn run_params(
    spec: &ModelSpec,
    bundle: &FeatureBundle,
    splits: &DatasetSplits,
    config: &TrainerConfig,
) -> Vec<(String, String)> {
    let sig = bundle.signature();
    let (n_train, n_val, n_test) = splits.sizes();
    let mut out = spec.params();
    out.extend([
        ("trainer.max_epochs".into(), config.max_epochs.to_string()),
        ("trainer.batch_size".into(), config.batch_size.to_string()),
        ("trainer.learning_rate".into(), config.learning_rate.to_string()),
        (
            "trainer.early_stop_patience".into(),
            config.early_stop_patience.to_string(),
        ),
        ("trainer.seed".into(), config.seed.to_string()),
        ("data.outcome".into(), bundle.outcome_name.clone()),
        ("data.cohort_hash".into(), bundle.cohort.content_hash()),
        (
            "data.signature".into(),
            format!("{},{},{}", sig.n_static, sig.n_bins, sig.n_channels),
        ),
        ("data.n_train".into(), n_train.to_string()),
        ("data.n_validation".into(), n_val.to_string()),
        ("data.n_test".into(), n_test.to_string()),
        ("split.seed".into(), splits.seed.to_string()),
        (
            "split.ratios".into(),
            splits.ratios.map(|r| r.to_string()).join(","),
        ),
    ]);
    out
}

type MetricSink<'a> = dyn FnMut(&str, i64, f64) -> Result<(), TrainError> + 'a;

fn fit(
    spec: &ModelSpec,
    bundle: &FeatureBundle,
    splits: &DatasetSplits,
    config: &TrainerConfig,
    log: &mut MetricSink<'_>,
) -> Result<TrainOutcome, TrainError> {
    let data = BundleData::new(bundle);
    let labels: Vec<f64> = bundle.labels.iter().map(|&y| f64::from(y)).collect();
    let val_labels: Vec<u8> = splits.validation.iter().map(|&i| bundle.labels[i]).collect();
    let val_scored = val_labels.contains(&0) && val_labels.contains(&1);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut network = AnyNetwork::<f64>::build(spec, bundle.signature(), config.seed);
    let dropout = matches!(spec, ModelSpec::Recurrent { dropout, .. } if *dropout > 0.0);
    let mut adam = Adam::new(config.learning_rate, network.params().len());
    let mut grad = vec![0.0; network.params().len()];

    let mut order = splits.train.clone();
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, AnyNetwork<f64>)> = None;
    let mut since_best = 0;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<(Sample<'_, f64>, f64)> =
                chunk.iter().map(|&i| (data.sample(i), labels[i])).collect();
            let rng_ref = if dropout { Some(&mut rng) } else { None };
            let loss = batch_loss_and_grad(&network, &batch, &mut grad, rng_ref);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            adam.step(network.params_mut(), &grad);
            if network.params().iter().any(|p| !p.is_finite()) {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            total += loss * chunk.len() as f64;
        }
        let train_loss = total / order.len() as f64;
        log("train_loss", epoch as i64, train_loss)?;

        // Candidates are judged in the precision they will be stored in.
        let mut candidate = network.clone();
        candidate.quantize();
        let val_auroc = if val_scored {
            let scores: Vec<f64> = splits
                .validation
                .iter()
                .map(|&i| candidate.probability(&data.sample(i)))
                .collect();
            let v = auroc(&scores, &val_labels)?;
            log("val_auroc", epoch as i64, v)?;
            Some(v)
        } else {
            None
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_auroc,
        });

        let score = val_auroc.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s) {
            best = Some((score, epoch, candidate));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.early_stop_patience {
                break;
            }
        }
    }

    let (_, best_epoch, network) = best.expect("at least one epoch runs");
    let model = TrainedModel {
        spec: spec.clone(),
        network,
        preprocessor: Preprocessor {
            signature: bundle.signature(),
            stats: bundle.stats.clone(),
        },
        run_id: None,
    };
    let test_scores = model.score_rows(bundle, &splits.test);
    let test_labels: Vec<u8> = splits.test.iter().map(|&i| bundle.labels[i]).collect();
    let test_report = EvalReport::compute(&test_scores, &test_labels, "test")?;
    Ok(TrainOutcome {
        model,
        test_report,
        history,
        best_epoch,
    })
}
