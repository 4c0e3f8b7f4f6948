//! Pseudo-bias balanced learning.
//!
//! The pipeline deliberately trains a *biased* model first: pseudo-bias
//! labels start as the targets, a fresh network is fit for `biased_steps`
//! with generalized cross entropy against them (latching onto the easiest
//! separating feature), the ROC of its training-set scores against the
//! current pseudo labels yields a Youden-optimal threshold, and
//! thresholding the scores updates the pseudo labels. After the configured
//! number of capture passes, per-bias-class target priors are estimated
//! from the pseudo labels and a fresh debiased model is trained with the
//! bias-balanced loss, selected by best validation AUC.
//!
//! Pseudo-bias class orientation is unidentifiable without ground truth;
//! everything downstream (priors, the balanced loss) is invariant under a
//! consistent relabeling, and agreement diagnostics report the better
//! orientation.

use serde::{Deserialize, Serialize};

use crate::datagen::{alignment_tags, Alignment, SampleTable, Split};
use crate::error::{Error, Result};
use crate::losses::PriorTable;
use crate::metrics::{group_auc_report, roc_curve, youden_threshold, GroupAucReport};
use crate::model::{init_mlp, positive_scores, MlpParams};
use crate::seed::mix;
use crate::trainer::{
    train_model, CheckpointSelection, LossSelector, TrainConfig, TrainData, TrainHistory,
    TrainOutcome,
};

/// How the current pseudo-bias labels were produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    InitFromTarget,
    Thresholded,
}

/// Per-sample bias estimates over the training split.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoBiasLabels {
    pub labels: Vec<usize>,
    pub iteration: u32,
    pub provenance: Provenance,
    /// Youden threshold that produced the labels; absent at initialization.
    pub threshold: Option<f64>,
}

impl PseudoBiasLabels {
    pub fn init_from_target(targets: &[usize]) -> Self {
        PseudoBiasLabels {
            labels: targets.to_vec(),
            iteration: 0,
            provenance: Provenance::InitFromTarget,
            threshold: None,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.labels.iter().all(|&b| b == 0) || self.labels.iter().all(|&b| b == 1)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PbblConfig {
    /// Capture passes (N).
    pub num_capture_iters: u32,
    /// Steps for each biased-model fit (T_B).
    pub biased_steps: usize,
    /// Steps for the debiased fit (T_D).
    pub debiased_steps: usize,
    pub gce_q: f64,
    pub smoothing_alpha: f64,
    /// Hidden layer widths of both networks.
    pub hidden_dims: Vec<usize>,
    /// Optimizer/batch/eval settings shared by both phases; its `steps`,
    /// `seed` and `selection` fields are overridden per phase.
    pub trainer: TrainConfig,
    /// Skip capture and use ground-truth bias labels (the upper-bound mode).
    pub oracle_mode: bool,
    pub seed: u64,
}

impl Default for PbblConfig {
    fn default() -> Self {
        PbblConfig {
            num_capture_iters: 1,
            biased_steps: 1000,
            debiased_steps: 1000,
            gce_q: 0.7,
            smoothing_alpha: 1.0,
            hidden_dims: vec![32, 32],
            trainer: TrainConfig::default(),
            oracle_mode: false,
            seed: 42,
        }
    }
}

impl PbblConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_capture_iters < 1 {
            return Err(Error::Config("capture iterations must be >= 1".into()));
        }
        if self.biased_steps < 1 || self.debiased_steps < 1 {
            return Err(Error::Config("phase step counts must be >= 1".into()));
        }
        if !(self.gce_q > 0.0 && self.gce_q <= 1.0) {
            return Err(Error::Config(format!(
                "gce q must lie in (0,1], got {}",
                self.gce_q
            )));
        }
        if self.smoothing_alpha < 0.0 {
            return Err(Error::Config("smoothing alpha must be >= 0".into()));
        }
        self.trainer.validate()
    }

    fn dims(&self, input_dim: usize) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(2);
        dims
    }
}

/// Tallies counts of (target class, bias class) pairs into a smoothed
/// prior table.
pub fn estimate_priors(
    targets: &[usize],
    pseudo_bias: &[usize],
    smoothing_alpha: f64,
) -> Result<PriorTable> {
    if targets.is_empty() {
        return Err(Error::Config("cannot estimate priors from empty input".into()));
    }
    if targets.len() != pseudo_bias.len() {
        return Err(Error::Dim(format!(
            "{} targets vs {} bias labels",
            targets.len(),
            pseudo_bias.len()
        )));
    }
    let num_classes = (targets.iter().max().unwrap() + 1).max(2);
    // Bias classes are taken as observed: a degenerate all-one-class label
    // vector collapses the table to the target marginal.
    let num_bias = pseudo_bias.iter().max().unwrap() + 1;
    let mut counts = vec![vec![0u64; num_bias]; num_classes];
    for (&y, &b) in targets.iter().zip(pseudo_bias.iter()) {
        counts[y][b] += 1;
    }
    PriorTable::from_counts(counts, smoothing_alpha)
}

/// Thresholds the biased model's scores at the Youden-optimal point of
/// their ROC against the current labels: label 1 iff `score >= tau`.
pub fn assign_pseudo_bias(
    biased_scores: &[f64],
    current_labels: &[usize],
) -> Result<PseudoBiasLabels> {
    let roc = roc_curve(biased_scores, current_labels)?;
    let tau = youden_threshold(&roc);
    Ok(PseudoBiasLabels {
        labels: biased_scores.iter().map(|&s| usize::from(s >= tau)).collect(),
        iteration: 0,
        provenance: Provenance::Thresholded,
        threshold: Some(tau),
    })
}

/// Diagnostics for one capture pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptureIteration {
    pub iteration: u32,
    pub threshold: f64,
    pub pseudo_positive: usize,
    /// Fraction of pseudo labels equal to the true bias labels, when known.
    pub agreement_raw: Option<f64>,
    /// `max(agreement, 1 - agreement)`: class orientation is arbitrary.
    pub agreement_oriented: Option<f64>,
    pub final_train_loss: f64,
}

#[derive(Clone, Debug)]
pub struct CaptureOutcome {
    pub model: MlpParams,
    pub pseudo: PseudoBiasLabels,
    pub iterations: Vec<CaptureIteration>,
}

fn agreement(a: &[usize], b: &[usize]) -> f64 {
    let same = a.iter().zip(b.iter()).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

fn capture_train_data(
    table: &SampleTable,
    labels: &[usize],
    alignment: Option<&Vec<Alignment>>,
) -> TrainData {
    let train_idx = table.split_indices(Split::Train);
    let (val_features, val_labels, _) = table.extract(Split::Val);
    TrainData {
        train_features: table.features.gather_rows(&train_idx),
        train_labels: labels.to_vec(),
        train_bias: None,
        train_alignment: alignment.map(|tags| train_idx.iter().map(|&i| tags[i]).collect()),
        val_features,
        val_labels,
    }
}

// Seed streams for the phases of one run.
const CAPTURE_INIT_STREAM: u64 = 1_000;
const CAPTURE_TRAIN_STREAM: u64 = 2_000;

/// Iterative bias capture: initialize pseudo labels from the targets, then
/// repeatedly (re)fit a fresh GCE model against them and re-threshold its
/// training-set scores.
pub fn run_bias_capture(data: &SampleTable, config: &PbblConfig) -> Result<CaptureOutcome> {
    config.validate()?;
    let train_idx = data.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training split".into()));
    }
    let targets: Vec<usize> = train_idx.iter().map(|&i| data.target[i]).collect();
    let true_bias: Option<Vec<usize>> = data
        .bias
        .as_ref()
        .map(|b| train_idx.iter().map(|&i| b[i]).collect());
    let tags = data.bias.as_ref().map(|_| alignment_tags(data)).transpose()?;

    let mut pseudo = PseudoBiasLabels::init_from_target(&targets);
    let mut iterations = Vec::new();
    let mut model: Option<MlpParams> = None;
    let dims = config.dims(data.num_features());

    for n in 1..=config.num_capture_iters {
        let init = init_mlp(&dims, mix(config.seed, CAPTURE_INIT_STREAM + n as u64))?;
        let train_cfg = TrainConfig {
            steps: config.biased_steps,
            seed: mix(config.seed, CAPTURE_TRAIN_STREAM + n as u64),
            selection: CheckpointSelection::FinalStep,
            ..config.trainer.clone()
        };
        let tdata = capture_train_data(data, &pseudo.labels, tags.as_ref());
        let outcome = train_model(
            init,
            &tdata,
            &LossSelector::Generalized { q: config.gce_q },
            &train_cfg,
        )
        .map_err(|e| wrap_iteration(n, e))?;

        let scores = positive_scores(&outcome.params, &tdata.train_features)?;
        let mut next =
            assign_pseudo_bias(&scores, &pseudo.labels).map_err(|e| wrap_iteration(n, e))?;
        next.iteration = n;

        let (agreement_raw, agreement_oriented) = match &true_bias {
            Some(b) => {
                let a = agreement(&next.labels, b);
                (Some(a), Some(a.max(1.0 - a)))
            }
            None => (None, None),
        };
        iterations.push(CaptureIteration {
            iteration: n,
            threshold: next.threshold.expect("thresholded labels carry tau"),
            pseudo_positive: next.labels.iter().sum(),
            agreement_raw,
            agreement_oriented,
            final_train_loss: outcome
                .history
                .records
                .last()
                .expect("training records at final step")
                .train_loss,
        });
        pseudo = next;
        model = Some(outcome.params);
    }

    Ok(CaptureOutcome {
        model: model.expect("at least one capture iteration"),
        pseudo,
        iterations,
    })
}

fn wrap_iteration(n: u32, e: Error) -> Error {
    match e {
        Error::Degenerate(msg) => Error::Degenerate(format!("capture iteration {n}: {msg}")),
        other => other,
    }
}

/// Summary of the pseudo labels entering the debiased phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoSummary {
    pub provenance: Provenance,
    pub positives: usize,
    pub negatives: usize,
}

/// Everything a finished run reports; serialized as the run-report JSON.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub dataset: Option<String>,
    pub seed: u64,
    pub config: PbblConfig,
    /// Agreement of the initial pseudo labels (the targets) with the true
    /// bias labels, when known.
    pub initial_agreement: Option<f64>,
    pub capture_iterations: Vec<CaptureIteration>,
    pub bias_capture_degenerate: bool,
    pub pseudo_bias: PseudoSummary,
    pub priors: PriorTable,
    pub selected_step: usize,
    pub val: GroupAucReport,
    pub test: GroupAucReport,
    /// Filled by callers that persist artifacts.
    pub manifest: Option<String>,
}

#[derive(Clone, Debug)]
pub struct PbblOutcome {
    pub model: MlpParams,
    pub report: RunReport,
    pub debias_history: TrainHistory,
}

/// The full pipeline: bias capture (or ground-truth bias labels in oracle
/// mode), prior estimation, debiased training with the bias-balanced loss,
/// and group-wise evaluation of the selected checkpoint.
///
/// The debiased phase initializes and shuffles from `config.seed` exactly
/// as a standalone [`train_model`] run would, so oracle runs on
/// bias-balanced data are comparable step-for-step with plain CE runs.
pub fn run_pbbl(data: &SampleTable, config: &PbblConfig) -> Result<PbblOutcome> {
    config.validate()?;
    let train_idx = data.split_indices(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::Config("dataset has no training split".into()));
    }
    let targets: Vec<usize> = train_idx.iter().map(|&i| data.target[i]).collect();
    let true_bias: Option<Vec<usize>> = data
        .bias
        .as_ref()
        .map(|b| train_idx.iter().map(|&i| b[i]).collect());

    let (pseudo, capture_iterations) = if config.oracle_mode {
        let b = true_bias.clone().ok_or_else(|| {
            Error::Config("oracle mode needs ground-truth bias labels".into())
        })?;
        (
            PseudoBiasLabels {
                labels: b,
                iteration: 0,
                provenance: Provenance::InitFromTarget,
                threshold: None,
            },
            Vec::new(),
        )
    } else {
        let capture = run_bias_capture(data, config)?;
        (capture.pseudo, capture.iterations)
    };

    let initial_agreement = true_bias.as_ref().map(|b| agreement(&targets, b));
    let bias_capture_degenerate = pseudo.is_degenerate();
    let priors = estimate_priors(&targets, &pseudo.labels, config.smoothing_alpha)?;

    let tags = data.bias.as_ref().map(|_| alignment_tags(data)).transpose()?;
    let (val_features, val_labels, _) = data.extract(Split::Val);
    let tdata = TrainData {
        train_features: data.features.gather_rows(&train_idx),
        train_labels: targets.clone(),
        train_bias: Some(pseudo.labels.clone()),
        train_alignment: tags
            .as_ref()
            .map(|t| train_idx.iter().map(|&i| t[i]).collect()),
        val_features,
        val_labels,
    };
    let dims = config.dims(data.num_features());
    let train_cfg = TrainConfig {
        steps: config.debiased_steps,
        seed: config.seed,
        selection: CheckpointSelection::BestValAuc,
        ..config.trainer.clone()
    };
    let outcome: TrainOutcome = train_model(
        init_mlp(&dims, config.seed)?,
        &tdata,
        &LossSelector::BiasBalanced {
            priors: priors.clone(),
        },
        &train_cfg,
    )?;

    let val_report = evaluate_split(&outcome.params, data, Split::Val)?;
    let test_report = evaluate_split(&outcome.params, data, Split::Test)?;

    let positives = pseudo.labels.iter().sum::<usize>();
    let report = RunReport {
        method: if config.oracle_mode { "pbbl-oracle" } else { "pbbl" }.to_string(),
        dataset: None,
        seed: config.seed,
        config: config.clone(),
        initial_agreement,
        capture_iterations,
        bias_capture_degenerate,
        pseudo_bias: PseudoSummary {
            provenance: pseudo.provenance,
            positives,
            negatives: pseudo.labels.len() - positives,
        },
        priors,
        selected_step: outcome.selected_step,
        val: val_report,
        test: test_report,
        manifest: None,
    };
    Ok(PbblOutcome {
        model: outcome.params,
        report,
        debias_history: outcome.history,
    })
}

/// Scores one split with the standard softmax probability and reports
/// group-wise AUC.
pub fn evaluate_split(
    params: &MlpParams,
    data: &SampleTable,
    split: Split,
) -> Result<GroupAucReport> {
    let (features, targets, bias) = data.extract(split);
    if targets.is_empty() {
        return Err(Error::Config(format!("dataset has no {split} split")));
    }
    let scores = positive_scores(params, &features)?;
    group_auc_report(&scores, &targets, bias.as_deref())
}
