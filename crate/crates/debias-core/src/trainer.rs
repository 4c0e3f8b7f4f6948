//! Deterministic mini-batch training loop.
//!
//! Batches come from a full per-epoch shuffle with the last partial batch
//! kept, driven by a seeded generator; identical (data, config, seed)
//! produce bitwise-identical histories. Every `eval_every` steps the loop
//! records the full-training-set loss (split by alignment tag when bias
//! labels are present) and the overall validation AUC, snapshots the
//! parameters, and finally returns the checkpoint selected by the
//! configured rule.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Alignment;
use crate::error::{Error, Result};
use crate::losses::{
    bs_loss, bs_per_sample, ce_loss, ce_per_sample, gce_loss, gce_per_sample, PriorTable,
};
use crate::matrix::Matrix;
use crate::metrics::auc_score;
use crate::model::{
    mlp_backward, mlp_forward, positive_scores, softmax_stable, MlpGrads, MlpParams,
};

/// Which snapshot a finished run returns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointSelection {
    /// Best recorded validation AUC, earliest step on ties.
    BestValAuc,
    /// The parameters after the last step.
    FinalStep,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub selection: CheckpointSelection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 256,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            eval_every: 50,
            seed: 42,
            selection: CheckpointSelection::BestValAuc,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be finite and >= 0".into()));
        }
        if self.eval_every < 1 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0,1)".into()));
        }
        Ok(())
    }
}

/// One evaluation record; `aligned_loss`/`conflicting_loss` are present only
/// when the data carry alignment tags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub train_loss: f64,
    pub aligned_loss: Option<f64>,
    pub conflicting_loss: Option<f64>,
    pub val_auc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EvalRecord>,
}

impl TrainHistory {
    /// CSV emission: `step,train_loss,aligned_loss,conflicting_loss,val_auc`
    /// with empty fields for absent group losses.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        writeln!(w, "step,train_loss,aligned_loss,conflicting_loss,val_auc")?;
        for r in &self.records {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{:.8e}", x)).unwrap_or_default();
            writeln!(
                w,
                "{},{:.8e},{},{},{:.8e}",
                r.step,
                r.train_loss,
                fmt_opt(r.aligned_loss),
                fmt_opt(r.conflicting_loss),
                r.val_auc
            )?;
        }
        w.flush()?;
        Ok(())
    }
}

/// The loss driving a training run.
#[derive(Clone, Debug)]
pub enum LossSelector {
    CrossEntropy,
    Generalized { q: f64 },
    BiasBalanced { priors: PriorTable },
}

impl LossSelector {
    fn needs_bias(&self) -> bool {
        matches!(self, LossSelector::BiasBalanced { .. })
    }

    fn loss_and_grad(
        &self,
        logits: &crate::model::LogitsBatch,
        labels: &[usize],
        bias: Option<&[usize]>,
    ) -> Result<(f64, Matrix)> {
        match self {
            LossSelector::CrossEntropy => ce_loss(&softmax_stable(logits)?, labels),
            LossSelector::Generalized { q } => gce_loss(&softmax_stable(logits)?, labels, *q),
            LossSelector::BiasBalanced { priors } => {
                let bias = bias.ok_or_else(|| {
                    Error::Config("bias-balanced loss needs bias labels".into())
                })?;
                bs_loss(logits, labels, bias, priors)
            }
        }
    }

    fn per_sample(
        &self,
        logits: &crate::model::LogitsBatch,
        labels: &[usize],
        bias: Option<&[usize]>,
    ) -> Result<Vec<f64>> {
        match self {
            LossSelector::CrossEntropy => ce_per_sample(&softmax_stable(logits)?, labels),
            LossSelector::Generalized { q } => {
                gce_per_sample(&softmax_stable(logits)?, labels, *q)
            }
            LossSelector::BiasBalanced { priors } => {
                let bias = bias.ok_or_else(|| {
                    Error::Config("bias-balanced loss needs bias labels".into())
                })?;
                bs_per_sample(logits, labels, bias, priors)
            }
        }
    }
}

/// Training inputs: the labels trained against plus the validation split
/// used for AUC-based checkpoint selection.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train_features: Matrix,
    pub train_labels: Vec<usize>,
    pub train_bias: Option<Vec<usize>>,
    pub train_alignment: Option<Vec<Alignment>>,
    pub val_features: Matrix,
    pub val_labels: Vec<usize>,
}

impl TrainData {
    fn validate(&self, selector: &LossSelector) -> Result<()> {
        let n = self.train_features.rows();
        if n == 0 || self.val_features.rows() == 0 {
            return Err(Error::Config("empty train or val split".into()));
        }
        if self.train_labels.len() != n {
            return Err(Error::Dim("train label length mismatch".into()));
        }
        if self.val_labels.len() != self.val_features.rows() {
            return Err(Error::Dim("val label length mismatch".into()));
        }
        if let Some(b) = &self.train_bias {
            if b.len() != n {
                return Err(Error::Dim("train bias length mismatch".into()));
            }
        }
        if let Some(a) = &self.train_alignment {
            if a.len() != n {
                return Err(Error::Dim("alignment tag length mismatch".into()));
            }
        }
        if selector.needs_bias() && self.train_bias.is_none() {
            return Err(Error::Config(
                "bias-balanced training needs bias labels on the training split".into(),
            ));
        }
        Ok(())
    }
}

/// Adam moment estimates, shaped like the parameters.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: MlpGrads,
    pub v: MlpGrads,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        AdamState {
            m: MlpGrads::zeros_like(params),
            v: MlpGrads::zeros_like(params),
            step: 0,
        }
    }
}

/// One Adam update with bias correction:
/// `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_update(
    params: &mut MlpParams,
    grads: &MlpGrads,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    if grads.layers.len() != params.layers.len() {
        return Err(Error::Dim("gradient layer count mismatch".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let m_corr = 1.0 - config.beta1.powi(t);
    let v_corr = 1.0 - config.beta2.powi(t);
    for (l, layer) in params.layers.iter_mut().enumerate() {
        let g = &grads.layers[l];
        if g.weights.rows() != layer.weights.rows()
            || g.weights.cols() != layer.weights.cols()
            || g.bias.len() != layer.bias.len()
        {
            return Err(Error::Dim(format!("gradient shape mismatch at layer {l}")));
        }
        let m = &mut state.m.layers[l];
        let v = &mut state.v.layers[l];
        for ((p, &gi), (mi, vi)) in layer
            .weights
            .data_mut()
            .iter_mut()
            .zip(g.weights.data())
            .zip(m.weights.data_mut().iter_mut().zip(v.weights.data_mut()))
        {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / m_corr;
            let v_hat = *vi / v_corr;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        for ((p, &gi), (mi, vi)) in layer
            .bias
            .iter_mut()
            .zip(g.bias.iter())
            .zip(m.bias.iter_mut().zip(v.bias.iter_mut()))
        {
            *mi = config.beta1 * *mi + (1.0 - config.beta1) * gi;
            *vi = config.beta2 * *vi + (1.0 - config.beta2) * gi * gi;
            let m_hat = *mi / m_corr;
            let v_hat = *vi / v_corr;
            *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: MlpParams,
    pub history: TrainHistory,
    pub selected_step: usize,
}

/// Snapshot with the best recorded validation AUC; ties go to the earliest
/// step.
pub fn select_best_checkpoint(
    history: &TrainHistory,
    snapshots: &[(usize, MlpParams)],
) -> Result<(usize, MlpParams)> {
    if history.records.is_empty() {
        return Err(Error::Config("empty history".into()));
    }
    let mut best: Option<&EvalRecord> = None;
    for r in &history.records {
        if best.map_or(true, |b| r.val_auc > b.val_auc) {
            best = Some(r);
        }
    }
    let best = best.expect("nonempty history");
    let params = snapshots
        .iter()
        .find(|(step, _)| *step == best.step)
        .map(|(_, p)| p.clone())
        .ok_or_else(|| Error::Config(format!("no snapshot at step {}", best.step)))?;
    Ok((best.step, params))
}

fn mean_where(values: &[f64], tags: &[Alignment], wanted: Alignment) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (v, t) in values.iter().zip(tags.iter()) {
        if *t == wanted {
            sum += v;
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Runs the training loop and returns the selected checkpoint plus the
/// evaluation history.
pub fn train_model(
    init: MlpParams,
    data: &TrainData,
    selector: &LossSelector,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    data.validate(selector)?;
    let n = data.train_features.rows();

    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut cursor = 0usize;

    let mut history = TrainHistory::default();
    let mut snapshots: Vec<(usize, MlpParams)> = Vec::new();

    let mut batch_labels: Vec<usize> = Vec::with_capacity(config.batch_size);
    let mut batch_bias: Vec<usize> = Vec::with_capacity(config.batch_size);

    for step in 1..=config.steps {
        if cursor >= n {
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let end = (cursor + config.batch_size).min(n);
        let batch_idx = &order[cursor..end];
        cursor = end;

        let batch = data.train_features.gather_rows(batch_idx);
        batch_labels.clear();
        batch_labels.extend(batch_idx.iter().map(|&i| data.train_labels[i]));
        let bias_slice = match &data.train_bias {
            Some(b) => {
                batch_bias.clear();
                batch_bias.extend(batch_idx.iter().map(|&i| b[i]));
                Some(batch_bias.as_slice())
            }
            None => None,
        };

        let (logits, cache) = mlp_forward(&params, &batch)?;
        let (_, grad) = selector.loss_and_grad(&logits, &batch_labels, bias_slice)?;
        let grads = mlp_backward(&params, &cache, &grad)?;
        adam_update(&mut params, &grads, &mut state, config)?;

        if step % config.eval_every == 0 || step == config.steps {
            let record = evaluate(&params, data, selector, step)?;
            history.records.push(record);
            snapshots.push((step, params.clone()));
        }
    }

    let (selected_step, selected) = match config.selection {
        CheckpointSelection::BestValAuc => select_best_checkpoint(&history, &snapshots)?,
        CheckpointSelection::FinalStep => {
            let (step, p) = snapshots.last().expect("final step is always snapshotted");
            (*step, p.clone())
        }
    };
    Ok(TrainOutcome {
        params: selected,
        history,
        selected_step,
    })
}

fn evaluate(
    params: &MlpParams,
    data: &TrainData,
    selector: &LossSelector,
    step: usize,
) -> Result<EvalRecord> {
    let (logits, _) = mlp_forward(params, &data.train_features)?;
    let losses = selector.per_sample(&logits, &data.train_labels, data.train_bias.as_deref())?;
    let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    let (aligned_loss, conflicting_loss) = match &data.train_alignment {
        Some(tags) => (
            mean_where(&losses, tags, Alignment::Aligned),
            mean_where(&losses, tags, Alignment::Conflicting),
        ),
        None => (None, None),
    };
    let scores = positive_scores(params, &data.val_features)?;
    let val_auc = auc_score(&scores, &data.val_labels)?;
    Ok(EvalRecord {
        step,
        train_loss,
        aligned_loss,
        conflicting_loss,
        val_auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_biased_dataset, GenConfig, Split};
    use crate::model::init_mlp;

    fn tiny_data() -> TrainData {
        let cfg = GenConfig {
            majority_group_size: 40,
            val_per_group: 8,
            test_per_group: 8,
            seed: 3,
            ..GenConfig::default()
        };
        let table = generate_biased_dataset(&cfg).unwrap();
        let (train_features, train_labels, train_bias) = table.extract(Split::Train);
        let (val_features, val_labels, _) = table.extract(Split::Val);
        let tags = crate::datagen::alignment_tags(&table).unwrap();
        let train_alignment: Vec<Alignment> = table
            .split_indices(Split::Train)
            .iter()
            .map(|&i| tags[i])
            .collect();
        TrainData {
            train_features,
            train_labels,
            train_bias,
            train_alignment: Some(train_alignment),
            val_features,
            val_labels,
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params_unchanged() {
        let mut p = init_mlp(&[4, 3, 2], 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let grads = MlpGrads::zeros_like(&p);
        let cfg = TrainConfig::default();
        adam_update(&mut p, &grads, &mut state, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut p = init_mlp(&[2, 2], 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let mut grads = MlpGrads::zeros_like(&p);
        grads.layers[0].weights.set(0, 0, 3.7);
        grads.layers[0].weights.set(1, 1, -0.002);
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        adam_update(&mut p, &grads, &mut state, &cfg).unwrap();
        // update = -lr * g / (|g| + eps) ~ -lr * sign(g)
        let d00 = p.layers[0].weights.get(0, 0) - before.layers[0].weights.get(0, 0);
        let d11 = p.layers[0].weights.get(1, 1) - before.layers[0].weights.get(1, 1);
        assert!((d00 + 1e-3).abs() < 1e-9);
        assert!((d11 - 1e-3).abs() < 1e-8);
        // Untouched coordinates stay put.
        assert_eq!(
            p.layers[0].weights.get(0, 1),
            before.layers[0].weights.get(0, 1)
        );
    }

    #[test]
    fn adam_constant_gradient_step_approaches_learning_rate() {
        let mut p = init_mlp(&[2, 2], 1).unwrap();
        let mut state = AdamState::new(&p);
        let mut grads = MlpGrads::zeros_like(&p);
        grads.layers[0].weights.set(0, 0, 0.25);
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            ..TrainConfig::default()
        };
        let mut last = p.layers[0].weights.get(0, 0);
        for _ in 0..400 {
            adam_update(&mut p, &grads, &mut state, &cfg).unwrap();
            let cur = p.layers[0].weights.get(0, 0);
            if state.step > 300 {
                assert!(((last - cur) - cfg.learning_rate).abs() < 1e-4);
            }
            last = cur;
        }
    }

    #[test]
    fn train_single_step_zero_lr_keeps_params() {
        let data = tiny_data();
        let init = init_mlp(&[10, 8, 8, 2], 5).unwrap();
        let cfg = TrainConfig {
            steps: 1,
            learning_rate: 0.0,
            ..TrainConfig::default()
        };
        let out = train_model(init.clone(), &data, &LossSelector::CrossEntropy, &cfg).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.history.records.len(), 1);
        assert_eq!(out.history.records[0].step, 1);
    }

    #[test]
    fn train_is_deterministic() {
        let data = tiny_data();
        let cfg = TrainConfig {
            steps: 60,
            batch_size: 32,
            eval_every: 20,
            ..TrainConfig::default()
        };
        let run = || {
            train_model(
                init_mlp(&[10, 8, 8, 2], 5).unwrap(),
                &data,
                &LossSelector::Generalized { q: 0.7 },
                &cfg,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.selected_step, b.selected_step);
    }

    #[test]
    fn train_rejects_empty_and_mismatched_inputs() {
        let data = tiny_data();
        let mut empty = data.clone();
        empty.train_features = Matrix::zeros(0, 10);
        empty.train_labels.clear();
        let cfg = TrainConfig::default();
        assert!(train_model(
            init_mlp(&[10, 8, 8, 2], 5).unwrap(),
            &empty,
            &LossSelector::CrossEntropy,
            &cfg
        )
        .is_err());

        let mut no_bias = data;
        no_bias.train_bias = None;
        let priors = PriorTable::from_counts(vec![vec![1, 1], vec![1, 1]], 1.0).unwrap();
        assert!(train_model(
            init_mlp(&[10, 8, 8, 2], 5).unwrap(),
            &no_bias,
            &LossSelector::BiasBalanced { priors },
            &cfg
        )
        .is_err());
    }

    #[test]
    fn select_best_prefers_highest_then_earliest() {
        let p1 = init_mlp(&[2, 2], 1).unwrap();
        let p2 = init_mlp(&[2, 2], 2).unwrap();
        let p3 = init_mlp(&[2, 2], 3).unwrap();
        let rec = |step, val_auc| EvalRecord {
            step,
            train_loss: 0.0,
            aligned_loss: None,
            conflicting_loss: None,
            val_auc,
        };
        let snaps = vec![(10, p1.clone()), (20, p2.clone()), (30, p3.clone())];

        let monotone = TrainHistory {
            records: vec![rec(10, 0.5), rec(20, 0.6), rec(30, 0.7)],
        };
        assert_eq!(select_best_checkpoint(&monotone, &snaps).unwrap().0, 30);

        let tie = TrainHistory {
            records: vec![rec(10, 0.5), rec(20, 0.7), rec(30, 0.7)],
        };
        assert_eq!(select_best_checkpoint(&tie, &snaps).unwrap().0, 20);

        let single = TrainHistory {
            records: vec![rec(20, 0.9)],
        };
        let (step, params) = select_best_checkpoint(&single, &snaps).unwrap();
        assert_eq!(step, 20);
        assert_eq!(params, p2);
    }

    #[test]
    fn history_csv_has_expected_header_and_rows() {
        let history = TrainHistory {
            records: vec![
                EvalRecord {
                    step: 50,
                    train_loss: 0.5,
                    aligned_loss: Some(0.4),
                    conflicting_loss: Some(0.9),
                    val_auc: 0.75,
                },
                EvalRecord {
                    step: 100,
                    train_loss: 0.25,
                    aligned_loss: None,
                    conflicting_loss: None,
                    val_auc: 0.8,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        history.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,train_loss,aligned_loss,conflicting_loss,val_auc"
        );
        assert!(lines.next().unwrap().starts_with("50,5.00000000e-1,4.00000000e-1,9.00000000e-1,"));
        assert!(lines.next().unwrap().contains(",,,"));
    }
}
