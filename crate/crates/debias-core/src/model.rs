//! A small feed-forward classifier with explicit forward and backward
//! passes. Layers are affine maps with rectified-linear activations between
//! them; the final layer emits raw logits.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::par::{map_chunks, ROW_CHUNK};

/// How the parameters were initialized; kept so checkpoints are self-describing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitRecord {
    pub seed: u64,
}

/// One affine layer: `weights` is `out_dim x in_dim`, `bias` has `out_dim` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub dims: Vec<usize>,
    pub layers: Vec<DenseLayer>,
    pub init: InitRecord,
}

/// Raw model outputs, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsBatch(pub Matrix);

/// Row-normalized class probabilities. `balanced` records whether the rows
/// are plain softmax outputs or prior-adjusted (bias-balanced) ones.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbBatch {
    pub probs: Matrix,
    pub balanced: bool,
}

/// Activations retained by [`mlp_forward`] for the backward pass.
/// `layer_inputs[l]` is the input matrix seen by layer `l`.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layer_inputs: Vec<Matrix>,
}

/// Parameter gradients, same shapes as [`MlpParams::layers`].
#[derive(Clone, Debug)]
pub struct MlpGrads {
    pub layers: Vec<DenseLayer>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    weights: Matrix::zeros(l.weights.rows(), l.weights.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            for (x, y) in a.weights.data_mut().iter_mut().zip(b.weights.data()) {
                *x += y;
            }
            for (x, y) in a.bias.iter_mut().zip(b.bias.iter()) {
                *x += y;
            }
        }
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "layer dims must chain at least input -> output, got {:?}",
            dims
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("layer dims must be positive, got {:?}", dims)));
    }
    if *dims.last().unwrap() != 2 {
        return Err(Error::Config(format!(
            "output dim must be 2, got {}",
            dims.last().unwrap()
        )));
    }
    Ok(())
}

/// Initializes an MLP with weights drawn uniformly from
/// `[-sqrt(6/fan_in), sqrt(6/fan_in)]` and zero biases. Deterministic per seed.
pub fn init_mlp(dims: &[usize], seed: u64) -> Result<MlpParams> {
    validate_dims(dims)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(dims.len() - 1);
    for w in dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let mut weights = Matrix::zeros(fan_out, fan_in);
        for v in weights.data_mut() {
            *v = rng.random_range(-bound..bound);
        }
        layers.push(DenseLayer {
            weights,
            bias: vec![0.0; fan_out],
        });
    }
    Ok(MlpParams {
        dims: dims.to_vec(),
        layers,
        init: InitRecord { seed },
    })
}

fn affine_into(layer: &DenseLayer, x: &[f64], out: &mut [f64]) {
    let w = &layer.weights;
    for (j, o) in out.iter_mut().enumerate() {
        let row = w.row(j);
        let mut acc = layer.bias[j];
        for (wi, xi) in row.iter().zip(x.iter()) {
            acc += wi * xi;
        }
        *o = acc;
    }
}

/// Runs the affine/ReLU composition over a batch, returning the logits and a
/// cache of per-layer inputs for [`mlp_backward`].
pub fn mlp_forward(params: &MlpParams, batch: &Matrix) -> Result<(LogitsBatch, ForwardCache)> {
    if batch.cols() != params.dims[0] {
        return Err(Error::Dim(format!(
            "batch has {} features, model expects {}",
            batch.cols(),
            params.dims[0]
        )));
    }
    let num_layers = params.layers.len();
    let cols = batch.cols();

    // Per chunk: the post-activation of every hidden layer plus the logits.
    let chunks: Vec<Vec<Vec<f64>>> = map_chunks(batch.data(), ROW_CHUNK * cols, |_, rows| {
        let n = rows.len() / cols;
        let mut acts: Vec<Vec<f64>> = params
            .layers
            .iter()
            .map(|l| vec![0.0; n * l.bias.len()])
            .collect();
        for (l, layer) in params.layers.iter().enumerate() {
            let out_dim = layer.bias.len();
            let in_dim = if l == 0 { cols } else { params.layers[l - 1].bias.len() };
            let (head, tail) = acts.split_at_mut(l);
            let cur = &mut tail[0];
            let input_data: &[f64] = if l == 0 { rows } else { &head[l - 1] };
            for r in 0..n {
                let x = &input_data[r * in_dim..(r + 1) * in_dim];
                let out = &mut cur[r * out_dim..(r + 1) * out_dim];
                affine_into(layer, x, out);
                if l + 1 < num_layers {
                    for v in out.iter_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                }
            }
        }
        acts
    });

    // Reassemble per-layer matrices in chunk order.
    let mut layer_outputs: Vec<Matrix> = (0..num_layers)
        .map(|l| {
            let out_dim = params.layers[l].bias.len();
            let blocks: Vec<Vec<f64>> = chunks.iter().map(|c| c[l].clone()).collect();
            Matrix::from_row_blocks(out_dim, blocks)
        })
        .collect();

    let logits = layer_outputs.pop().expect("at least one layer");
    let mut layer_inputs = Vec::with_capacity(num_layers);
    layer_inputs.push(batch.clone());
    layer_inputs.extend(layer_outputs);
    Ok((LogitsBatch(logits), ForwardCache { layer_inputs }))
}

/// Reverse-mode gradients of the loss w.r.t. all parameters, given the
/// upstream gradient w.r.t. the logits.
pub fn mlp_backward(
    params: &MlpParams,
    cache: &ForwardCache,
    upstream: &Matrix,
) -> Result<MlpGrads> {
    let num_layers = params.layers.len();
    if cache.layer_inputs.len() != num_layers {
        return Err(Error::Dim(format!(
            "cache holds {} layer inputs, model has {} layers",
            cache.layer_inputs.len(),
            num_layers
        )));
    }
    let n = cache.layer_inputs[0].rows();
    if upstream.rows() != n || upstream.cols() != *params.dims.last().unwrap() {
        return Err(Error::Dim(format!(
            "upstream gradient is {}x{}, expected {}x{}",
            upstream.rows(),
            upstream.cols(),
            n,
            params.dims.last().unwrap()
        )));
    }
    for (l, input) in cache.layer_inputs.iter().enumerate() {
        if input.cols() != params.layers[l].weights.cols() || input.rows() != n {
            return Err(Error::Dim(format!("cache does not match layer {} shape", l)));
        }
    }

    let row_indices: Vec<usize> = (0..n).collect();
    let partials: Vec<MlpGrads> = map_chunks(&row_indices, ROW_CHUNK, |_, rows| {
        let mut grads = MlpGrads::zeros_like(params);
        let mut g: Vec<f64> = Vec::new();
        let mut g_prev: Vec<f64> = Vec::new();
        for &r in rows {
            g.clear();
            g.extend_from_slice(upstream.row(r));
            for l in (0..num_layers).rev() {
                let input = cache.layer_inputs[l].row(r);
                let layer = &mut grads.layers[l];
                for (j, &gj) in g.iter().enumerate() {
                    layer.bias[j] += gj;
                    let wrow = layer.weights.row_mut(j);
                    for (wi, xi) in wrow.iter_mut().zip(input.iter()) {
                        *wi += gj * xi;
                    }
                }
                if l > 0 {
                    let w = &params.layers[l].weights;
                    g_prev.clear();
                    g_prev.resize(input.len(), 0.0);
                    for (j, &gj) in g.iter().enumerate() {
                        let wrow = w.row(j);
                        for (gp, wi) in g_prev.iter_mut().zip(wrow.iter()) {
                            *gp += gj * wi;
                        }
                    }
                    // ReLU derivative: the cached input is the post-activation.
                    for (gp, &a) in g_prev.iter_mut().zip(input.iter()) {
                        if a <= 0.0 {
                            *gp = 0.0;
                        }
                    }
                    std::mem::swap(&mut g, &mut g_prev);
                }
            }
        }
        grads
    });

    let mut total = MlpGrads::zeros_like(params);
    for p in &partials {
        total.add_assign(p);
    }
    Ok(total)
}

/// Row-wise exp-normalize with max subtraction; rows sum to 1.
pub fn softmax_stable(logits: &LogitsBatch) -> Result<ProbBatch> {
    let m = &logits.0;
    if !m.is_finite() {
        return Err(Error::Degenerate("non-finite logits".into()));
    }
    let cols = m.cols();
    let blocks = map_chunks(m.data(), ROW_CHUNK * cols, |_, rows| {
        let mut out = rows.to_vec();
        for row in out.chunks_mut(cols) {
            softmax_row(row);
        }
        out
    });
    Ok(ProbBatch {
        probs: Matrix::from_row_blocks(cols, blocks),
        balanced: false,
    })
}

pub(crate) fn softmax_row(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Positive-class probability (`softmax(logits)[1]`) for every row of `x`.
pub fn positive_scores(params: &MlpParams, x: &Matrix) -> Result<Vec<f64>> {
    let (logits, _) = mlp_forward(params, x)?;
    let probs = softmax_stable(&logits)?;
    Ok(probs.probs.iter_rows().map(|r| r[1]).collect())
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dims: Vec<usize>,
    init: InitRecord,
    layers: Vec<DenseLayer>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes a versioned JSON checkpoint. JSON numbers round-trip f64 exactly,
/// so `load_checkpoint(save_checkpoint(p)) == p`.
pub fn save_checkpoint(params: &MlpParams, path: &Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        dims: params.dims.clone(),
        init: params.init.clone(),
        layers: params.layers.clone(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MlpParams> {
    let text = std::fs::read_to_string(path)?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    if file.layers.len() + 1 != file.dims.len() {
        return Err(Error::Checkpoint("layer count does not match dims".into()));
    }
    for (l, w) in file.dims.windows(2).zip(file.layers.iter()) {
        if w.weights.rows() != l[1] || w.weights.cols() != l[0] || w.bias.len() != l[1] {
            return Err(Error::Checkpoint("layer shape does not match dims".into()));
        }
        if !w.weights.is_finite() || w.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
    }
    Ok(MlpParams {
        dims: file.dims,
        layers: file.layers,
        init: file.init,
    })
}
