//! The FSMN language model: embedding/projection input, hidden stack with
//! configurable memory-block placement, full-vocabulary softmax output,
//! loss and end-to-end backward, perplexity, and finite-difference
//! gradient checking.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::SentenceBatch;
use crate::error::{Error, Result};
use crate::linalg::{relu, relu_backward, Matrix};
use crate::memory::{build_block_diagonal, BlockDiagMemory, FilterCoeffs};

/// Architecture description. Hidden layers are 1-based in `memory_at`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub memory_at: BTreeSet<usize>,
    pub memory_order: usize,
}

impl ModelConfig {
    /// The [2*200]-400(M)-400 setup: context 2, order-20 memory in the
    /// first hidden layer.
    pub fn ptb_preset(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            context_window: 2,
            embed_dim: 200,
            hidden_dims: vec![400, 400],
            memory_at: BTreeSet::from([1]),
            memory_order: 20,
        }
    }

    /// The [2*200]-3*600 setup with order-30 memory at the given layers.
    pub fn ltcb_preset(vocab_size: usize, memory_at: impl IntoIterator<Item = usize>) -> Self {
        ModelConfig {
            vocab_size,
            context_window: 2,
            embed_dim: 200,
            hidden_dims: vec![600, 600, 600],
            memory_at: memory_at.into_iter().collect(),
            memory_order: 30,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < crate::data::RESERVED + 1 {
            return Err(Error::Config("vocab_size too small".into()));
        }
        if self.context_window == 0 {
            return Err(Error::Config("context_window must be >= 1".into()));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be >= 1".into()));
        }
        if self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden_dims must be nonempty and positive".into()));
        }
        for &l in &self.memory_at {
            if l == 0 || l > self.hidden_dims.len() {
                return Err(Error::Config(format!(
                    "memory_at layer {l} out of range 1..={}",
                    self.hidden_dims.len()
                )));
            }
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.context_window * self.embed_dim
    }

    /// Width of the layer fed by hidden layer `l` (1-based); the output
    /// layer when `l` is the last hidden layer.
    fn next_width(&self, l: usize) -> usize {
        if l == self.hidden_dims.len() {
            self.vocab_size
        } else {
            self.hidden_dims[l]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    /// out × in
    pub weight: Matrix,
    /// out × 1
    pub bias: Matrix,
}

/// One memory block: the shared tap row vector and the weight carrying
/// h̃ into the next layer alongside h.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryParams {
    /// 1 × (order+1)
    pub taps: Matrix,
    /// next_width × layer_width
    pub out_weight: Matrix,
}

impl MemoryParams {
    pub fn coeffs(&self) -> FilterCoeffs {
        FilterCoeffs::new(self.taps.as_slice().to_vec())
    }
}

/// All learnable tensors of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    /// vocab × embed
    pub embedding: Matrix,
    pub hidden: Vec<LayerParams>,
    /// keyed by 1-based hidden layer index
    pub memory: BTreeMap<usize, MemoryParams>,
    pub output: LayerParams,
}

fn glorot_uniform(rng: &mut ChaCha8Rng, fan_out: usize, fan_in: usize) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_out, fan_in, |_, _| rng.gen_range(-bound..bound))
}

/// Normalized initialization for all weight matrices, zero biases,
/// identity filter taps. Deterministic given the seed.
pub fn init_parameters(config: &ModelConfig, seed: u64) -> Result<Parameters> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embedding = glorot_uniform(&mut rng, config.vocab_size, config.embed_dim);
    let mut hidden = Vec::new();
    let mut prev = config.input_dim();
    for &dim in &config.hidden_dims {
        hidden.push(LayerParams {
            weight: glorot_uniform(&mut rng, dim, prev),
            bias: Matrix::zeros(dim, 1),
        });
        prev = dim;
    }
    let mut memory = BTreeMap::new();
    for &l in &config.memory_at {
        let width = config.hidden_dims[l - 1];
        let mut taps = Matrix::zeros(1, config.memory_order + 1);
        taps.set(0, 0, 1.0);
        memory.insert(
            l,
            MemoryParams {
                taps,
                out_weight: glorot_uniform(&mut rng, config.next_width(l), width),
            },
        );
    }
    let output = LayerParams {
        weight: glorot_uniform(&mut rng, config.vocab_size, prev),
        bias: Matrix::zeros(config.vocab_size, 1),
    };
    Ok(Parameters {
        embedding,
        hidden,
        memory,
        output,
    })
}

impl Parameters {
    /// Same shapes, all zeros. Gradient and velocity buffers.
    pub fn zeros_like(&self) -> Parameters {
        let zero = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Parameters {
            embedding: zero(&self.embedding),
            hidden: self
                .hidden
                .iter()
                .map(|l| LayerParams {
                    weight: zero(&l.weight),
                    bias: zero(&l.bias),
                })
                .collect(),
            memory: self
                .memory
                .iter()
                .map(|(&k, m)| {
                    (
                        k,
                        MemoryParams {
                            taps: zero(&m.taps),
                            out_weight: zero(&m.out_weight),
                        },
                    )
                })
                .collect(),
            output: LayerParams {
                weight: zero(&self.output.weight),
                bias: zero(&self.output.bias),
            },
        }
    }

    /// Named tensors in a fixed, deterministic order.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out: Vec<(String, &Matrix)> = vec![("embedding".to_string(), &self.embedding)];
        for (i, l) in self.hidden.iter().enumerate() {
            out.push((format!("hidden{}.weight", i + 1), &l.weight));
            out.push((format!("hidden{}.bias", i + 1), &l.bias));
        }
        for (k, m) in &self.memory {
            out.push((format!("memory{k}.taps"), &m.taps));
            out.push((format!("memory{k}.out_weight"), &m.out_weight));
        }
        out.push(("output.weight".to_string(), &self.output.weight));
        out.push(("output.bias".to_string(), &self.output.bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out: Vec<(String, &mut Matrix)> =
            vec![("embedding".to_string(), &mut self.embedding)];
        for (i, l) in self.hidden.iter_mut().enumerate() {
            out.push((format!("hidden{}.weight", i + 1), &mut l.weight));
            out.push((format!("hidden{}.bias", i + 1), &mut l.bias));
        }
        for (k, m) in &mut self.memory {
            out.push((format!("memory{k}.taps"), &mut m.taps));
            out.push((format!("memory{k}.out_weight"), &mut m.out_weight));
        }
        out.push(("output.weight".to_string(), &mut self.output.weight));
        out.push(("output.bias".to_string(), &mut self.output.bias));
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }
}

/// Reporting group for a tensor name: embedding, W, b, taps, W~, output.
pub fn tensor_group(name: &str) -> &'static str {
    if name == "embedding" {
        "embedding"
    } else if name.starts_with("output") {
        "output"
    } else if name.ends_with(".taps") {
        "taps"
    } else if name.ends_with(".out_weight") {
        "W~"
    } else if name.ends_with(".bias") {
        "b"
    } else {
        "W"
    }
}

/// True for tensors updated with the filter-coefficient learning rate.
pub fn is_tap_tensor(name: &str) -> bool {
    name.ends_with(".taps")
}

/// Everything the backward pass needs, recorded during forward.
pub struct ForwardCache {
    /// (context_window·embed) × P
    input: Matrix,
    /// pre-activation per hidden layer
    pre: Vec<Matrix>,
    /// post-activation per hidden layer
    hidden: Vec<Matrix>,
    /// memory-block pre-activation, keyed by 1-based layer
    mem_pre: BTreeMap<usize, Matrix>,
    /// h̃ per memory block
    mem_out: BTreeMap<usize, Matrix>,
    lengths: Vec<usize>,
}

fn affine(w: &Matrix, b: &Matrix, x: &Matrix) -> Result<Matrix> {
    let mut y = w.matmul(x)?;
    for i in 0..y.rows() {
        let bi = b.get(i, 0);
        for v in y.row_mut(i) {
            *v += bi;
        }
    }
    Ok(y)
}

fn log_softmax_columns(logits: &Matrix) -> Matrix {
    let (v, p) = logits.shape();
    let mut out = logits.clone();
    for col in 0..p {
        let mut max = f64::NEG_INFINITY;
        for i in 0..v {
            max = max.max(out.get(i, col));
        }
        let mut sum = 0.0;
        for i in 0..v {
            sum += (out.get(i, col) - max).exp();
        }
        let lse = max + sum.ln();
        for i in 0..v {
            out.set(i, col, out.get(i, col) - lse);
        }
    }
    out
}

fn block_memory(params: &MemoryParams, lengths: &[usize]) -> Result<BlockDiagMemory> {
    build_block_diagonal(&params.coeffs(), lengths)
}

/// Builds the (context_window·embed) × P input by concatenating context
/// embeddings per prediction position.
fn embed_input(params: &Parameters, config: &ModelConfig, batch: &SentenceBatch) -> Matrix {
    let cw = config.context_window;
    let e = config.embed_dim;
    let p = batch.positions();
    let mut x = Matrix::zeros(cw * e, p);
    for pos in 0..p {
        for j in 0..cw {
            let id = batch.contexts[pos * cw + j];
            for k in 0..e {
                x.set(j * e + k, pos, params.embedding.get(id, k));
            }
        }
    }
    x
}

/// Full forward pass. Returns per-position log-probabilities (vocab × P,
/// positions ordered sentence by sentence) and the cache for backward.
pub fn forward(
    params: &Parameters,
    config: &ModelConfig,
    batch: &SentenceBatch,
) -> Result<(Matrix, ForwardCache)> {
    if batch.positions() == 0 {
        return Err(Error::Empty("batch"));
    }
    if batch.max_id() >= config.vocab_size {
        return Err(Error::Config(format!(
            "token id {} out of range for vocab of {}",
            batch.max_id(),
            config.vocab_size
        )));
    }
    if batch.context_window != config.context_window {
        return Err(Error::Config(
            "batch context window does not match model".into(),
        ));
    }
    let input = embed_input(params, config, batch);
    let layers = config.hidden_dims.len();
    let mut pre = Vec::with_capacity(layers);
    let mut hidden = Vec::with_capacity(layers);
    let mut mem_pre = BTreeMap::new();
    let mut mem_out = BTreeMap::new();

    let mut x = input.clone();
    for l in 1..=layers {
        let lp = &params.hidden[l - 1];
        let mut z = affine(&lp.weight, &lp.bias, &x)?;
        if let Some(mp) = params.memory.get(&(l - 1)) {
            // h̃ of the previous layer feeds this layer's pre-activation.
            z.add_assign(&mp.out_weight.matmul(&mem_out[&(l - 1)])?);
        }
        let h = relu(&z);
        if config.memory_at.contains(&l) {
            let mp = params
                .memory
                .get(&l)
                .ok_or_else(|| Error::Config(format!("missing memory params at layer {l}")))?;
            let z_mem = block_memory(mp, &batch.lengths)?.apply(&h)?;
            let h_mem = relu(&z_mem);
            mem_pre.insert(l, z_mem);
            mem_out.insert(l, h_mem);
        }
        pre.push(z);
        hidden.push(h.clone());
        x = h;
    }

    let mut logits = affine(&params.output.weight, &params.output.bias, &x)?;
    if let Some(mp) = params.memory.get(&layers) {
        logits.add_assign(&mp.out_weight.matmul(&mem_out[&layers])?);
    }
    let log_probs = log_softmax_columns(&logits);
    Ok((
        log_probs,
        ForwardCache {
            input,
            pre,
            hidden,
            mem_pre,
            mem_out,
            lengths: batch.lengths.clone(),
        },
    ))
}

fn mean_nll(log_probs: &Matrix, targets: &[usize]) -> f64 {
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(pos, &t)| -log_probs.get(t, pos))
        .sum();
    total / targets.len() as f64
}

fn row_sums(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows(), 1);
    for i in 0..m.rows() {
        out.set(i, 0, m.row(i).iter().sum());
    }
    out
}

/// Mean negative log-likelihood over all prediction positions, with
/// gradients for every tensor including the filter taps.
pub fn loss_and_grad(
    params: &Parameters,
    config: &ModelConfig,
    batch: &SentenceBatch,
) -> Result<(f64, Parameters)> {
    let (log_probs, cache) = forward(params, config, batch)?;
    let loss = mean_nll(&log_probs, &batch.targets);
    let p = batch.positions() as f64;
    let layers = config.hidden_dims.len();
    let mut grads = params.zeros_like();

    // dL/dlogits = (softmax - onehot)/P; the 1/P factor propagates
    // through everything downstream.
    let mut dz_out = log_probs.map(f64::exp);
    for (pos, &t) in batch.targets.iter().enumerate() {
        dz_out.set(t, pos, dz_out.get(t, pos) - 1.0);
    }
    dz_out.scale(1.0 / p);

    let h_last = &cache.hidden[layers - 1];
    grads.output.weight = dz_out.matmul(&h_last.transpose())?;
    grads.output.bias = row_sums(&dz_out);

    // Gradient flowing into each memory block's h̃, filled by the
    // consumer layer before the producer layer is processed.
    let mut d_mem_out: BTreeMap<usize, Matrix> = BTreeMap::new();
    if let Some(mp) = params.memory.get(&layers) {
        d_mem_out.insert(layers, mp.out_weight.transpose().matmul(&dz_out)?);
        grads.memory.get_mut(&layers).unwrap().out_weight =
            dz_out.matmul(&cache.mem_out[&layers].transpose())?;
    }

    let mut d_h = params.output.weight.transpose().matmul(&dz_out)?;
    for l in (1..=layers).rev() {
        if let Some(d_tilde) = d_mem_out.get(&l) {
            let mp = &params.memory[&l];
            let g_act = relu_backward(&cache.mem_pre[&l], d_tilde)?;
            let (dh_mem, dtaps) = block_memory(mp, &cache.lengths)?
                .backward(&cache.hidden[l - 1], &g_act)?;
            d_h.add_assign(&dh_mem);
            grads.memory.get_mut(&l).unwrap().taps =
                Matrix::from_vec(1, dtaps.len(), dtaps);
        }
        let dz = relu_backward(&cache.pre[l - 1], &d_h)?;
        let below = if l == 1 {
            &cache.input
        } else {
            &cache.hidden[l - 2]
        };
        grads.hidden[l - 1].weight = dz.matmul(&below.transpose())?;
        grads.hidden[l - 1].bias = row_sums(&dz);
        let dx = params.hidden[l - 1].weight.transpose().matmul(&dz)?;
        if l >= 2 {
            if let Some(mp) = params.memory.get(&(l - 1)) {
                d_mem_out.insert(l - 1, mp.out_weight.transpose().matmul(&dz)?);
                grads.memory.get_mut(&(l - 1)).unwrap().out_weight =
                    dz.matmul(&cache.mem_out[&(l - 1)].transpose())?;
            }
            d_h = dx;
        } else {
            // Scatter input gradient into the embedding rows.
            let e = config.embed_dim;
            for pos in 0..batch.positions() {
                for j in 0..config.context_window {
                    let id = batch.contexts[pos * config.context_window + j];
                    for k in 0..e {
                        let cur = grads.embedding.get(id, k);
                        grads.embedding.set(id, k, cur + dx.get(j * e + k, pos));
                    }
                }
            }
        }
    }
    Ok((loss, grads))
}

/// exp of the mean NLL over all prediction positions in the dataset.
pub fn perplexity(
    params: &Parameters,
    config: &ModelConfig,
    sentences: &[Vec<usize>],
) -> Result<f64> {
    if sentences.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    const EVAL_CHUNK: usize = 64;
    let mut total_nll = 0.0;
    let mut positions = 0usize;
    for chunk in sentences.chunks(EVAL_CHUNK) {
        let batch = SentenceBatch::new(chunk.to_vec(), config.context_window)?;
        let (log_probs, _) = forward(params, config, &batch)?;
        for (pos, &t) in batch.targets.iter().enumerate() {
            total_nll -= log_probs.get(t, pos);
        }
        positions += batch.positions();
    }
    Ok((total_nll / positions as f64).exp())
}

/// Adds uniform noise in ±scale to every tensor. Gradient checks run at
/// such a generic point: the zero-bias / identity-tap init leaves many
/// pre-activations exactly at the ReLU kink, where central differences
/// straddle the nondifferentiability and disagree with any subgradient.
pub fn jitter_parameters(params: &mut Parameters, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (_, tensor) in params.tensors_mut() {
        for v in tensor.as_mut_slice() {
            *v += rng.gen_range(-scale..scale);
        }
    }
}

/// One parameter group's worst finite-difference discrepancy.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub group: &'static str,
    /// Relative error, or absolute where both gradients are ~0.
    pub max_error: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub step: f64,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_error).fold(0.0, f64::max)
    }

    pub fn all_below(&self, tol: f64) -> bool {
        self.max_error() < tol
    }
}

/// Compares every analytic gradient entry against central finite
/// differences of the loss. Meant for small models only; cost is two
/// forward passes per parameter.
pub fn grad_check(
    params: &Parameters,
    config: &ModelConfig,
    batch: &SentenceBatch,
    step: f64,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_and_grad(params, config, batch)?;
    let mut work = params.clone();
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    for group in ["embedding", "W", "b", "taps", "W~", "output"] {
        worst.insert(group, 0.0);
    }
    let names: Vec<String> = params.tensors().iter().map(|(n, _)| n.clone()).collect();
    for (idx, name) in names.iter().enumerate() {
        let group = tensor_group(name);
        let len = params.tensors()[idx].1.len();
        for k in 0..len {
            let orig = work.tensors()[idx].1.as_slice()[k];
            work.tensors_mut()[idx].1.as_mut_slice()[k] = orig + step;
            let (loss_plus, _) = loss_and_grad(&work, config, batch)?;
            work.tensors_mut()[idx].1.as_mut_slice()[k] = orig - step;
            let (loss_minus, _) = loss_and_grad(&work, config, batch)?;
            work.tensors_mut()[idx].1.as_mut_slice()[k] = orig;

            let numeric = (loss_plus - loss_minus) / (2.0 * step);
            let a = analytic.tensors()[idx].1.as_slice()[k];
            let denom = a.abs().max(numeric.abs());
            let err = if denom < 1e-8 {
                (a - numeric).abs()
            } else {
                (a - numeric).abs() / denom
            };
            let slot = worst.get_mut(group).unwrap();
            *slot = slot.max(err);
        }
    }
    let groups = ["embedding", "W", "b", "taps", "W~", "output"]
        .iter()
        .map(|&g| GroupReport {
            group: g,
            max_error: worst[g],
        })
        .collect();
    Ok(GradCheckReport { groups, step })
}
