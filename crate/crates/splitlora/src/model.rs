//! Transformer encoder with a frozen pre-trained base and trainable
//! low-rank adapters on the query and value projections, plus a trainable
//! classifier head.
//!
//! The model can run monolithically or split at any block boundary: blocks
//! `[0, cut)` on a client, blocks `[cut, L)` plus the head on the server.
//! Both routes push the identical op sequence onto a [`Tape`], so split and
//! monolithic execution agree to floating-point rounding.
//!
//! Base weights (embeddings, attention/FFN matrices, layer norms) are
//! frozen; only adapter factors and the head train. Layer norm uses
//! eps 1e-5; attention is pre-norm with residual connections.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Tape, Tensor, ValueId};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Architecture and adapter hyperparameters. `lora_alpha / lora_rank`
/// scales the adapter contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub hidden: usize,
    pub num_heads: usize,
    pub ffn_mult: usize,
    pub vocab: usize,
    pub seq_len: usize,
    pub num_classes: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ModelConfig {
    /// Small configuration for fast deterministic experiments and tests.
    pub fn desk() -> Self {
        Self {
            num_blocks: 4,
            hidden: 32,
            num_heads: 4,
            ffn_mult: 4,
            vocab: 64,
            seq_len: 16,
            num_classes: 4,
            lora_rank: 4,
            lora_alpha: 8.0,
        }
    }

    /// BERT-base-shaped configuration used by the analytical cost model.
    /// Never instantiated as actual tensors in tests.
    pub fn bert_base_shape() -> Self {
        Self {
            num_blocks: 12,
            hidden: 768,
            num_heads: 12,
            ffn_mult: 4,
            vocab: 30522,
            seq_len: 128,
            num_classes: 2,
            lora_rank: 16,
            lora_alpha: 32.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_blocks", self.num_blocks),
            ("hidden", self.hidden),
            ("num_heads", self.num_heads),
            ("ffn_mult", self.ffn_mult),
            ("vocab", self.vocab),
            ("seq_len", self.seq_len),
            ("num_classes", self.num_classes),
            ("lora_rank", self.lora_rank),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if !self.hidden.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidArgument(format!(
                "hidden {} not divisible by num_heads {}",
                self.hidden, self.num_heads
            )));
        }
        if !(self.lora_alpha > 0.0 && self.lora_alpha.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lora_alpha must be positive and finite, got {}",
                self.lora_alpha
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.num_heads
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    /// Adapter contribution multiplier alpha/r.
    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn embed_param_count(&self) -> u64 {
        (self.vocab * self.hidden + self.seq_len * self.hidden) as u64
    }

    /// Parameters of one encoder block: four attention projections, two FFN
    /// matrices, two layer norms with gain and shift.
    pub fn block_param_count(&self) -> u64 {
        (4 * self.hidden * self.hidden + 2 * self.hidden * self.ffn_width() + 4 * self.hidden)
            as u64
    }

    pub fn base_param_count(&self) -> u64 {
        self.embed_param_count() + self.num_blocks as u64 * self.block_param_count()
    }

    /// Adapter parameters per block: two targets (query, value), each with
    /// an `r x H` down factor and an `H x r` up factor.
    pub fn adapter_params_per_block(&self) -> u64 {
        (4 * self.lora_rank * self.hidden) as u64
    }

    pub fn head_param_count(&self) -> u64 {
        (self.hidden * self.num_classes + self.num_classes) as u64
    }

    pub fn trainable_param_count(&self) -> u64 {
        self.num_blocks as u64 * self.adapter_params_per_block() + self.head_param_count()
    }
}

/// Block boundary assignment: blocks `[0, cut)` run on the client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    cut: usize,
}

impl Partition {
    pub fn new(cut: usize, num_blocks: usize) -> Result<Self> {
        if cut > num_blocks {
            return Err(Error::InvalidArgument(format!(
                "cut {cut} exceeds num_blocks {num_blocks}"
            )));
        }
        Ok(Self { cut })
    }

    pub fn cut(&self) -> usize {
        self.cut
    }
}

/// Frozen weights of one encoder block.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

/// The entire frozen pre-trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<BlockWeights>,
}

/// One low-rank adapter: `a` is `r x H` (input projection), `b` is `H x r`
/// (output projection). The adapted matrix acts as `W + scaling*(b*a)^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Tensor,
    pub b: Tensor,
}

/// Adapters for one block's query and value projections.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockAdapters {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

/// Complete trainable state: one adapter pair per block plus the head.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub blocks: Vec<BlockAdapters>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Client-side fragment: adapters for blocks `[0, cut)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientAdapters {
    pub cut: usize,
    pub blocks: Vec<BlockAdapters>,
}

/// Server-side fragment: adapters for blocks `[cut, L)` plus the head.
#[derive(Debug, Clone, PartialEq)]
pub struct ServerAdapters {
    pub cut: usize,
    pub blocks: Vec<BlockAdapters>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Gradients for one adapter.
#[derive(Debug, Clone)]
pub struct LoraGrads {
    pub a: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct BlockGrads {
    pub q: LoraGrads,
    pub v: LoraGrads,
}

#[derive(Debug, Clone)]
pub struct ClientGrads {
    pub cut: usize,
    pub blocks: Vec<BlockGrads>,
}

#[derive(Debug, Clone)]
pub struct ServerGrads {
    pub cut: usize,
    pub blocks: Vec<BlockGrads>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct FullGrads {
    pub blocks: Vec<BlockGrads>,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

/// Initializes frozen base weights from `seed` (stream 0 of the generator).
/// Draw order is fixed: embeddings, then per block wq, wk, wv, wo, w1, w2.
pub fn init_base(config: &ModelConfig, seed: u64) -> Result<BaseWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    let h = config.hidden;
    let f = config.ffn_width();
    let proj_std = 1.0 / (h as f64).sqrt();
    let ffn_out_std = 1.0 / (f as f64).sqrt();

    let token_embed = Tensor::randn(&[config.vocab, h], 1.0, &mut rng);
    let pos_embed = Tensor::randn(&[config.seq_len, h], 1.0, &mut rng);
    let blocks = (0..config.num_blocks)
        .map(|_| BlockWeights {
            wq: Tensor::randn(&[h, h], proj_std, &mut rng),
            wk: Tensor::randn(&[h, h], proj_std, &mut rng),
            wv: Tensor::randn(&[h, h], proj_std, &mut rng),
            wo: Tensor::randn(&[h, h], proj_std, &mut rng),
            w1: Tensor::randn(&[h, f], proj_std, &mut rng),
            w2: Tensor::randn(&[f, h], ffn_out_std, &mut rng),
            ln1_gamma: Tensor::filled(&[h], 1.0),
            ln1_beta: Tensor::zeros(&[h]),
            ln2_gamma: Tensor::filled(&[h], 1.0),
            ln2_beta: Tensor::zeros(&[h]),
        })
        .collect();

    Ok(BaseWeights {
        config: config.clone(),
        token_embed,
        pos_embed,
        blocks,
    })
}

/// Initializes trainable state from `seed` (stream 1, independent of the
/// base draw). Down factors and the head are `N(0, 0.02^2)`; up factors and
/// the head bias start at zero, so a fresh model computes exactly the base
/// function.
pub fn init_adapters(config: &ModelConfig, seed: u64) -> Result<AdapterSet> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let h = config.hidden;
    let r = config.lora_rank;
    let blocks = (0..config.num_blocks)
        .map(|_| BlockAdapters {
            q: LoraAdapter {
                a: Tensor::randn(&[r, h], 0.02, &mut rng),
                b: Tensor::zeros(&[h, r]),
            },
            v: LoraAdapter {
                a: Tensor::randn(&[r, h], 0.02, &mut rng),
                b: Tensor::zeros(&[h, r]),
            },
        })
        .collect();
    let head_w = Tensor::randn(&[h, config.num_classes], 0.02, &mut rng);
    let head_b = Tensor::zeros(&[config.num_classes]);
    Ok(AdapterSet {
        blocks,
        head_w,
        head_b,
    })
}

impl AdapterSet {
    /// All-zero trainable state with the right shapes.
    pub fn zeros(config: &ModelConfig) -> Self {
        let h = config.hidden;
        let r = config.lora_rank;
        let zero_block = || BlockAdapters {
            q: LoraAdapter {
                a: Tensor::zeros(&[r, h]),
                b: Tensor::zeros(&[h, r]),
            },
            v: LoraAdapter {
                a: Tensor::zeros(&[r, h]),
                b: Tensor::zeros(&[h, r]),
            },
        };
        Self {
            blocks: (0..config.num_blocks).map(|_| zero_block()).collect(),
            head_w: Tensor::zeros(&[h, config.num_classes]),
            head_b: Tensor::zeros(&[config.num_classes]),
        }
    }
}

/// Trainable-leaf ids for one block on some tape.
#[derive(Debug, Clone, Copy)]
struct BlockParamIds {
    q_a: ValueId,
    q_b: ValueId,
    v_a: ValueId,
    v_b: ValueId,
}

/// Pushes the token + position embedding for a flat `batch*seq` token
/// slice. Both tables are frozen.
fn push_embedding(
    tape: &mut Tape,
    base: &BaseWeights,
    tokens: &[usize],
    batch: usize,
) -> Result<ValueId> {
    let cfg = &base.config;
    let table = tape.leaf(base.token_embed.clone(), false);
    let emb = tape.embed_lookup(table, tokens)?;
    let h = cfg.hidden;
    let mut tiled = Vec::with_capacity(batch * cfg.seq_len * h);
    for _ in 0..batch {
        tiled.extend_from_slice(base.pos_embed.data());
    }
    let pos = tape.leaf(Tensor::new(vec![batch * cfg.seq_len, h], tiled)?, false);
    tape.add(emb, pos)
}

/// Pushes one encoder block. Query and value projections get the low-rank
/// bypass `x -> x*a^T*b^T` scaled by alpha/r.
fn push_block(
    tape: &mut Tape,
    x: ValueId,
    weights: &BlockWeights,
    adapters: &BlockAdapters,
    cfg: &ModelConfig,
    batch: usize,
) -> Result<(ValueId, BlockParamIds)> {
    let scaling = cfg.scaling();
    let ln1_g = tape.leaf(weights.ln1_gamma.clone(), false);
    let ln1_b = tape.leaf(weights.ln1_beta.clone(), false);
    let h1 = tape.layer_norm(x, ln1_g, ln1_b, LAYER_NORM_EPS)?;

    let wq = tape.leaf(weights.wq.clone(), false);
    let q_a = tape.leaf(adapters.q.a.clone(), true);
    let q_b = tape.leaf(adapters.q.b.clone(), true);
    let q_base = tape.matmul(h1, wq)?;
    let q_down = tape.matmul_transpose_b(h1, q_a)?;
    let q_up = tape.matmul_transpose_b(q_down, q_b)?;
    let q_lora = tape.scale(q_up, scaling)?;
    let q = tape.add(q_base, q_lora)?;

    let wk = tape.leaf(weights.wk.clone(), false);
    let k = tape.matmul(h1, wk)?;

    let wv = tape.leaf(weights.wv.clone(), false);
    let v_a = tape.leaf(adapters.v.a.clone(), true);
    let v_b = tape.leaf(adapters.v.b.clone(), true);
    let v_base = tape.matmul(h1, wv)?;
    let v_down = tape.matmul_transpose_b(h1, v_a)?;
    let v_up = tape.matmul_transpose_b(v_down, v_b)?;
    let v_lora = tape.scale(v_up, scaling)?;
    let v = tape.add(v_base, v_lora)?;

    let attn = tape.multi_head_attention(q, k, v, batch, cfg.num_heads)?;
    let wo = tape.leaf(weights.wo.clone(), false);
    let proj = tape.matmul(attn, wo)?;
    let x = tape.add(x, proj)?;

    let ln2_g = tape.leaf(weights.ln2_gamma.clone(), false);
    let ln2_b = tape.leaf(weights.ln2_beta.clone(), false);
    let h2 = tape.layer_norm(x, ln2_g, ln2_b, LAYER_NORM_EPS)?;
    let w1 = tape.leaf(weights.w1.clone(), false);
    let f1 = tape.matmul(h2, w1)?;
    let f1 = tape.gelu(f1)?;
    let w2 = tape.leaf(weights.w2.clone(), false);
    let f2 = tape.matmul(f1, w2)?;
    let x = tape.add(x, f2)?;

    Ok((
        x,
        BlockParamIds {
            q_a,
            q_b,
            v_a,
            v_b,
        },
    ))
}

/// Pushes mean pooling over the sequence and the classifier head.
fn push_head(
    tape: &mut Tape,
    x: ValueId,
    head_w: &Tensor,
    head_b: &Tensor,
    cfg: &ModelConfig,
) -> Result<(ValueId, ValueId, ValueId)> {
    let pooled = tape.mean_pool_rows(x, cfg.seq_len)?;
    let w = tape.leaf(head_w.clone(), true);
    let b = tape.leaf(head_b.clone(), true);
    let logits = tape.matmul(pooled, w)?;
    let logits = tape.add_row_bias(logits, b)?;
    Ok((logits, w, b))
}

fn batch_from_tokens(cfg: &ModelConfig, tokens: &[usize]) -> Result<usize> {
    if tokens.is_empty() || !tokens.len().is_multiple_of(cfg.seq_len) {
        return Err(Error::InvalidArgument(format!(
            "token count {} is not a positive multiple of seq_len {}",
            tokens.len(),
            cfg.seq_len
        )));
    }
    Ok(tokens.len() / cfg.seq_len)
}

fn collect_block_grads(grads: &Gradients, ids: &[BlockParamIds]) -> Vec<BlockGrads> {
    ids.iter()
        .map(|id| BlockGrads {
            q: LoraGrads {
                a: grads.get(id.q_a).expect("trainable leaf").clone(),
                b: grads.get(id.q_b).expect("trainable leaf").clone(),
            },
            v: LoraGrads {
                a: grads.get(id.v_a).expect("trainable leaf").clone(),
                b: grads.get(id.v_b).expect("trainable leaf").clone(),
            },
        })
        .collect()
}

/// Retained forward state of a client sub-model: blocks `[0, cut)`.
pub struct ClientPass {
    tape: Tape,
    output: ValueId,
    block_ids: Vec<BlockParamIds>,
    cut: usize,
}

impl ClientPass {
    /// Boundary activation to upload, shape `[batch*seq, hidden]`.
    pub fn activation(&self) -> &Tensor {
        self.tape.value(self.output)
    }

    /// Chains the gradient received for the boundary activation through the
    /// retained tape and returns client-side adapter gradients.
    pub fn boundary_backward(&self, upstream: &Tensor) -> Result<ClientGrads> {
        let grads = self.tape.backward_from(self.output, upstream)?;
        Ok(ClientGrads {
            cut: self.cut,
            blocks: collect_block_grads(&grads, &self.block_ids),
        })
    }
}

/// Runs blocks `[0, cut)` for one batch of flat tokens.
pub fn forward_client(
    base: &BaseWeights,
    adapters: &ClientAdapters,
    tokens: &[usize],
) -> Result<ClientPass> {
    let cfg = &base.config;
    if adapters.cut > cfg.num_blocks || adapters.blocks.len() != adapters.cut {
        return Err(Error::Contract(format!(
            "client adapters claim cut {} with {} blocks (model has {})",
            adapters.cut,
            adapters.blocks.len(),
            cfg.num_blocks
        )));
    }
    let batch = batch_from_tokens(cfg, tokens)?;
    let mut tape = Tape::new();
    let mut x = push_embedding(&mut tape, base, tokens, batch)?;
    let mut block_ids = Vec::with_capacity(adapters.cut);
    for (weights, block_adapters) in base.blocks[..adapters.cut].iter().zip(&adapters.blocks) {
        let (next, ids) = push_block(&mut tape, x, weights, block_adapters, cfg, batch)?;
        x = next;
        block_ids.push(ids);
    }
    Ok(ClientPass {
        tape,
        output: x,
        block_ids,
        cut: adapters.cut,
    })
}

/// Retained forward state of the server sub-model: blocks `[cut, L)` plus
/// the classifier head, computed from a received boundary activation.
pub struct ServerPass {
    tape: Tape,
    boundary: ValueId,
    loss: ValueId,
    logits: ValueId,
    block_ids: Vec<BlockParamIds>,
    head_w: ValueId,
    head_b: ValueId,
    cut: usize,
}

impl ServerPass {
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).scalar_value()
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Backward through the server sub-model. Returns the gradient w.r.t.
    /// the boundary activation (to send back) and server-side gradients.
    pub fn backward(&self) -> Result<(Tensor, ServerGrads)> {
        let grads = self.tape.backward(self.loss)?;
        let boundary = grads
            .get(self.boundary)
            .expect("boundary activation is a trainable leaf")
            .clone();
        Ok((
            boundary,
            ServerGrads {
                cut: self.cut,
                blocks: collect_block_grads(&grads, &self.block_ids),
                head_w: grads.get(self.head_w).expect("trainable leaf").clone(),
                head_b: grads.get(self.head_b).expect("trainable leaf").clone(),
            },
        ))
    }
}

/// Runs blocks `[cut, L)` and the head on a boundary activation.
pub fn forward_server(
    base: &BaseWeights,
    adapters: &ServerAdapters,
    activation: &Tensor,
    labels: &[usize],
) -> Result<ServerPass> {
    let cfg = &base.config;
    if adapters.cut > cfg.num_blocks
        || adapters.blocks.len() != cfg.num_blocks - adapters.cut
    {
        return Err(Error::Contract(format!(
            "server adapters claim cut {} with {} blocks (model has {})",
            adapters.cut,
            adapters.blocks.len(),
            cfg.num_blocks
        )));
    }
    if activation.rank() != 2 || activation.cols() != cfg.hidden {
        return Err(Error::DimensionMismatch {
            op: "forward_server",
            lhs: activation.shape().to_vec(),
            rhs: vec![0, cfg.hidden],
        });
    }
    if activation.rows() == 0 || !activation.rows().is_multiple_of(cfg.seq_len) {
        return Err(Error::InvalidArgument(format!(
            "activation rows {} is not a positive multiple of seq_len {}",
            activation.rows(),
            cfg.seq_len
        )));
    }
    let batch = activation.rows() / cfg.seq_len;
    if labels.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }

    let mut tape = Tape::new();
    // The boundary is a trainable leaf so the sweep produces its gradient.
    let boundary = tape.leaf(activation.clone(), true);
    let mut x = boundary;
    let mut block_ids = Vec::with_capacity(adapters.blocks.len());
    for (weights, block_adapters) in base.blocks[adapters.cut..].iter().zip(&adapters.blocks) {
        let (next, ids) = push_block(&mut tape, x, weights, block_adapters, cfg, batch)?;
        x = next;
        block_ids.push(ids);
    }
    let (logits, head_w, head_b) = push_head(&mut tape, x, &adapters.head_w, &adapters.head_b, cfg)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok(ServerPass {
        tape,
        boundary,
        loss,
        logits,
        block_ids,
        head_w,
        head_b,
        cut: adapters.cut,
    })
}

/// Retained forward state of the whole model on one tape.
pub struct MonolithicPass {
    tape: Tape,
    loss: ValueId,
    logits: ValueId,
    block_ids: Vec<BlockParamIds>,
    head_w: ValueId,
    head_b: ValueId,
}

impl MonolithicPass {
    pub fn loss(&self) -> f64 {
        self.tape.value(self.loss).scalar_value()
    }

    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    pub fn backward(&self) -> Result<FullGrads> {
        let grads = self.tape.backward(self.loss)?;
        Ok(FullGrads {
            blocks: collect_block_grads(&grads, &self.block_ids),
            head_w: grads.get(self.head_w).expect("trainable leaf").clone(),
            head_b: grads.get(self.head_b).expect("trainable leaf").clone(),
        })
    }
}

/// Runs all blocks and the head on one tape.
pub fn forward_monolithic(
    base: &BaseWeights,
    set: &AdapterSet,
    tokens: &[usize],
    labels: &[usize],
) -> Result<MonolithicPass> {
    let cfg = &base.config;
    if set.blocks.len() != cfg.num_blocks {
        return Err(Error::Contract(format!(
            "adapter set has {} blocks, model has {}",
            set.blocks.len(),
            cfg.num_blocks
        )));
    }
    let batch = batch_from_tokens(cfg, tokens)?;
    if labels.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} labels for batch of {batch}",
            labels.len()
        )));
    }
    let mut tape = Tape::new();
    let mut x = push_embedding(&mut tape, base, tokens, batch)?;
    let mut block_ids = Vec::with_capacity(cfg.num_blocks);
    for (weights, block_adapters) in base.blocks.iter().zip(&set.blocks) {
        let (next, ids) = push_block(&mut tape, x, weights, block_adapters, cfg, batch)?;
        x = next;
        block_ids.push(ids);
    }
    let (logits, head_w, head_b) = push_head(&mut tape, x, &set.head_w, &set.head_b, cfg)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    Ok(MonolithicPass {
        tape,
        loss,
        logits,
        block_ids,
        head_w,
        head_b,
    })
}

/// Inference-only logits for a token batch (used for held-out evaluation).
pub fn eval_logits(base: &BaseWeights, set: &AdapterSet, tokens: &[usize]) -> Result<Tensor> {
    let cfg = &base.config;
    if set.blocks.len() != cfg.num_blocks {
        return Err(Error::Contract(format!(
            "adapter set has {} blocks, model has {}",
            set.blocks.len(),
            cfg.num_blocks
        )));
    }
    let batch = batch_from_tokens(cfg, tokens)?;
    let mut tape = Tape::new();
    let mut x = push_embedding(&mut tape, base, tokens, batch)?;
    for (weights, block_adapters) in base.blocks.iter().zip(&set.blocks) {
        let (next, _) = push_block(&mut tape, x, weights, block_adapters, cfg, batch)?;
        x = next;
    }
    let (logits, _, _) = push_head(&mut tape, x, &set.head_w, &set.head_b, cfg)?;
    Ok(tape.value(logits).clone())
}

/// Row-wise argmax accuracy; argmax ties resolve to the lowest class index.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let c = logits.cols();
    let mut hits = 0usize;
    for (row, &label) in logits.data().chunks_exact(c).zip(labels) {
        let mut best = 0usize;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            hits += 1;
        }
    }
    hits as f64 / labels.len() as f64
}

fn step_tensor(op: &'static str, w: &mut Tensor, g: &Tensor, lr: f64) -> Result<()> {
    if w.shape() != g.shape() {
        return Err(Error::Contract(format!(
            "{op}: parameter shape {:?} vs gradient shape {:?}",
            w.shape(),
            g.shape()
        )));
    }
    for (wv, gv) in w.data_mut().iter_mut().zip(g.data()) {
        *wv -= lr * gv;
    }
    Ok(())
}

fn step_blocks(op: &'static str, blocks: &mut [BlockAdapters], grads: &[BlockGrads], lr: f64) -> Result<()> {
    if blocks.len() != grads.len() {
        return Err(Error::Contract(format!(
            "{op}: {} adapter blocks vs {} gradient blocks",
            blocks.len(),
            grads.len()
        )));
    }
    for (b, g) in blocks.iter_mut().zip(grads) {
        step_tensor(op, &mut b.q.a, &g.q.a, lr)?;
        step_tensor(op, &mut b.q.b, &g.q.b, lr)?;
        step_tensor(op, &mut b.v.a, &g.v.a, lr)?;
        step_tensor(op, &mut b.v.b, &g.v.b, lr)?;
    }
    Ok(())
}

pub fn sgd_step_client(adapters: &mut ClientAdapters, grads: &ClientGrads, lr: f64) -> Result<()> {
    if adapters.cut != grads.cut {
        return Err(Error::Contract(format!(
            "sgd_step_client: adapter cut {} vs gradient cut {}",
            adapters.cut, grads.cut
        )));
    }
    step_blocks("sgd_step_client", &mut adapters.blocks, &grads.blocks, lr)
}

pub fn sgd_step_server(adapters: &mut ServerAdapters, grads: &ServerGrads, lr: f64) -> Result<()> {
    if adapters.cut != grads.cut {
        return Err(Error::Contract(format!(
            "sgd_step_server: adapter cut {} vs gradient cut {}",
            adapters.cut, grads.cut
        )));
    }
    step_blocks("sgd_step_server", &mut adapters.blocks, &grads.blocks, lr)?;
    step_tensor("sgd_step_server", &mut adapters.head_w, &grads.head_w, lr)?;
    step_tensor("sgd_step_server", &mut adapters.head_b, &grads.head_b, lr)
}

pub fn sgd_step_full(set: &mut AdapterSet, grads: &FullGrads, lr: f64) -> Result<()> {
    step_blocks("sgd_step_full", &mut set.blocks, &grads.blocks, lr)?;
    step_tensor("sgd_step_full", &mut set.head_w, &grads.head_w, lr)?;
    step_tensor("sgd_step_full", &mut set.head_b, &grads.head_b, lr)
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SLRA";
pub const CHECKPOINT_VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    write_u32(w, t.rank() as u32)?;
    for &d in t.shape() {
        write_u32(w, d as u32)?;
    }
    for &v in t.data() {
        write_f64(w, v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let rank = read_u32(r)? as usize;
    if rank > 4 {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("tensor rank {rank} exceeds supported maximum 4"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        data.push(read_f64(r)?);
    }
    Tensor::new(shape, data)
}

/// Adapter tensors in checkpoint declaration order: per block the query
/// down/up then value down/up factors, then the head weight and bias.
fn adapter_tensors(set: &AdapterSet) -> Vec<&Tensor> {
    let mut out = Vec::with_capacity(set.blocks.len() * 4 + 2);
    for b in &set.blocks {
        out.push(&b.q.a);
        out.push(&b.q.b);
        out.push(&b.v.a);
        out.push(&b.v.b);
    }
    out.push(&set.head_w);
    out.push(&set.head_b);
    out
}

/// Writes the binary checkpoint: magic, version, config, then adapter
/// tensors in declaration order. All integers and floats little-endian.
pub fn write_checkpoint<W: Write>(w: &mut W, config: &ModelConfig, set: &AdapterSet) -> Result<()> {
    config.validate()?;
    if set.blocks.len() != config.num_blocks {
        return Err(Error::Contract(format!(
            "adapter set has {} blocks, config says {}",
            set.blocks.len(),
            config.num_blocks
        )));
    }
    w.write_all(&CHECKPOINT_MAGIC)?;
    write_u32(w, CHECKPOINT_VERSION)?;
    write_u32(w, config.num_blocks as u32)?;
    write_u32(w, config.hidden as u32)?;
    write_u32(w, config.num_heads as u32)?;
    write_u32(w, config.ffn_mult as u32)?;
    write_u32(w, config.vocab as u32)?;
    write_u32(w, config.seq_len as u32)?;
    write_u32(w, config.num_classes as u32)?;
    write_u32(w, config.lora_rank as u32)?;
    write_f64(w, config.lora_alpha)?;
    for t in adapter_tensors(set) {
        write_tensor(w, t)?;
    }
    Ok(())
}

/// Reads a checkpoint and validates magic, version, config, and every
/// tensor shape against the config.
pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<(ModelConfig, AdapterSet)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("bad magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"),
        });
    }
    let version = read_u32(r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            reason: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        });
    }
    let config = ModelConfig {
        num_blocks: read_u32(r)? as usize,
        hidden: read_u32(r)? as usize,
        num_heads: read_u32(r)? as usize,
        ffn_mult: read_u32(r)? as usize,
        vocab: read_u32(r)? as usize,
        seq_len: read_u32(r)? as usize,
        num_classes: read_u32(r)? as usize,
        lora_rank: read_u32(r)? as usize,
        lora_alpha: read_f64(r)?,
    };
    config.validate().map_err(|e| Error::Format {
        what: "checkpoint",
        reason: format!("invalid config: {e}"),
    })?;

    let h = config.hidden;
    let rank = config.lora_rank;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    let expect = |t: &Tensor, shape: &[usize], what: &str| -> Result<()> {
        if t.shape() != shape {
            return Err(Error::Format {
                what: "checkpoint",
                reason: format!("{what} has shape {:?}, expected {shape:?}", t.shape()),
            });
        }
        Ok(())
    };
    for i in 0..config.num_blocks {
        let q_a = read_tensor(r)?;
        let q_b = read_tensor(r)?;
        let v_a = read_tensor(r)?;
        let v_b = read_tensor(r)?;
        expect(&q_a, &[rank, h], &format!("block {i} q.a"))?;
        expect(&q_b, &[h, rank], &format!("block {i} q.b"))?;
        expect(&v_a, &[rank, h], &format!("block {i} v.a"))?;
        expect(&v_b, &[h, rank], &format!("block {i} v.b"))?;
        blocks.push(BlockAdapters {
            q: LoraAdapter { a: q_a, b: q_b },
            v: LoraAdapter { a: v_a, b: v_b },
        });
    }
    let head_w = read_tensor(r)?;
    let head_b = read_tensor(r)?;
    expect(&head_w, &[h, config.num_classes], "head weight")?;
    expect(&head_b, &[config.num_classes], "head bias")?;

    let mut trailing = [0u8; 1];
    match r.read(&mut trailing)? {
        0 => {}
        _ => {
            return Err(Error::Format {
                what: "checkpoint",
                reason: "trailing bytes after final tensor".into(),
            })
        }
    }

    Ok((
        config,
        AdapterSet {
            blocks,
            head_w,
            head_b,
        },
    ))
}

pub fn save_checkpoint(path: &Path, config: &ModelConfig, set: &AdapterSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, config, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, AdapterSet)> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_batch(seed: u64, batch: usize) -> (Vec<usize>, Vec<usize>) {
        use rand::Rng;
        let cfg = ModelConfig::desk();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens = (0..batch * cfg.seq_len)
            .map(|_| rng.gen_range(1..cfg.vocab))
            .collect();
        let labels = (0..batch).map(|_| rng.gen_range(0..cfg.num_classes)).collect();
        (tokens, labels)
    }

    fn split_sets(set: &AdapterSet, cut: usize) -> (ClientAdapters, ServerAdapters) {
        (
            ClientAdapters {
                cut,
                blocks: set.blocks[..cut].to_vec(),
            },
            ServerAdapters {
                cut,
                blocks: set.blocks[cut..].to_vec(),
                head_w: set.head_w.clone(),
                head_b: set.head_b.clone(),
            },
        )
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = ModelConfig::desk();
        cfg.num_heads = 5;
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        let mut cfg = ModelConfig::desk();
        cfg.hidden = 0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        let mut cfg = ModelConfig::desk();
        cfg.lora_alpha = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::InvalidArgument(_))));
        assert!(ModelConfig::desk().validate().is_ok());
    }

    #[test]
    fn parameter_counts_match_hand_arithmetic() {
        let cfg = ModelConfig::bert_base_shape();
        // Independent count: embeddings + 12 blocks of
        // (4 attention mats + 2 FFN mats + 4 norm vectors).
        let embed = 30522u64 * 768 + 128 * 768;
        let block = 4 * 768 * 768 + 768 * 3072 + 3072 * 768 + 4 * 768;
        assert_eq!(cfg.base_param_count(), embed + 12 * block);
        assert_eq!(cfg.base_param_count(), 108_510_720);
        // Four bytes per parameter lands within 5% of 440 MB.
        let mb = cfg.base_param_count() as f64 * 4.0 / 1e6;
        assert!((mb - 440.0).abs() / 440.0 < 0.05, "got {mb} MB");

        let desk = ModelConfig::desk();
        assert_eq!(desk.adapter_params_per_block(), 4 * 4 * 32);
        assert_eq!(desk.head_param_count(), 32 * 4 + 4);
        assert_eq!(
            desk.trainable_param_count(),
            4 * 4 * 4 * 32 + 32 * 4 + 4
        );
    }

    #[test]
    fn partition_rejects_cut_beyond_model() {
        assert!(Partition::new(4, 4).is_ok());
        assert!(matches!(
            Partition::new(5, 4),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let cfg = ModelConfig::desk();
        let b1 = init_base(&cfg, 7).unwrap();
        let b2 = init_base(&cfg, 7).unwrap();
        assert_eq!(b1, b2);
        let b3 = init_base(&cfg, 8).unwrap();
        assert_ne!(b1, b3);

        let a1 = init_adapters(&cfg, 7).unwrap();
        let a2 = init_adapters(&cfg, 7).unwrap();
        assert_eq!(a1, a2);
        // Up factors start at zero.
        assert!(a1.blocks.iter().all(|b| b.q.b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn fresh_adapters_compute_exactly_the_base_function() {
        let cfg = ModelConfig::desk();
        let base = init_base(&cfg, 1).unwrap();
        let fresh = init_adapters(&cfg, 2).unwrap();
        let mut zeroed = AdapterSet::zeros(&cfg);
        zeroed.head_w = fresh.head_w.clone();
        zeroed.head_b = fresh.head_b.clone();

        let (tokens, _) = desk_batch(3, 2);
        let with_fresh = eval_logits(&base, &fresh, &tokens).unwrap();
        let with_zeroed = eval_logits(&base, &zeroed, &tokens).unwrap();
        assert_eq!(with_fresh.max_abs_diff(&with_zeroed), 0.0);
    }

    #[test]
    fn merged_weights_equal_adapter_path() {
        // W + scaling*(b*a)^T run without adapters must match the bypass.
        let cfg = ModelConfig::desk();
        let mut base = init_base(&cfg, 4).unwrap();
        let mut set = init_adapters(&cfg, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for b in &mut set.blocks {
            b.q.b = Tensor::randn(&[cfg.hidden, cfg.lora_rank], 0.05, &mut rng);
            b.v.b = Tensor::randn(&[cfg.hidden, cfg.lora_rank], 0.05, &mut rng);
        }

        let (tokens, _) = desk_batch(7, 2);
        let adapter_path = eval_logits(&base, &set, &tokens).unwrap();

        let scaling = cfg.scaling();
        let h = cfg.hidden;
        let r = cfg.lora_rank;
        let merge = |w: &mut Tensor, ad: &LoraAdapter| {
            for i in 0..h {
                for j in 0..h {
                    // (b*a)[j][i] summed over the rank dimension.
                    let mut acc = 0.0;
                    for p in 0..r {
                        acc += ad.b.data()[j * r + p] * ad.a.data()[p * h + i];
                    }
                    w.data_mut()[i * h + j] += scaling * acc;
                }
            }
        };
        for (bw, ba) in base.blocks.iter_mut().zip(&set.blocks) {
            merge(&mut bw.wq, &ba.q);
            merge(&mut bw.wv, &ba.v);
        }
        let mut merged_set = AdapterSet::zeros(&cfg);
        merged_set.head_w = set.head_w.clone();
        merged_set.head_b = set.head_b.clone();
        let merged_path = eval_logits(&base, &merged_set, &tokens).unwrap();
        assert!(adapter_path.max_abs_diff(&merged_path) < 1e-12);
    }

    #[test]
    fn split_equals_monolithic_for_every_cut() {
        let cfg = ModelConfig::desk();
        let base = init_base(&cfg, 10).unwrap();
        let mut set = init_adapters(&cfg, 11).unwrap();
        // Non-zero up factors so gradients flow through both factors.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for b in &mut set.blocks {
            b.q.b = Tensor::randn(&[cfg.hidden, cfg.lora_rank], 0.05, &mut rng);
            b.v.b = Tensor::randn(&[cfg.hidden, cfg.lora_rank], 0.05, &mut rng);
        }
        let (tokens, labels) = desk_batch(13, 2);

        let mono = forward_monolithic(&base, &set, &tokens, &labels).unwrap();
        let mono_grads = mono.backward().unwrap();

        let rel = |a: f64, b: f64| (a - b).abs() / f64::max(1.0, f64::max(a.abs(), b.abs()));
        for cut in 0..=cfg.num_blocks {
            let (client, server) = split_sets(&set, cut);
            let cpass = forward_client(&base, &client, &tokens).unwrap();
            let spass = forward_server(&base, &server, cpass.activation(), &labels).unwrap();
            assert!(rel(spass.loss(), mono.loss()) < 1e-10, "cut {cut} loss");

            let (boundary, sgrads) = spass.backward().unwrap();
            let cgrads = cpass.boundary_backward(&boundary).unwrap();

            let mut max_err: f64 = 0.0;
            let mut cmp = |a: &Tensor, b: &Tensor| {
                for (x, y) in a.data().iter().zip(b.data()) {
                    max_err = max_err.max(rel(*x, *y));
                }
            };
            for (i, g) in cgrads.blocks.iter().enumerate() {
                cmp(&g.q.a, &mono_grads.blocks[i].q.a);
                cmp(&g.q.b, &mono_grads.blocks[i].q.b);
                cmp(&g.v.a, &mono_grads.blocks[i].v.a);
                cmp(&g.v.b, &mono_grads.blocks[i].v.b);
            }
            for (i, g) in sgrads.blocks.iter().enumerate() {
                cmp(&g.q.a, &mono_grads.blocks[cut + i].q.a);
                cmp(&g.q.b, &mono_grads.blocks[cut + i].q.b);
                cmp(&g.v.a, &mono_grads.blocks[cut + i].v.a);
                cmp(&g.v.b, &mono_grads.blocks[cut + i].v.b);
            }
            cmp(&sgrads.head_w, &mono_grads.head_w);
            cmp(&sgrads.head_b, &mono_grads.head_b);
            assert!(max_err < 1e-10, "cut {cut}: max grad rel err {max_err}");
        }
    }

    #[test]
    fn one_step_reduces_loss_and_never_touches_base() {
        let cfg = ModelConfig::desk();
        let base = init_base(&cfg, 20).unwrap();
        let base_before = base.clone();
        let mut set = init_adapters(&cfg, 21).unwrap();
        let (tokens, labels) = desk_batch(22, 4);

        let pass = forward_monolithic(&base, &set, &tokens, &labels).unwrap();
        let loss_before = pass.loss();
        let grads = pass.backward().unwrap();
        sgd_step_full(&mut set, &grads, 0.5).unwrap();
        let loss_after = forward_monolithic(&base, &set, &tokens, &labels)
            .unwrap()
            .loss();
        assert!(
            loss_after < loss_before,
            "loss {loss_before} -> {loss_after}"
        );
        assert_eq!(base, base_before);
    }

    #[test]
    fn zero_gradients_and_zero_lr_leave_adapters_unchanged() {
        let cfg = ModelConfig::desk();
        let base = init_base(&cfg, 30).unwrap();
        let mut set = init_adapters(&cfg, 31).unwrap();
        let before = set.clone();
        let (tokens, labels) = desk_batch(32, 2);
        let grads = forward_monolithic(&base, &set, &tokens, &labels)
            .unwrap()
            .backward()
            .unwrap();

        sgd_step_full(&mut set, &grads, 0.0).unwrap();
        assert_eq!(set, before);

        let zero_grads = FullGrads {
            blocks: set
                .blocks
                .iter()
                .map(|b| BlockGrads {
                    q: LoraGrads {
                        a: Tensor::zeros(b.q.a.shape()),
                        b: Tensor::zeros(b.q.b.shape()),
                    },
                    v: LoraGrads {
                        a: Tensor::zeros(b.v.a.shape()),
                        b: Tensor::zeros(b.v.b.shape()),
                    },
                })
                .collect(),
            head_w: Tensor::zeros(set.head_w.shape()),
            head_b: Tensor::zeros(set.head_b.shape()),
        };
        sgd_step_full(&mut set, &zero_grads, 0.7).unwrap();
        assert_eq!(set, before);
    }

    #[test]
    fn misaligned_gradients_are_a_contract_error() {
        let cfg = ModelConfig::desk();
        let set = init_adapters(&cfg, 40).unwrap();
        let (mut client, _) = split_sets(&set, 2);
        let wrong = ClientGrads { cut: 1, blocks: vec![] };
        assert!(matches!(
            sgd_step_client(&mut client, &wrong, 0.1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn activation_shape_is_invariant_across_cuts() {
        let cfg = ModelConfig::desk();
        let base = init_base(&cfg, 50).unwrap();
        let set = init_adapters(&cfg, 51).unwrap();
        let (tokens, _) = desk_batch(52, 3);
        for cut in [1usize, 3] {
            let (client, _) = split_sets(&set, cut);
            let pass = forward_client(&base, &client, &tokens).unwrap();
            assert_eq!(
                pass.activation().shape(),
                &[3 * cfg.seq_len, cfg.hidden],
                "cut {cut}"
            );
        }
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = ModelConfig::desk();
        let set = init_adapters(&cfg, 60).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &set).unwrap();
        assert_eq!(&buf[..4], b"SLRA");
        let (cfg2, set2) = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(set, set2);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = ModelConfig::desk();
        let set = init_adapters(&cfg, 61).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &cfg, &set).unwrap();

        let mut bad_magic = buf.clone();
        bad_magic[0] = b'X';
        assert!(matches!(
            read_checkpoint(&mut bad_magic.as_slice()),
            Err(Error::Format { .. })
        ));

        let mut bad_version = buf.clone();
        bad_version[4] = 99;
        assert!(matches!(
            read_checkpoint(&mut bad_version.as_slice()),
            Err(Error::Format { .. })
        ));

        let truncated = &buf[..buf.len() - 3];
        assert!(read_checkpoint(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(matches!(
            read_checkpoint(&mut trailing.as_slice()),
            Err(Error::Format { .. })
        ));
    }

    #[test]
    fn file_checkpoint_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("adapters.slra");
        let cfg = ModelConfig::desk();
        let set = init_adapters(&cfg, 62).unwrap();
        save_checkpoint(&path, &cfg, &set).unwrap();
        let (cfg2, set2) = load_checkpoint(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(set, set2);
    }
}
