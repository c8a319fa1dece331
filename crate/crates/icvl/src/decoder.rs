//! Desk-scale autoregressive decoder over the action-token vocabulary.
//!
//! Action sequences are tokenized as alternating verb/noun id streams (plus a
//! separator used between in-context blocks), the decoder is a small stack of
//! causal self-attention blocks, and adaptation is LoRA-style: the base
//! weights stay frozen while rank-`r` factor pairs on the attention q/v
//! projections and the output head receive gradients. Joint training also
//! updates the fusion parameters, since the prefix is rebuilt through the
//! fusion module at every step.
//!
//! Weight convention in this module: matrices are stored `d_out x d_in` and
//! applied as `y = x * W^T`, matching the adapter update
//! `W_eff = W + scale * B * A`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IcvlError, Result};
use crate::icaf::{
    cross_attention_on_tape, project_visual_on_tape, FusionMode, IcafParams, IcafVars,
};
use crate::matrix::{positional_encoding_2d, EmbeddingMatrix};
use crate::optim::{Optimizer, OptimizerKind};
use crate::recognizer::{ActionLabel, Vocabulary};

/// Token ids over verbs, nouns, and one separator.
///
/// Layout: verb ids map to `0..verb_count`, noun ids to
/// `verb_count..verb_count+noun_count`, the separator is the last id. The
/// counts include the OOV sentinels, so OOV actions tokenize like any other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    pub verb_count: usize,
    pub noun_count: usize,
}

impl TokenVocab {
    pub fn from_vocabulary(vocab: &Vocabulary) -> Self {
        TokenVocab {
            verb_count: vocab.verb_count(),
            noun_count: vocab.noun_count(),
        }
    }

    pub fn size(&self) -> usize {
        self.verb_count + self.noun_count + 1
    }

    pub fn sep_token(&self) -> usize {
        self.verb_count + self.noun_count
    }

    pub fn is_verb_token(&self, t: usize) -> bool {
        t < self.verb_count
    }

    pub fn is_noun_token(&self, t: usize) -> bool {
        t >= self.verb_count && t < self.verb_count + self.noun_count
    }

    pub fn action_tokens(&self, a: ActionLabel) -> Result<[usize; 2]> {
        if a.verb_id >= self.verb_count || a.noun_id >= self.noun_count {
            return Err(IcvlError::data(format!(
                "action ({}, {}) outside token vocabulary",
                a.verb_id, a.noun_id
            )));
        }
        Ok([a.verb_id, self.verb_count + a.noun_id])
    }

    /// Flatten actions into the alternating verb/noun token stream.
    pub fn tokens_for_actions(&self, actions: &[ActionLabel]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(actions.len() * 2);
        for a in actions {
            out.extend(self.action_tokens(*a)?);
        }
        Ok(out)
    }

    pub fn decode_action(&self, verb_token: usize, noun_token: usize) -> Result<ActionLabel> {
        if !self.is_verb_token(verb_token) || !self.is_noun_token(noun_token) {
            return Err(IcvlError::data(format!(
                "token pair ({verb_token}, {noun_token}) violates verb/noun parity"
            )));
        }
        Ok(ActionLabel::new(verb_token, noun_token - self.verb_count))
    }

    /// Decode an alternating token stream back into actions.
    pub fn decode_tokens(&self, tokens: &[usize]) -> Result<Vec<ActionLabel>> {
        if tokens.len() % 2 != 0 {
            return Err(IcvlError::data("odd token stream cannot form actions"));
        }
        tokens
            .chunks(2)
            .map(|pair| self.decode_action(pair[0], pair[1]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub d_l: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_l: 64,
            blocks: 2,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    wq: EmbeddingMatrix,
    wk: EmbeddingMatrix,
    wv: EmbeddingMatrix,
    wo: EmbeddingMatrix,
    ffn_w1: EmbeddingMatrix,
    ffn_b1: EmbeddingMatrix,
    ffn_w2: EmbeddingMatrix,
    ffn_b2: EmbeddingMatrix,
}

/// Frozen base decoder: token table, causal blocks, output head.
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub vocab: TokenVocab,
    token_table: EmbeddingMatrix,
    blocks: Vec<DecoderBlock>,
    head: EmbeddingMatrix,
    pub seed: u64,
}

impl DecoderParams {
    pub fn seeded(vocab: TokenVocab, config: DecoderConfig, seed: u64) -> Result<Self> {
        if config.d_l == 0 || config.blocks == 0 || config.ffn_mult == 0 {
            return Err(IcvlError::config("decoder dimensions must be positive"));
        }
        let d = config.d_l;
        let f = config.ffn_mult * d;
        let v = vocab.size();
        let mut s = seed;
        let mut gauss = |rows: usize, dims: usize, scale: f64| {
            s += 1;
            EmbeddingMatrix::seeded_gaussian(rows, dims, scale, s)
        };
        let inv = 1.0 / (d as f64).sqrt();
        let blocks = (0..config.blocks)
            .map(|_| DecoderBlock {
                wq: gauss(d, d, inv),
                wk: gauss(d, d, inv),
                wv: gauss(d, d, inv),
                wo: gauss(d, d, 0.5 * inv),
                ffn_w1: gauss(f, d, inv),
                ffn_b1: EmbeddingMatrix::zeros(1, f),
                ffn_w2: gauss(d, f, 0.5 / (f as f64).sqrt()),
                ffn_b2: EmbeddingMatrix::zeros(1, d),
            })
            .collect();
        Ok(DecoderParams {
            config,
            vocab,
            token_table: gauss(v, d, inv),
            blocks,
            // Small head init keeps untrained logits near zero, so the
            // initial loss sits at ln(V) per token.
            head: gauss(v, d, 0.01),
            seed,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &EmbeddingMatrix)> {
        let mut out = vec![("token_table".to_string(), &self.token_table)];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.wq"), &b.wq));
            out.push((format!("block{i}.wk"), &b.wk));
            out.push((format!("block{i}.wv"), &b.wv));
            out.push((format!("block{i}.wo"), &b.wo));
            out.push((format!("block{i}.ffn_w1"), &b.ffn_w1));
            out.push((format!("block{i}.ffn_b1"), &b.ffn_b1));
            out.push((format!("block{i}.ffn_w2"), &b.ffn_w2));
            out.push((format!("block{i}.ffn_b2"), &b.ffn_b2));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("d_l".into(), self.config.d_l as u64);
        meta.insert("blocks".into(), self.config.blocks as u64);
        meta.insert("ffn_mult".into(), self.config.ffn_mult as u64);
        meta.insert("verb_count".into(), self.vocab.verb_count as u64);
        meta.insert("noun_count".into(), self.vocab.noun_count as u64);
        crate::io::save_archive_with_meta(dir, "decoder", self.seed, &self.named_tensors(), meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = crate::io::load_archive(dir)?;
        let get = |key: &str| -> Result<usize> {
            manifest
                .meta
                .get(key)
                .map(|v| *v as usize)
                .ok_or_else(|| IcvlError::format(format!("missing meta key {key}")))
        };
        let config = DecoderConfig {
            d_l: get("d_l")?,
            blocks: get("blocks")?,
            ffn_mult: get("ffn_mult")?,
        };
        let vocab = TokenVocab {
            verb_count: get("verb_count")?,
            noun_count: get("noun_count")?,
        };
        let mut params = DecoderParams::seeded(vocab, config, manifest.seed)?;
        let fetch = |name: &str| -> Result<EmbeddingMatrix> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| IcvlError::format(format!("missing tensor {name}")))
        };
        params.token_table = fetch("token_table")?;
        params.head = fetch("head")?;
        for (i, b) in params.blocks.iter_mut().enumerate() {
            b.wq = fetch(&format!("block{i}.wq"))?;
            b.wk = fetch(&format!("block{i}.wk"))?;
            b.wv = fetch(&format!("block{i}.wv"))?;
            b.wo = fetch(&format!("block{i}.wo"))?;
            b.ffn_w1 = fetch(&format!("block{i}.ffn_w1"))?;
            b.ffn_b1 = fetch(&format!("block{i}.ffn_b1"))?;
            b.ffn_w2 = fetch(&format!("block{i}.ffn_w2"))?;
            b.ffn_b2 = fetch(&format!("block{i}.ffn_b2"))?;
        }
        Ok(params)
    }
}

/// One low-rank factor pair `(A: r x d_in, B: d_out x r)` with `B` zeroed at
/// init so the adapted path starts exactly at the base output.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: EmbeddingMatrix,
    pub b: EmbeddingMatrix,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn zero_init(
        d_out: usize,
        d_in: usize,
        rank: usize,
        lora_alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return Err(IcvlError::config(format!(
                "rank {rank} must be in 1..=min({d_in}, {d_out})"
            )));
        }
        Ok(LoraAdapter {
            a: EmbeddingMatrix::seeded_gaussian(rank, d_in, 1.0 / (d_in as f64).sqrt(), seed),
            b: EmbeddingMatrix::zeros(d_out, rank),
            scale: lora_alpha / rank as f64,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn param_count(&self) -> usize {
        self.rank() * (self.a.dims() + self.b.rows())
    }

    pub fn is_zero(&self) -> bool {
        self.b.data().iter().all(|v| *v == 0.0)
    }
}

/// `input * (base + scale * B * A)^T`. A zero adapter (or zero scale) takes
/// the base path directly, so the output is bitwise identical to it.
pub fn apply_lora(
    base: &EmbeddingMatrix,
    adapter: &LoraAdapter,
    input: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    if adapter.a.dims() != base.dims() || adapter.b.rows() != base.rows() {
        return Err(IcvlError::shape(
            "apply_lora factors",
            adapter.b.shape(),
            base.shape(),
        ));
    }
    if adapter.a.rows() != adapter.b.dims() {
        return Err(IcvlError::shape(
            "apply_lora rank",
            adapter.a.shape(),
            adapter.b.shape(),
        ));
    }
    if adapter.is_zero() || adapter.scale == 0.0 {
        return crate::matrix::matmul_nt(input, base);
    }
    let delta = crate::matrix::matmul(&adapter.b, &adapter.a)?.scale(adapter.scale);
    crate::matrix::matmul_nt(input, &base.add(&delta)?)
}

/// Adapters for one block: the attention q and v projections.
#[derive(Debug, Clone)]
pub struct BlockAdapters {
    pub q: LoraAdapter,
    pub v: LoraAdapter,
}

/// All adapters for a decoder: q/v per block plus the output head.
#[derive(Debug, Clone)]
pub struct DecoderAdapters {
    pub blocks: Vec<BlockAdapters>,
    pub head: LoraAdapter,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl DecoderAdapters {
    pub fn zero_init(
        params: &DecoderParams,
        rank: usize,
        lora_alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        let d = params.config.d_l;
        let v = params.vocab.size();
        let mut s = seed;
        let mut next = |d_out: usize, d_in: usize| -> Result<LoraAdapter> {
            s += 1;
            LoraAdapter::zero_init(d_out, d_in, rank, lora_alpha, s)
        };
        let blocks = (0..params.config.blocks)
            .map(|_| {
                Ok(BlockAdapters {
                    q: next(d, d)?,
                    v: next(d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DecoderAdapters {
            blocks,
            head: next(v, d)?,
            rank,
            lora_alpha,
        })
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.q.param_count() + b.v.param_count())
            .sum::<usize>()
            + self.head.param_count()
    }

    pub fn named_tensors(&self) -> Vec<(String, &EmbeddingMatrix)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("block{i}.q.a"), &b.q.a));
            out.push((format!("block{i}.q.b"), &b.q.b));
            out.push((format!("block{i}.v.a"), &b.v.a));
            out.push((format!("block{i}.v.b"), &b.v.b));
        }
        out.push(("head.a".to_string(), &self.head.a));
        out.push(("head.b".to_string(), &self.head.b));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut EmbeddingMatrix)> {
        let mut out: Vec<(String, &mut EmbeddingMatrix)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("block{i}.q.a"), &mut b.q.a));
            out.push((format!("block{i}.q.b"), &mut b.q.b));
            out.push((format!("block{i}.v.a"), &mut b.v.a));
            out.push((format!("block{i}.v.b"), &mut b.v.b));
        }
        out.push(("head.a".to_string(), &mut self.head.a));
        out.push(("head.b".to_string(), &mut self.head.b));
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("rank".into(), self.rank as u64);
        meta.insert("lora_alpha_bits".into(), self.lora_alpha.to_bits());
        meta.insert("block_count".into(), self.blocks.len() as u64);
        crate::io::save_archive_with_meta(dir, "lora", 0, &self.named_tensors(), meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (manifest, tensors) = crate::io::load_archive(dir)?;
        let rank = *manifest
            .meta
            .get("rank")
            .ok_or_else(|| IcvlError::format("missing rank"))? as usize;
        let lora_alpha = f64::from_bits(
            *manifest
                .meta
                .get("lora_alpha_bits")
                .ok_or_else(|| IcvlError::format("missing lora_alpha_bits"))?,
        );
        let block_count = *manifest
            .meta
            .get("block_count")
            .ok_or_else(|| IcvlError::format("missing block_count"))? as usize;
        let scale = lora_alpha / rank as f64;
        let fetch = |name: &str| -> Result<EmbeddingMatrix> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| IcvlError::format(format!("missing tensor {name}")))
        };
        let mut blocks = Vec::with_capacity(block_count);
        for i in 0..block_count {
            blocks.push(BlockAdapters {
                q: LoraAdapter {
                    a: fetch(&format!("block{i}.q.a"))?,
                    b: fetch(&format!("block{i}.q.b"))?,
                    scale,
                },
                v: LoraAdapter {
                    a: fetch(&format!("block{i}.v.a"))?,
                    b: fetch(&format!("block{i}.v.b"))?,
                    scale,
                },
            });
        }
        Ok(DecoderAdapters {
            blocks,
            head: LoraAdapter {
                a: fetch("head.a")?,
                b: fetch("head.b")?,
                scale,
            },
            rank,
            lora_alpha,
        })
    }
}

/// Sum over positions of `-log softmax(row_t)[target_t]` (a sum, not a mean).
pub fn nll_loss(logit_rows: &EmbeddingMatrix, targets: &[usize]) -> Result<f64> {
    if targets.len() != logit_rows.rows() {
        return Err(IcvlError::data(format!(
            "{} targets for {} logit rows",
            targets.len(),
            logit_rows.rows()
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        if t >= logit_rows.dims() {
            return Err(IcvlError::data(format!(
                "target {t} out of range for {} classes",
                logit_rows.dims()
            )));
        }
        total += crate::matrix::row_nll(logit_rows.row(r), t);
    }
    Ok(total)
}

struct BlockVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
}

struct DecoderVars {
    token_table: Var,
    blocks: Vec<BlockVars>,
    head: Var,
}

fn register_decoder(tape: &mut Tape, params: &DecoderParams, trainable: bool) -> DecoderVars {
    let mut reg = |m: &EmbeddingMatrix| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    DecoderVars {
        token_table: reg(&params.token_table),
        blocks: params
            .blocks
            .iter()
            .map(|b| BlockVars {
                wq: reg(&b.wq),
                wk: reg(&b.wk),
                wv: reg(&b.wv),
                wo: reg(&b.wo),
                ffn_w1: reg(&b.ffn_w1),
                ffn_b1: reg(&b.ffn_b1),
                ffn_w2: reg(&b.ffn_w2),
                ffn_b2: reg(&b.ffn_b2),
            })
            .collect(),
        head: reg(&params.head),
    }
}

struct AdapterPairVars {
    a: Var,
    b: Var,
    scale: f64,
}

struct AdapterVars {
    blocks: Vec<(AdapterPairVars, AdapterPairVars)>,
    head: AdapterPairVars,
}

fn register_adapters(tape: &mut Tape, adapters: &DecoderAdapters, trainable: bool) -> AdapterVars {
    let mut reg = |adapter: &LoraAdapter| {
        let a = if trainable {
            tape.param(adapter.a.clone())
        } else {
            tape.constant(adapter.a.clone())
        };
        let b = if trainable {
            tape.param(adapter.b.clone())
        } else {
            tape.constant(adapter.b.clone())
        };
        AdapterPairVars {
            a,
            b,
            scale: adapter.scale,
        }
    };
    AdapterVars {
        blocks: adapters.blocks.iter().map(|b| (reg(&b.q), reg(&b.v))).collect(),
        head: reg(&adapters.head),
    }
}

/// `x * W^T` with an optional low-rank additive path.
fn adapted_linear_nt(
    tape: &mut Tape,
    x: Var,
    base: Var,
    adapter: Option<&AdapterPairVars>,
) -> Result<Var> {
    let base_out = tape.matmul_nt(x, base)?;
    let Some(ad) = adapter else {
        return Ok(base_out);
    };
    let xa = tape.matmul_nt(x, ad.a)?;
    let xab = tape.matmul_nt(xa, ad.b)?;
    let scaled = tape.scale(xab, ad.scale);
    tape.add(base_out, scaled)
}

/// Causal decoder stack over already-embedded input rows; returns logits.
fn build_logits(
    tape: &mut Tape,
    input_rows: Var,
    vars: &DecoderVars,
    adapters: Option<&AdapterVars>,
    config: &DecoderConfig,
) -> Result<Var> {
    let d = config.d_l;
    let rows = tape.value(input_rows).rows();
    if tape.value(input_rows).dims() != d {
        return Err(IcvlError::shape(
            "decoder input",
            tape.value(input_rows).shape(),
            (rows, d),
        ));
    }
    // Fixed sinusoidal positions over the whole sequence: the toy decoder has
    // no learned positions, and sequence order matters for generation.
    let pe_dims = d.div_ceil(4) * 4;
    let pe_full = positional_encoding_2d(rows, 1, pe_dims)?;
    let mut pe = EmbeddingMatrix::zeros(rows, d);
    for r in 0..rows {
        pe.row_mut(r).copy_from_slice(&pe_full.row(r)[..d]);
    }
    let pe_var = tape.constant(pe);
    let mut x = tape.add(input_rows, pe_var)?;

    for (i, block) in vars.blocks.iter().enumerate() {
        let (q_ad, v_ad) = match adapters {
            Some(a) => (Some(&a.blocks[i].0), Some(&a.blocks[i].1)),
            None => (None, None),
        };
        let q = adapted_linear_nt(tape, x, block.wq, q_ad)?;
        let k = tape.matmul_nt(x, block.wk)?;
        let v = adapted_linear_nt(tape, x, block.wv, v_ad)?;
        let scores = tape.matmul_nt(q, k)?;
        let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
        let attn = tape.causal_softmax_rows(scaled)?;
        let ctx = tape.matmul(attn, v)?;
        let out = tape.matmul_nt(ctx, block.wo)?;
        x = tape.add(x, out)?;

        let f = tape.matmul_nt(x, block.ffn_w1)?;
        let f = tape.add_bias_row(f, block.ffn_b1)?;
        let f = tape.relu(f);
        let f = tape.matmul_nt(f, block.ffn_w2)?;
        let f = tape.add_bias_row(f, block.ffn_b2)?;
        x = tape.add(x, f)?;
    }
    adapted_linear_nt(tape, x, vars.head, adapters.map(|a| &a.head))
}

/// Where a training or inference prefix comes from.
#[derive(Debug, Clone)]
pub enum PrefixSource {
    /// A precomputed `rows x d_l` matrix.
    Fixed(EmbeddingMatrix),
    /// Rebuilt through the fusion module every step, so fusion parameters
    /// receive gradients: intention embeddings (`seq x d_l`), raw
    /// post-positional visual rows (`T x d_v`), and the fusion mode.
    Fused {
        intention: EmbeddingMatrix,
        raw_visual: EmbeddingMatrix,
        mode: FusionMode,
    },
}

/// One training example: optional in-context tokens, the prefix, and the
/// target token stream the loss is computed over.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub context_tokens: Vec<usize>,
    pub prefix: PrefixSource,
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-5,
            epochs: 8,
            optimizer: OptimizerKind::Adam,
            seed: 7,
        }
    }
}

fn build_prefix_on_tape(
    tape: &mut Tape,
    sample_prefix: &PrefixSource,
    context_tokens: &[usize],
    icaf_vars: &IcafVars,
    head_count: usize,
    token_table: Var,
) -> Result<Var> {
    let body = match sample_prefix {
        PrefixSource::Fixed(m) => tape.constant(m.clone()),
        PrefixSource::Fused {
            intention,
            raw_visual,
            mode,
        } => {
            let raw = tape.constant(raw_visual.clone());
            let visual = project_visual_on_tape(tape, raw, icaf_vars)?;
            match mode {
                FusionMode::None => visual,
                FusionMode::Icaf => {
                    let i = tape.constant(intention.clone());
                    cross_attention_on_tape(tape, i, visual, icaf_vars, head_count)?.0
                }
                FusionMode::VisualQuery => {
                    let i = tape.constant(intention.clone());
                    cross_attention_on_tape(tape, visual, i, icaf_vars, head_count)?.0
                }
                FusionMode::Concat => {
                    let i = tape.constant(intention.clone());
                    tape.concat_rows(i, visual)?
                }
            }
        }
    };
    if context_tokens.is_empty() {
        Ok(body)
    } else {
        let ctx = tape.gather_rows(token_table, context_tokens)?;
        tape.concat_rows(ctx, body)
    }
}

/// Materialize the prefix rows for inference (identical construction to the
/// training path, run with frozen parameters).
pub fn build_prefix(
    sample_prefix: &PrefixSource,
    context_tokens: &[usize],
    icaf: &IcafParams,
    params: &DecoderParams,
) -> Result<EmbeddingMatrix> {
    let mut tape = Tape::new();
    let vars = register_decoder(&mut tape, params, false);
    let frozen = IcafParams {
        trainable: crate::icaf::IcafTrainable {
            proj: false,
            wq: false,
            wk: false,
            wv: false,
        },
        ..icaf.clone()
    };
    let icaf_vars = IcafVars::register(&mut tape, &frozen);
    let prefix = build_prefix_on_tape(
        &mut tape,
        sample_prefix,
        context_tokens,
        &icaf_vars,
        icaf.head_count,
        vars.token_table,
    )?;
    Ok(tape.value(prefix).clone())
}

fn validate_dataset(
    dataset: &[TrainSample],
    params: &DecoderParams,
    icaf: &IcafParams,
) -> Result<()> {
    if dataset.is_empty() {
        return Err(IcvlError::data("empty training dataset"));
    }
    let d_l = params.config.d_l;
    for (i, sample) in dataset.iter().enumerate() {
        if sample.targets.is_empty() {
            return Err(IcvlError::data(format!("sample {i} has no targets")));
        }
        if let Some(&t) = sample
            .targets
            .iter()
            .chain(&sample.context_tokens)
            .find(|&&t| t >= params.vocab.size())
        {
            return Err(IcvlError::data(format!(
                "sample {i}: token {t} outside vocabulary of {}",
                params.vocab.size()
            )));
        }
        match &sample.prefix {
            PrefixSource::Fixed(m) => {
                if m.dims() != d_l || m.rows() == 0 {
                    return Err(IcvlError::data(format!(
                        "sample {i}: fixed prefix is {}x{}, expected rows x {d_l}",
                        m.rows(),
                        m.dims()
                    )));
                }
            }
            PrefixSource::Fused {
                intention,
                raw_visual,
                ..
            } => {
                if intention.dims() != d_l {
                    return Err(IcvlError::data(format!(
                        "sample {i}: intention dims {} != d_l {d_l}",
                        intention.dims()
                    )));
                }
                if raw_visual.dims() != icaf.d_v() {
                    return Err(IcvlError::data(format!(
                        "sample {i}: raw visual dims {} != d_v {}",
                        raw_visual.dims(),
                        icaf.d_v()
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Joint fine-tuning: only the adapter factors and the trainable fusion
/// tensors move; the base decoder stays frozen. Returns the per-epoch mean
/// sample loss (each sample's loss is the token-sum NLL).
pub fn train(
    dataset: &[TrainSample],
    params: &DecoderParams,
    adapters: &mut DecoderAdapters,
    icaf: &mut IcafParams,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if !(cfg.lr > 0.0) {
        return Err(IcvlError::config(format!(
            "learning rate must be positive, got {}",
            cfg.lr
        )));
    }
    validate_dataset(dataset, params, icaf)?;

    let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e37));
        for i in (1..order.len()).rev() {
            let j = (rng.random::<u64>() % (i as u64 + 1)) as usize;
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for &idx in &order {
            let sample = &dataset[idx];
            let mut tape = Tape::new();
            let dec_vars = register_decoder(&mut tape, params, false);
            let adapter_vars = register_adapters(&mut tape, adapters, true);
            let icaf_vars = IcafVars::register(&mut tape, icaf);

            let prefix = build_prefix_on_tape(
                &mut tape,
                &sample.prefix,
                &sample.context_tokens,
                &icaf_vars,
                icaf.head_count,
                dec_vars.token_table,
            )?;
            let prefix_len = tape.value(prefix).rows();
            let m = sample.targets.len();
            let input = if m > 1 {
                let teacher = tape.gather_rows(dec_vars.token_table, &sample.targets[..m - 1])?;
                tape.concat_rows(prefix, teacher)?
            } else {
                prefix
            };
            let logits = build_logits(
                &mut tape,
                input,
                &dec_vars,
                Some(&adapter_vars),
                &params.config,
            )?;
            let predicted = tape.slice_rows(logits, prefix_len - 1, m)?;
            let loss = tape.nll_sum(predicted, &sample.targets)?;
            epoch_loss += tape.scalar_value(loss);

            let grads = tape.backward(loss)?;
            optimizer.begin_step();

            let mut adapter_var_list: Vec<(String, Var)> = Vec::new();
            for (i, (q, v)) in adapter_vars.blocks.iter().enumerate() {
                adapter_var_list.push((format!("block{i}.q.a"), q.a));
                adapter_var_list.push((format!("block{i}.q.b"), q.b));
                adapter_var_list.push((format!("block{i}.v.a"), v.a));
                adapter_var_list.push((format!("block{i}.v.b"), v.b));
            }
            adapter_var_list.push(("head.a".to_string(), adapter_vars.head.a));
            adapter_var_list.push(("head.b".to_string(), adapter_vars.head.b));
            let adapter_map: BTreeMap<String, Var> = adapter_var_list.into_iter().collect();
            for (name, tensor) in adapters.named_tensors_mut() {
                if let Some(grad) = grads.wrt(adapter_map[&name]) {
                    optimizer.update(&format!("adapter.{name}"), tensor, grad);
                }
            }
            let icaf_map: BTreeMap<String, Var> = icaf_vars.named().into_iter().collect();
            for (name, tensor) in icaf.named_tensors_mut() {
                if let Some(grad) = grads.wrt(icaf_map[&name]) {
                    optimizer.update(&format!("icaf.{name}"), tensor, grad);
                }
            }
        }
        curve.push(epoch_loss / dataset.len() as f64);
    }
    Ok(curve)
}

/// Full logits over `prefix ++ embed(tokens)` with frozen parameters.
/// Zero adapters are skipped, which keeps the un-trained path bitwise equal
/// to the base decoder.
pub fn forward_logits(
    params: &DecoderParams,
    adapters: Option<&DecoderAdapters>,
    prefix: &EmbeddingMatrix,
    tokens: &[usize],
) -> Result<EmbeddingMatrix> {
    if prefix.rows() == 0 {
        return Err(IcvlError::data("decoder needs at least one prefix row"));
    }
    let mut tape = Tape::new();
    let vars = register_decoder(&mut tape, params, false);
    let adapters = adapters.filter(|a| {
        !(a.head.is_zero() && a.blocks.iter().all(|b| b.q.is_zero() && b.v.is_zero()))
    });
    let adapter_vars = adapters.map(|a| register_adapters(&mut tape, a, false));
    let p = tape.constant(prefix.clone());
    let input = if tokens.is_empty() {
        p
    } else {
        let t = tape.gather_rows(vars.token_table, tokens)?;
        tape.concat_rows(p, t)?
    };
    let logits = build_logits(&mut tape, input, &vars, adapter_vars.as_ref(), &params.config)?;
    Ok(tape.value(logits).clone())
}

/// Mean per-token NLL of teacher-forced targets over a dataset; the
/// memorization fixtures gate on this.
pub fn mean_token_nll(
    dataset: &[TrainSample],
    params: &DecoderParams,
    adapters: &DecoderAdapters,
    icaf: &IcafParams,
) -> Result<f64> {
    let mut total = 0.0;
    let mut tokens = 0usize;
    for sample in dataset {
        let prefix = build_prefix(&sample.prefix, &sample.context_tokens, icaf, params)?;
        let m = sample.targets.len();
        let logits = forward_logits(params, Some(adapters), &prefix, &sample.targets[..m - 1])?;
        let predicted = logits.slice_rows(prefix.rows() - 1, m)?;
        total += nll_loss(&predicted, &sample.targets)?;
        tokens += m;
    }
    Ok(total / tokens as f64)
}

fn masked_argmax(row: &[f64], allowed: std::ops::Range<usize>) -> usize {
    let mut best = allowed.start;
    for i in allowed {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

fn sample_masked(
    row: &[f64],
    allowed: std::ops::Range<usize>,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> usize {
    let slice: Vec<f64> = allowed.clone().map(|i| row[i] / temperature).collect();
    let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = slice.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (offset, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return allowed.start + offset;
        }
    }
    allowed.end - 1
}

/// Sample `k` rollouts of `z` actions (2z tokens) from the prefix.
///
/// Verb/noun alternation is enforced by position-parity masking: even
/// generation steps may only emit verb tokens, odd steps only noun tokens;
/// the separator is never generated. Temperature 0 is greedy (ties to the
/// lowest index) and makes all `k` rollouts identical, so the rollout is
/// computed once and replicated. Each candidate `c` uses seed `seed + c`.
pub fn generate(
    prefix: &EmbeddingMatrix,
    params: &DecoderParams,
    adapters: &DecoderAdapters,
    k: usize,
    z: usize,
    temperature: f64,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if temperature < 0.0 {
        return Err(IcvlError::config(format!(
            "temperature must be >= 0, got {temperature}"
        )));
    }
    if k == 0 || z == 0 {
        return Err(IcvlError::data("k and z must be at least 1"));
    }
    let verb_range = 0..params.vocab.verb_count;
    let noun_range = params.vocab.verb_count..params.vocab.verb_count + params.vocab.noun_count;

    let mut rollout = |candidate: u64| -> Result<Vec<usize>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(candidate));
        let mut tokens: Vec<usize> = Vec::with_capacity(2 * z);
        for step in 0..2 * z {
            let logits = forward_logits(params, Some(adapters), prefix, &tokens)?;
            let last = logits.row(logits.rows() - 1);
            let allowed = if step % 2 == 0 {
                verb_range.clone()
            } else {
                noun_range.clone()
            };
            let tok = if temperature == 0.0 {
                masked_argmax(last, allowed)
            } else {
                sample_masked(last, allowed, temperature, &mut rng)
            };
            tokens.push(tok);
        }
        Ok(tokens)
    };

    if temperature == 0.0 {
        let greedy = rollout(0)?;
        return Ok(vec![greedy; k]);
    }
    (0..k as u64).map(&mut rollout).collect()
}

/// Decode generated token streams into action sequences.
pub fn decode_candidates(
    candidates: &[Vec<usize>],
    vocab: &TokenVocab,
) -> Result<Vec<Vec<ActionLabel>>> {
    candidates.iter().map(|c| vocab.decode_tokens(c)).collect()
}

/// Write a training curve as `epoch,mean_loss` CSV.
pub fn write_loss_curve_csv(path: impl AsRef<Path>, curve: &[f64]) -> Result<()> {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, loss) in curve.iter().enumerate() {
        out.push_str(&format!("{i},{loss}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}
