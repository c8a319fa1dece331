//! Toy-scale action recognition: a small Transformer encoder over per-segment
//! embeddings with two MLP heads that decode the verb and the noun.
//!
//! The reference training path is plain gradient descent (simplest thing the
//! gradient checks can vouch for); Adam is available through
//! [`train_step_with`] for parity with the end-to-end decoder training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IcvlError, Result};
use crate::matrix::{positional_encoding_2d, EmbeddingMatrix};
use crate::optim::Optimizer;

/// Reserved text for the out-of-vocabulary sentinel appended to each list.
pub const OOV_LABEL: &str = "<oov>";

/// A verb/noun pair identifying one action.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ActionLabel {
    #[serde(rename = "v")]
    pub verb_id: usize,
    #[serde(rename = "n")]
    pub noun_id: usize,
}

impl ActionLabel {
    pub fn new(verb_id: usize, noun_id: usize) -> Self {
        ActionLabel { verb_id, noun_id }
    }
}

/// Ordered verb and noun lists. The last index of each list is the reserved
/// out-of-vocabulary id; it maps to no real label and never matches gold.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    verbs: Vec<String>,
    nouns: Vec<String>,
}

fn validate_labels(kind: &str, labels: &[String]) -> Result<()> {
    if labels.is_empty() {
        return Err(IcvlError::data(format!("empty {kind} list")));
    }
    let mut seen = std::collections::BTreeSet::new();
    for l in labels {
        if l.is_empty() || l.chars().any(|c| c.is_whitespace() || c == ',') {
            return Err(IcvlError::data(format!(
                "{kind} label '{l}' must be a single comma-free token"
            )));
        }
        if !seen.insert(l.to_lowercase()) {
            return Err(IcvlError::data(format!("duplicate {kind} label '{l}'")));
        }
    }
    Ok(())
}

impl Vocabulary {
    /// Build from real labels; the OOV sentinel is appended to each list.
    pub fn new(mut verbs: Vec<String>, mut nouns: Vec<String>) -> Result<Self> {
        validate_labels("verb", &verbs)?;
        validate_labels("noun", &nouns)?;
        verbs.push(OOV_LABEL.to_string());
        nouns.push(OOV_LABEL.to_string());
        Ok(Vocabulary { verbs, nouns })
    }

    /// Total verb count, including the OOV sentinel.
    pub fn verb_count(&self) -> usize {
        self.verbs.len()
    }

    pub fn noun_count(&self) -> usize {
        self.nouns.len()
    }

    pub fn oov_verb_id(&self) -> usize {
        self.verbs.len() - 1
    }

    pub fn oov_noun_id(&self) -> usize {
        self.nouns.len() - 1
    }

    pub fn oov_action(&self) -> ActionLabel {
        ActionLabel::new(self.oov_verb_id(), self.oov_noun_id())
    }

    /// Case-insensitive lookup over the real (non-OOV) verbs.
    pub fn lookup_verb(&self, token: &str) -> Option<usize> {
        let t = token.trim().to_lowercase();
        self.verbs[..self.oov_verb_id()]
            .iter()
            .position(|v| v.to_lowercase() == t)
    }

    pub fn lookup_noun(&self, token: &str) -> Option<usize> {
        let t = token.trim().to_lowercase();
        self.nouns[..self.oov_noun_id()]
            .iter()
            .position(|n| n.to_lowercase() == t)
    }

    pub fn verb_name(&self, id: usize) -> Result<&str> {
        self.verbs
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| IcvlError::data(format!("verb id {id} out of range")))
    }

    pub fn noun_name(&self, id: usize) -> Result<&str> {
        self.nouns
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| IcvlError::data(format!("noun id {id} out of range")))
    }

    pub fn contains(&self, label: ActionLabel) -> bool {
        label.verb_id < self.verb_count() && label.noun_id < self.noun_count()
    }

    /// Render as "verb noun"; errors on out-of-range ids.
    pub fn label_text(&self, label: ActionLabel) -> Result<String> {
        Ok(format!(
            "{} {}",
            self.verb_name(label.verb_id)?,
            self.noun_name(label.noun_id)?
        ))
    }

    /// Write `verbs.txt` and `nouns.txt` (real labels only, one per line).
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        std::fs::write(
            dir.join("verbs.txt"),
            self.verbs[..self.oov_verb_id()].join("\n") + "\n",
        )?;
        std::fs::write(
            dir.join("nouns.txt"),
            self.nouns[..self.oov_noun_id()].join("\n") + "\n",
        )?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<Vec<String>> {
            Ok(std::fs::read_to_string(dir.join(name))?
                .lines()
                .map(|l| l.to_string())
                .filter(|l| !l.is_empty())
                .collect())
        };
        Vocabulary::new(read("verbs.txt")?, read("nouns.txt")?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecognizerConfig {
    pub d_v: usize,
    pub head_count: usize,
    pub layers: usize,
    pub ffn_mult: usize,
    pub head_hidden: usize,
    pub use_positional: bool,
}

impl Default for RecognizerConfig {
    fn default() -> Self {
        RecognizerConfig {
            d_v: 32,
            head_count: 8,
            layers: 2,
            ffn_mult: 4,
            head_hidden: 64,
            use_positional: true,
        }
    }
}

/// Documented default learning rate for the plain-GD reference path.
pub const DEFAULT_LR: f64 = 0.05;

#[derive(Debug, Clone)]
struct EncoderLayer {
    wq: EmbeddingMatrix,
    wk: EmbeddingMatrix,
    wv: EmbeddingMatrix,
    wo: EmbeddingMatrix,
    ffn_w1: EmbeddingMatrix,
    ffn_b1: EmbeddingMatrix,
    ffn_w2: EmbeddingMatrix,
    ffn_b2: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
struct MlpHead {
    w1: EmbeddingMatrix,
    b1: EmbeddingMatrix,
    w2: EmbeddingMatrix,
    b2: EmbeddingMatrix,
}

#[derive(Debug, Clone)]
pub struct RecognizerParams {
    pub config: RecognizerConfig,
    layers: Vec<EncoderLayer>,
    verb_head: MlpHead,
    noun_head: MlpHead,
    pub seed: u64,
}

fn gauss(rows: usize, dims: usize, seed: &mut u64) -> EmbeddingMatrix {
    *seed += 1;
    EmbeddingMatrix::seeded_gaussian(rows, dims, 1.0 / (rows as f64).sqrt(), *seed)
}

impl RecognizerParams {
    pub fn seeded(
        config: RecognizerConfig,
        verb_count: usize,
        noun_count: usize,
        seed: u64,
    ) -> Result<Self> {
        if config.d_v == 0 || config.head_count == 0 || config.d_v % config.head_count != 0 {
            return Err(IcvlError::config(format!(
                "d_v {} must be a positive multiple of head count {}",
                config.d_v, config.head_count
            )));
        }
        let d = config.d_v;
        let f = config.ffn_mult * d;
        let mut s = seed;
        let layers = (0..config.layers)
            .map(|_| EncoderLayer {
                wq: gauss(d, d, &mut s),
                wk: gauss(d, d, &mut s),
                wv: gauss(d, d, &mut s),
                wo: gauss(d, d, &mut s),
                ffn_w1: gauss(d, f, &mut s),
                ffn_b1: EmbeddingMatrix::zeros(1, f),
                ffn_w2: gauss(f, d, &mut s),
                ffn_b2: EmbeddingMatrix::zeros(1, d),
            })
            .collect();
        let mut head = |out: usize| MlpHead {
            w1: gauss(d, config.head_hidden, &mut s),
            b1: EmbeddingMatrix::zeros(1, config.head_hidden),
            w2: gauss(config.head_hidden, out, &mut s),
            b2: EmbeddingMatrix::zeros(1, out),
        };
        let verb_head = head(verb_count);
        let noun_head = head(noun_count);
        Ok(RecognizerParams {
            config,
            layers,
            verb_head,
            noun_head,
            seed,
        })
    }

    pub fn verb_count(&self) -> usize {
        self.verb_head.w2.dims()
    }

    pub fn noun_count(&self) -> usize {
        self.noun_head.w2.dims()
    }

    pub fn named_tensors(&self) -> Vec<(String, &EmbeddingMatrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.wq"), &l.wq));
            out.push((format!("layer{i}.wk"), &l.wk));
            out.push((format!("layer{i}.wv"), &l.wv));
            out.push((format!("layer{i}.wo"), &l.wo));
            out.push((format!("layer{i}.ffn_w1"), &l.ffn_w1));
            out.push((format!("layer{i}.ffn_b1"), &l.ffn_b1));
            out.push((format!("layer{i}.ffn_w2"), &l.ffn_w2));
            out.push((format!("layer{i}.ffn_b2"), &l.ffn_b2));
        }
        for (prefix, h) in [("verb_head", &self.verb_head), ("noun_head", &self.noun_head)] {
            out.push((format!("{prefix}.w1"), &h.w1));
            out.push((format!("{prefix}.b1"), &h.b1));
            out.push((format!("{prefix}.w2"), &h.w2));
            out.push((format!("{prefix}.b2"), &h.b2));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut EmbeddingMatrix)> {
        let mut out: Vec<(String, &mut EmbeddingMatrix)> = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.wq"), &mut l.wq));
            out.push((format!("layer{i}.wk"), &mut l.wk));
            out.push((format!("layer{i}.wv"), &mut l.wv));
            out.push((format!("layer{i}.wo"), &mut l.wo));
            out.push((format!("layer{i}.ffn_w1"), &mut l.ffn_w1));
            out.push((format!("layer{i}.ffn_b1"), &mut l.ffn_b1));
            out.push((format!("layer{i}.ffn_w2"), &mut l.ffn_w2));
            out.push((format!("layer{i}.ffn_b2"), &mut l.ffn_b2));
        }
        for (prefix, h) in [
            ("verb_head", &mut self.verb_head),
            ("noun_head", &mut self.noun_head),
        ] {
            out.push((format!("{prefix}.w1"), &mut h.w1));
            out.push((format!("{prefix}.b1"), &mut h.b1));
            out.push((format!("{prefix}.w2"), &mut h.w2));
            out.push((format!("{prefix}.b2"), &mut h.b2));
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let mut meta = BTreeMap::new();
        meta.insert("d_v".into(), self.config.d_v as u64);
        meta.insert("head_count".into(), self.config.head_count as u64);
        meta.insert("layers".into(), self.config.layers as u64);
        meta.insert("ffn_mult".into(), self.config.ffn_mult as u64);
        meta.insert("head_hidden".into(), self.config.head_hidden as u64);
        meta.insert("use_positional".into(), self.config.use_positional as u64);
        meta.insert("verb_count".into(), self.verb_count() as u64);
        meta.insert("noun_count".into(), self.noun_count() as u64);
        crate::io::save_archive_with_meta(dir, "recognizer", self.seed, &self.named_tensors(), meta)
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
        let config = RecognizerConfig {
            d_v: get("d_v")?,
            head_count: get("head_count")?,
            layers: get("layers")?,
            ffn_mult: get("ffn_mult")?,
            head_hidden: get("head_hidden")?,
            use_positional: get("use_positional")? != 0,
        };
        let mut params = RecognizerParams::seeded(
            config,
            get("verb_count")?,
            get("noun_count")?,
            manifest.seed,
        )?;
        for (name, slot) in params.named_tensors_mut() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| IcvlError::format(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(IcvlError::shape("checkpoint tensor", slot.shape(), t.shape()));
            }
            *slot = t.clone();
        }
        Ok(params)
    }
}

struct LayerVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    ffn_w1: Var,
    ffn_b1: Var,
    ffn_w2: Var,
    ffn_b2: Var,
}

struct HeadVars {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

struct RecognizerVars {
    layers: Vec<LayerVars>,
    verb: HeadVars,
    noun: HeadVars,
}

fn register(tape: &mut Tape, params: &RecognizerParams, trainable: bool) -> RecognizerVars {
    let mut reg = |m: &EmbeddingMatrix| {
        if trainable {
            tape.param(m.clone())
        } else {
            tape.constant(m.clone())
        }
    };
    RecognizerVars {
        layers: params
            .layers
            .iter()
            .map(|l| LayerVars {
                wq: reg(&l.wq),
                wk: reg(&l.wk),
                wv: reg(&l.wv),
                wo: reg(&l.wo),
                ffn_w1: reg(&l.ffn_w1),
                ffn_b1: reg(&l.ffn_b1),
                ffn_w2: reg(&l.ffn_w2),
                ffn_b2: reg(&l.ffn_b2),
            })
            .collect(),
        verb: HeadVars {
            w1: reg(&params.verb_head.w1),
            b1: reg(&params.verb_head.b1),
            w2: reg(&params.verb_head.w2),
            b2: reg(&params.verb_head.b2),
        },
        noun: HeadVars {
            w1: reg(&params.noun_head.w1),
            b1: reg(&params.noun_head.b1),
            w2: reg(&params.noun_head.w2),
            b2: reg(&params.noun_head.b2),
        },
    }
}

fn mlp(tape: &mut Tape, x: Var, h: &HeadVars) -> Result<Var> {
    let a = tape.matmul(x, h.w1)?;
    let a = tape.add_bias_row(a, h.b1)?;
    let a = tape.relu(a);
    let b = tape.matmul(a, h.w2)?;
    tape.add_bias_row(b, h.b2)
}

/// Self-attention encoder plus the two classification heads.
fn forward(
    tape: &mut Tape,
    input: Var,
    vars: &RecognizerVars,
    config: &RecognizerConfig,
) -> Result<(Var, Var)> {
    let d_head = config.d_v / config.head_count;
    let mut x = input;
    for layer in &vars.layers {
        let q = tape.matmul(x, layer.wq)?;
        let k = tape.matmul(x, layer.wk)?;
        let v = tape.matmul(x, layer.wv)?;
        let mut heads = Vec::with_capacity(config.head_count);
        for h in 0..config.head_count {
            let qh = tape.slice_cols(q, h * d_head, d_head)?;
            let kh = tape.slice_cols(k, h * d_head, d_head)?;
            let vh = tape.slice_cols(v, h * d_head, d_head)?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
            let attn = tape.softmax_rows(scaled);
            heads.push(tape.matmul(attn, vh)?);
        }
        let merged = tape.concat_cols(&heads)?;
        let projected = tape.matmul(merged, layer.wo)?;
        x = tape.add(x, projected)?;

        let f = tape.matmul(x, layer.ffn_w1)?;
        let f = tape.add_bias_row(f, layer.ffn_b1)?;
        let f = tape.relu(f);
        let f = tape.matmul(f, layer.ffn_w2)?;
        let f = tape.add_bias_row(f, layer.ffn_b2)?;
        x = tape.add(x, f)?;
    }
    Ok((mlp(tape, x, &vars.verb)?, mlp(tape, x, &vars.noun)?))
}

fn with_positions(segments: &EmbeddingMatrix, config: &RecognizerConfig) -> Result<EmbeddingMatrix> {
    if !config.use_positional {
        return Ok(segments.clone());
    }
    let d = segments.dims();
    let pe_dims = d.div_ceil(4) * 4;
    let pe = positional_encoding_2d(segments.rows(), 1, pe_dims)?;
    let mut out = segments.clone();
    for r in 0..out.rows() {
        let pe_row = pe.row(r);
        for (o, p) in out.row_mut(r).iter_mut().zip(&pe_row[..d]) {
            *o += p;
        }
    }
    Ok(out)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// One label per segment row: argmax verb, argmax noun, ties to lowest index.
pub fn recognize(
    segment_embeddings: &EmbeddingMatrix,
    params: &RecognizerParams,
    vocab: &Vocabulary,
) -> Result<Vec<ActionLabel>> {
    if segment_embeddings.rows() == 0 {
        return Err(IcvlError::data("recognize needs at least one segment"));
    }
    if segment_embeddings.dims() != params.config.d_v {
        return Err(IcvlError::shape(
            "recognize input",
            segment_embeddings.shape(),
            (segment_embeddings.rows(), params.config.d_v),
        ));
    }
    if params.verb_count() != vocab.verb_count() || params.noun_count() != vocab.noun_count() {
        return Err(IcvlError::config(
            "recognizer head sizes do not match vocabulary",
        ));
    }
    let mut tape = Tape::new();
    let x = tape.constant(with_positions(segment_embeddings, &params.config)?);
    let vars = register(&mut tape, params, false);
    let (verb_logits, noun_logits) = forward(&mut tape, x, &vars, &params.config)?;
    let (vl, nl) = (tape.value(verb_logits), tape.value(noun_logits));
    Ok((0..segment_embeddings.rows())
        .map(|r| ActionLabel::new(argmax(vl.row(r)), argmax(nl.row(r))))
        .collect())
}

fn batch_loss(
    tape: &mut Tape,
    segments: &EmbeddingMatrix,
    gold: &[ActionLabel],
    params: &RecognizerParams,
    trainable: bool,
) -> Result<(Var, RecognizerVars)> {
    if gold.len() != segments.rows() {
        return Err(IcvlError::data(format!(
            "{} labels for {} segments",
            gold.len(),
            segments.rows()
        )));
    }
    for a in gold {
        if a.verb_id >= params.verb_count() || a.noun_id >= params.noun_count() {
            return Err(IcvlError::data(format!(
                "label ({}, {}) outside vocabulary",
                a.verb_id, a.noun_id
            )));
        }
    }
    let x = tape.constant(with_positions(segments, &params.config)?);
    let vars = register(tape, params, trainable);
    let (verb_logits, noun_logits) = forward(tape, x, &vars, &params.config)?;
    let verb_targets: Vec<usize> = gold.iter().map(|a| a.verb_id).collect();
    let noun_targets: Vec<usize> = gold.iter().map(|a| a.noun_id).collect();
    let lv = tape.cross_entropy_mean(verb_logits, &verb_targets)?;
    let ln = tape.cross_entropy_mean(noun_logits, &noun_targets)?;
    let loss = tape.add(lv, ln)?;
    Ok((loss, vars))
}

/// Sum of verb and noun cross-entropy on the batch, without updating anything.
pub fn batch_loss_value(
    segments: &EmbeddingMatrix,
    gold: &[ActionLabel],
    params: &RecognizerParams,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, _) = batch_loss(&mut tape, segments, gold, params, false)?;
    Ok(tape.scalar_value(loss))
}

/// One full-batch training step with the given optimizer; returns the
/// pre-update loss.
pub fn train_step_with(
    segments: &EmbeddingMatrix,
    gold: &[ActionLabel],
    params: &mut RecognizerParams,
    optimizer: &mut Optimizer,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (loss, vars) = batch_loss(&mut tape, segments, gold, params, true)?;
    let loss_value = tape.scalar_value(loss);
    let grads = tape.backward(loss)?;

    let mut var_list: Vec<(String, Var)> = Vec::new();
    for (i, l) in vars.layers.iter().enumerate() {
        var_list.push((format!("layer{i}.wq"), l.wq));
        var_list.push((format!("layer{i}.wk"), l.wk));
        var_list.push((format!("layer{i}.wv"), l.wv));
        var_list.push((format!("layer{i}.wo"), l.wo));
        var_list.push((format!("layer{i}.ffn_w1"), l.ffn_w1));
        var_list.push((format!("layer{i}.ffn_b1"), l.ffn_b1));
        var_list.push((format!("layer{i}.ffn_w2"), l.ffn_w2));
        var_list.push((format!("layer{i}.ffn_b2"), l.ffn_b2));
    }
    for (prefix, h) in [("verb_head", &vars.verb), ("noun_head", &vars.noun)] {
        var_list.push((format!("{prefix}.w1"), h.w1));
        var_list.push((format!("{prefix}.b1"), h.b1));
        var_list.push((format!("{prefix}.w2"), h.w2));
        var_list.push((format!("{prefix}.b2"), h.b2));
    }
    let by_name: BTreeMap<String, Var> = var_list.into_iter().collect();

    optimizer.begin_step();
    for (name, tensor) in params.named_tensors_mut() {
        if let Some(grad) = grads.wrt(by_name[&name]) {
            optimizer.update(&name, tensor, grad);
        }
    }
    Ok(loss_value)
}

/// Plain gradient-descent training step (the reference path).
pub fn train_step(
    segments: &EmbeddingMatrix,
    gold: &[ActionLabel],
    params: &mut RecognizerParams,
    lr: f64,
) -> Result<f64> {
    if lr < 0.0 {
        return Err(IcvlError::config(format!("negative learning rate {lr}")));
    }
    train_step_with(segments, gold, params, &mut Optimizer::gd(lr))
}

/// Fraction of positions where both verb and noun match.
pub fn recognition_accuracy(preds: &[ActionLabel], gold: &[ActionLabel]) -> Result<f64> {
    if preds.len() != gold.len() {
        return Err(IcvlError::data(format!(
            "{} predictions vs {} gold labels",
            preds.len(),
            gold.len()
        )));
    }
    if preds.is_empty() {
        return Err(IcvlError::data("empty prediction list"));
    }
    let hits = preds.iter().zip(gold).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_vocab() -> Vocabulary {
        Vocabulary::new(
            vec!["take".into(), "wash".into(), "cut".into()],
            vec!["bowl".into(), "knife".into(), "plate".into()],
        )
        .unwrap()
    }

    /// Distinct embedding per label id pair, reused by the memorization tests.
    fn embedding_for(label: ActionLabel, d_v: usize) -> Vec<f64> {
        let seed = 1000 + (label.verb_id * 31 + label.noun_id) as u64;
        EmbeddingMatrix::seeded_gaussian(1, d_v, 1.0, seed).row(0).to_vec()
    }

    fn fixture(labels: &[ActionLabel], d_v: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::from_rows(
            &labels.iter().map(|l| embedding_for(*l, d_v)).collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn vocabulary_basics() {
        let v = tiny_vocab();
        assert_eq!(v.verb_count(), 4); // 3 real + OOV
        assert_eq!(v.oov_verb_id(), 3);
        assert_eq!(v.lookup_verb("Wash"), Some(1));
        assert_eq!(v.lookup_verb("<oov>"), None);
        assert_eq!(v.label_text(ActionLabel::new(0, 1)).unwrap(), "take knife");
        assert!(Vocabulary::new(vec!["two words".into()], vec!["x".into()]).is_err());
        assert!(Vocabulary::new(vec!["a".into(), "A".into()], vec!["x".into()]).is_err());
    }

    #[test]
    fn vocabulary_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let v = tiny_vocab();
        v.save(dir.path()).unwrap();
        assert_eq!(Vocabulary::load(dir.path()).unwrap(), v);
    }

    #[test]
    fn zero_weights_predict_lowest_indices() {
        let vocab = tiny_vocab();
        let config = RecognizerConfig {
            d_v: 8,
            head_count: 2,
            layers: 1,
            ffn_mult: 2,
            head_hidden: 8,
            use_positional: true,
        };
        let mut params =
            RecognizerParams::seeded(config, vocab.verb_count(), vocab.noun_count(), 1).unwrap();
        for (_, t) in params.named_tensors_mut() {
            *t = EmbeddingMatrix::zeros(t.rows(), t.dims());
        }
        let input = EmbeddingMatrix::seeded_gaussian(3, 8, 1.0, 9);
        let labels = recognize(&input, &params, &vocab).unwrap();
        assert_eq!(labels, vec![ActionLabel::new(0, 0); 3]);
    }

    #[test]
    fn single_segment_yields_single_label() {
        let vocab = tiny_vocab();
        let config = RecognizerConfig {
            d_v: 8,
            head_count: 2,
            layers: 1,
            ffn_mult: 2,
            head_hidden: 8,
            use_positional: true,
        };
        let params =
            RecognizerParams::seeded(config, vocab.verb_count(), vocab.noun_count(), 2).unwrap();
        let input = EmbeddingMatrix::seeded_gaussian(1, 8, 1.0, 3);
        assert_eq!(recognize(&input, &params, &vocab).unwrap().len(), 1);
    }

    #[test]
    fn recognize_is_deterministic() {
        let vocab = tiny_vocab();
        let params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 8,
                head_count: 2,
                layers: 2,
                ffn_mult: 2,
                head_hidden: 8,
                use_positional: true,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            5,
        )
        .unwrap();
        let input = EmbeddingMatrix::seeded_gaussian(4, 8, 1.0, 6);
        assert_eq!(
            recognize(&input, &params, &vocab).unwrap(),
            recognize(&input, &params, &vocab).unwrap()
        );
    }

    #[test]
    fn without_positions_outputs_permute_with_inputs() {
        let vocab = tiny_vocab();
        let config = RecognizerConfig {
            d_v: 8,
            head_count: 2,
            layers: 2,
            ffn_mult: 2,
            head_hidden: 8,
            use_positional: false,
        };
        let params =
            RecognizerParams::seeded(config, vocab.verb_count(), vocab.noun_count(), 7).unwrap();
        let input = EmbeddingMatrix::seeded_gaussian(5, 8, 1.0, 8);
        let base = recognize(&input, &params, &vocab).unwrap();
        let perm = [4usize, 2, 0, 3, 1];
        let permuted = EmbeddingMatrix::from_rows(
            &perm.iter().map(|&i| input.row(i).to_vec()).collect::<Vec<_>>(),
        )
        .unwrap();
        let out = recognize(&permuted, &params, &vocab).unwrap();
        let expected: Vec<ActionLabel> = perm.iter().map(|&i| base[i]).collect();
        assert_eq!(out, expected);
    }

    #[test]
    fn zero_lr_leaves_params_bitwise_unchanged() {
        let vocab = tiny_vocab();
        let mut params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 8,
                head_count: 2,
                layers: 1,
                ffn_mult: 2,
                head_hidden: 8,
                use_positional: true,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            11,
        )
        .unwrap();
        let before = params.clone();
        let gold = vec![ActionLabel::new(1, 2), ActionLabel::new(0, 0)];
        let input = fixture(&gold, 8);
        train_step(&input, &gold, &mut params, 0.0).unwrap();
        for ((_, a), (_, b)) in params.named_tensors().iter().zip(before.named_tensors()) {
            assert_eq!(*a, b);
        }
    }

    #[test]
    fn confident_heads_give_near_zero_loss() {
        let vocab = tiny_vocab();
        let mut params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 8,
                head_count: 2,
                layers: 1,
                ffn_mult: 2,
                head_hidden: 8,
                use_positional: false,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            13,
        )
        .unwrap();
        // Zero everything, then bias the gold classes by +30.
        for (_, t) in params.named_tensors_mut() {
            *t = EmbeddingMatrix::zeros(t.rows(), t.dims());
        }
        let gold = vec![ActionLabel::new(2, 1); 4];
        for (name, t) in params.named_tensors_mut() {
            if name == "verb_head.b2" {
                t.set(0, 2, 30.0);
            }
            if name == "noun_head.b2" {
                t.set(0, 1, 30.0);
            }
        }
        let input = fixture(&gold, 8);
        let loss = batch_loss_value(&input, &gold, &params).unwrap();
        assert!(loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn rejects_out_of_vocab_label() {
        let vocab = tiny_vocab();
        let mut params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 8,
                head_count: 2,
                layers: 1,
                ffn_mult: 2,
                head_hidden: 8,
                use_positional: true,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            17,
        )
        .unwrap();
        let gold = vec![ActionLabel::new(99, 0)];
        let input = EmbeddingMatrix::seeded_gaussian(1, 8, 1.0, 18);
        assert!(matches!(
            train_step(&input, &gold, &mut params, 0.1),
            Err(IcvlError::Data(_))
        ));
    }

    #[test]
    fn accuracy_cases() {
        let a = vec![ActionLabel::new(0, 1), ActionLabel::new(2, 2)];
        assert_eq!(recognition_accuracy(&a, &a).unwrap(), 1.0);

        let verbs_match: Vec<ActionLabel> =
            a.iter().map(|l| ActionLabel::new(l.verb_id, l.noun_id + 1)).collect();
        assert_eq!(recognition_accuracy(&verbs_match, &a).unwrap(), 0.0);

        // Mixed 10-item case, hand-counted: 6 exact matches.
        let gold: Vec<ActionLabel> = (0..10).map(|i| ActionLabel::new(i % 3, i % 2)).collect();
        let mut preds = gold.clone();
        preds[1] = ActionLabel::new(9, 9);
        preds[4] = ActionLabel::new(gold[4].verb_id, 9);
        preds[5] = ActionLabel::new(9, gold[5].noun_id);
        preds[8] = ActionLabel::new(9, 9);
        assert!((recognition_accuracy(&preds, &gold).unwrap() - 0.6).abs() < 1e-12);

        assert!(recognition_accuracy(&preds[..9], &gold).is_err());
    }

    #[test]
    fn memorizes_eight_segments_exactly() {
        let vocab = tiny_vocab();
        let gold: Vec<ActionLabel> = (0..8).map(|i| ActionLabel::new(i % 3, (i / 3) % 3)).collect();
        let input = fixture(&gold, 16);
        let mut params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 16,
                head_count: 4,
                layers: 2,
                ffn_mult: 2,
                head_hidden: 32,
                use_positional: true,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            23,
        )
        .unwrap();
        for _ in 0..300 {
            train_step(&input, &gold, &mut params, DEFAULT_LR).unwrap();
            if recognize(&input, &params, &vocab).unwrap() == gold {
                return;
            }
        }
        panic!("failed to memorize 8 fixture segments");
    }

    #[test]
    fn loss_descends_with_few_reversals() {
        let vocab = tiny_vocab();
        let gold: Vec<ActionLabel> = (0..32).map(|i| ActionLabel::new(i % 3, (i / 3) % 3)).collect();
        let input = fixture(&gold, 16);
        let mut params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 16,
                head_count: 4,
                layers: 2,
                ffn_mult: 2,
                head_hidden: 32,
                use_positional: true,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            29,
        )
        .unwrap();
        let losses: Vec<f64> = (0..500)
            .map(|_| train_step(&input, &gold, &mut params, DEFAULT_LR).unwrap())
            .collect();
        // Every 50-step window allows at most 5 non-monotone steps.
        for window in losses.windows(50) {
            let ups = window.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();
            assert!(ups <= 5, "{ups} reversals in a 50-step window");
        }
        assert!(losses.last().unwrap() < &losses[0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = tiny_vocab();
        let params = RecognizerParams::seeded(
            RecognizerConfig {
                d_v: 8,
                head_count: 2,
                layers: 1,
                ffn_mult: 2,
                head_hidden: 8,
                use_positional: true,
            },
            vocab.verb_count(),
            vocab.noun_count(),
            31,
        )
        .unwrap();
        params.save(dir.path()).unwrap();
        let back = RecognizerParams::load(dir.path()).unwrap();
        let input = EmbeddingMatrix::seeded_gaussian(3, 8, 1.0, 32);
        assert_eq!(
            recognize(&input, &params, &vocab).unwrap(),
            recognize(&input, &back, &vocab).unwrap()
        );
    }
}
