//! Intention-context attention fusion.
//!
//! Visual segment embeddings are concatenated, given a fixed 2D positional
//! encoding, projected into the language-model width, and then fused with
//! intention text embeddings through cross-attention: intention rows act as
//! queries, visual rows as keys and values. The ablation variants (plain
//! concatenation and attention with the visual side as the query) live here
//! too, selected through [`FusionMode`].
//!
//! The printed attention formula applies no learned projections; since the
//! module is trainable end to end, `wq`/`wk`/`wv` exist but default to the
//! identity, which makes the strict single-head configuration reduce exactly
//! to the plain formula.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{IcvlError, Result};
use crate::matrix::{positional_encoding_2d, EmbeddingMatrix};

/// How intention and visual embeddings are combined into the decoder prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Cross-attention with intention queries (the full method).
    Icaf,
    /// Row-wise concatenation of intention and visual embeddings.
    Concat,
    /// Cross-attention with visual queries.
    VisualQuery,
    /// Visual embeddings only, no intention integration.
    None,
}

impl std::str::FromStr for FusionMode {
    type Err = IcvlError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "icaf" => Ok(FusionMode::Icaf),
            "concat" => Ok(FusionMode::Concat),
            "visual_query" => Ok(FusionMode::VisualQuery),
            "none" => Ok(FusionMode::None),
            other => Err(IcvlError::config(format!(
                "unknown fusion mode '{other}' (expected icaf|concat|visual_query|none)"
            ))),
        }
    }
}

impl std::fmt::Display for FusionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FusionMode::Icaf => "icaf",
            FusionMode::Concat => "concat",
            FusionMode::VisualQuery => "visual_query",
            FusionMode::None => "none",
        };
        f.write_str(s)
    }
}

/// Which fusion tensors receive gradient updates during joint training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct IcafTrainable {
    pub proj: bool,
    pub wq: bool,
    pub wk: bool,
    pub wv: bool,
}

impl Default for IcafTrainable {
    fn default() -> Self {
        IcafTrainable {
            proj: true,
            wq: true,
            wk: true,
            wv: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IcafParams {
    /// Projection from visual width to language width, `d_v x d_l`.
    pub proj_weight: EmbeddingMatrix,
    /// `1 x d_l`.
    pub proj_bias: EmbeddingMatrix,
    pub wq: EmbeddingMatrix,
    pub wk: EmbeddingMatrix,
    pub wv: EmbeddingMatrix,
    pub head_count: usize,
    pub trainable: IcafTrainable,
    pub seed: u64,
}

impl IcafParams {
    /// Seeded initialization: projection entries scaled by `1/sqrt(d_v)`,
    /// zero bias, identity attention projections.
    pub fn seeded(d_v: usize, d_l: usize, head_count: usize, seed: u64) -> Result<Self> {
        let params = IcafParams {
            proj_weight: EmbeddingMatrix::seeded_gaussian(
                d_v,
                d_l,
                1.0 / (d_v as f64).sqrt(),
                seed,
            ),
            proj_bias: EmbeddingMatrix::zeros(1, d_l),
            wq: EmbeddingMatrix::identity(d_l),
            wk: EmbeddingMatrix::identity(d_l),
            wv: EmbeddingMatrix::identity(d_l),
            head_count,
            trainable: IcafTrainable::default(),
            seed,
        };
        params.validate()?;
        Ok(params)
    }

    /// Strict configuration matching the plain attention formula: identity
    /// projections, one head, nothing trainable. Oracle tests run against it.
    pub fn strict(d_v: usize, d_l: usize) -> Result<Self> {
        let mut p = Self::seeded(d_v, d_l, 1, 0)?;
        p.trainable = IcafTrainable {
            proj: false,
            wq: false,
            wk: false,
            wv: false,
        };
        Ok(p)
    }

    pub fn d_v(&self) -> usize {
        self.proj_weight.rows()
    }

    pub fn d_l(&self) -> usize {
        self.proj_weight.dims()
    }

    pub fn validate(&self) -> Result<()> {
        let d_l = self.d_l();
        if self.head_count == 0 || d_l % self.head_count != 0 {
            return Err(IcvlError::config(format!(
                "d_l {d_l} not divisible by head count {}",
                self.head_count
            )));
        }
        for (name, m) in self.named_tensors() {
            if !m.is_finite() {
                return Err(IcvlError::numeric(format!("non-finite tensor {name}")));
            }
        }
        for (name, m, want) in [
            ("proj_bias", &self.proj_bias, (1, d_l)),
            ("wq", &self.wq, (d_l, d_l)),
            ("wk", &self.wk, (d_l, d_l)),
            ("wv", &self.wv, (d_l, d_l)),
        ] {
            if m.shape() != want {
                return Err(IcvlError::shape(
                    "icaf tensor",
                    m.shape(),
                    want,
                ))
                .map_err(|e| IcvlError::config(format!("{name}: {e}")));
            }
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> Vec<(String, &EmbeddingMatrix)> {
        vec![
            ("proj_weight".into(), &self.proj_weight),
            ("proj_bias".into(), &self.proj_bias),
            ("wq".into(), &self.wq),
            ("wk".into(), &self.wk),
            ("wv".into(), &self.wv),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut EmbeddingMatrix)> {
        vec![
            ("proj_weight".into(), &mut self.proj_weight),
            ("proj_bias".into(), &mut self.proj_bias),
            ("wq".into(), &mut self.wq),
            ("wk".into(), &mut self.wk),
            ("wv".into(), &mut self.wv),
        ]
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let tensors: Vec<(String, &EmbeddingMatrix)> = self.named_tensors();
        let mut meta = BTreeMap::new();
        meta.insert("head_count".to_string(), self.head_count as u64);
        meta.insert("trainable_proj".to_string(), self.trainable.proj as u64);
        meta.insert("trainable_wq".to_string(), self.trainable.wq as u64);
        meta.insert("trainable_wk".to_string(), self.trainable.wk as u64);
        meta.insert("trainable_wv".to_string(), self.trainable.wv as u64);
        crate::io::save_archive_with_meta(dir, "icaf", self.seed, &tensors, meta)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let (manifest, mut tensors) = crate::io::load_archive(dir)?;
        let mut take = |name: &str| -> Result<EmbeddingMatrix> {
            tensors
                .remove(name)
                .ok_or_else(|| IcvlError::format(format!("missing tensor {name}")))
        };
        let meta_flag = |key: &str| manifest.meta.get(key).copied().unwrap_or(1) != 0;
        let params = IcafParams {
            proj_weight: take("proj_weight")?,
            proj_bias: take("proj_bias")?,
            wq: take("wq")?,
            wk: take("wk")?,
            wv: take("wv")?,
            head_count: manifest.meta.get("head_count").copied().unwrap_or(1) as usize,
            trainable: IcafTrainable {
                proj: meta_flag("trainable_proj"),
                wq: meta_flag("trainable_wq"),
                wk: meta_flag("trainable_wk"),
                wv: meta_flag("trainable_wv"),
            },
            seed: manifest.seed,
        };
        params.validate()?;
        Ok(params)
    }
}

/// Output of a cross-attention fusion.
#[derive(Debug, Clone)]
pub struct FusionOutput {
    /// Query-rows x d_l fused embeddings.
    pub fused: EmbeddingMatrix,
    /// Query-rows x key-rows attention weights, averaged over heads.
    pub attention_weights: EmbeddingMatrix,
}

/// Concatenate segment embeddings (each `k x d_v`) and add the fixed 2D
/// positional encoding, truncated to `d_v` channels. This is the pre-projection
/// visual representation; it is also what joint training feeds the projection.
pub fn prepared_raw_visual(segments: &[EmbeddingMatrix]) -> Result<EmbeddingMatrix> {
    let first = segments
        .first()
        .ok_or_else(|| IcvlError::data("no visual segments"))?;
    let (k, d_v) = first.shape();
    if k == 0 || d_v == 0 {
        return Err(IcvlError::data("empty visual segment"));
    }
    let mut concat = EmbeddingMatrix::zeros(0, d_v);
    for seg in segments {
        if seg.shape() != (k, d_v) {
            return Err(IcvlError::shape("segment shapes", (k, d_v), seg.shape()));
        }
        concat = concat.concat_rows(seg)?;
    }
    // The encoding needs a multiple of 4 channels; compute at the next
    // multiple and keep the first d_v columns.
    let pe_dims = d_v.div_ceil(4) * 4;
    let pe = positional_encoding_2d(segments.len(), k, pe_dims)?;
    let mut out = concat;
    for r in 0..out.rows() {
        let pe_row = pe.row(r);
        for (o, p) in out.row_mut(r).iter_mut().zip(&pe_row[..d_v]) {
            *o += p;
        }
    }
    Ok(out)
}

/// Full visual preparation: concatenate, add positions, project to `d_l`.
pub fn prepare_visual(segments: &[EmbeddingMatrix], params: &IcafParams) -> Result<EmbeddingMatrix> {
    let raw = prepared_raw_visual(segments)?;
    if raw.dims() != params.d_v() {
        return Err(IcvlError::shape(
            "visual projection",
            raw.shape(),
            params.proj_weight.shape(),
        ));
    }
    crate::matrix::linear(&raw, &params.proj_weight, params.proj_bias.row(0))
}

/// Tape handles for the fusion parameters.
pub struct IcafVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl IcafVars {
    /// Register the fusion parameters on a tape, honoring the trainable flags.
    pub fn register(tape: &mut Tape, params: &IcafParams) -> IcafVars {
        let mut reg = |m: &EmbeddingMatrix, trainable: bool| {
            if trainable {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        IcafVars {
            proj_w: reg(&params.proj_weight, params.trainable.proj),
            proj_b: reg(&params.proj_bias, params.trainable.proj),
            wq: reg(&params.wq, params.trainable.wq),
            wk: reg(&params.wk, params.trainable.wk),
            wv: reg(&params.wv, params.trainable.wv),
        }
    }

    pub fn named(&self) -> Vec<(String, Var)> {
        vec![
            ("proj_weight".into(), self.proj_w),
            ("proj_bias".into(), self.proj_b),
            ("wq".into(), self.wq),
            ("wk".into(), self.wk),
            ("wv".into(), self.wv),
        ]
    }
}

/// Project raw (post-positional) visual rows to `d_l` on the tape.
pub fn project_visual_on_tape(tape: &mut Tape, raw_visual: Var, vars: &IcafVars) -> Result<Var> {
    let projected = tape.matmul(raw_visual, vars.proj_w)?;
    tape.add_bias_row(projected, vars.proj_b)
}

/// Multi-head cross-attention on the tape. Returns the fused output and the
/// per-head attention nodes (queries x keys each).
pub fn cross_attention_on_tape(
    tape: &mut Tape,
    query: Var,
    keys_values: Var,
    vars: &IcafVars,
    head_count: usize,
) -> Result<(Var, Vec<Var>)> {
    let d_l = tape.value(vars.wq).dims();
    if tape.value(query).dims() != d_l || tape.value(keys_values).dims() != d_l {
        return Err(IcvlError::shape(
            "cross_attention",
            tape.value(query).shape(),
            tape.value(keys_values).shape(),
        ));
    }
    let d_head = d_l / head_count;
    let q = tape.matmul(query, vars.wq)?;
    let k = tape.matmul(keys_values, vars.wk)?;
    let v = tape.matmul(keys_values, vars.wv)?;

    let mut heads = Vec::with_capacity(head_count);
    let mut attn_nodes = Vec::with_capacity(head_count);
    for h in 0..head_count {
        let qh = tape.slice_cols(q, h * d_head, d_head)?;
        let kh = tape.slice_cols(k, h * d_head, d_head)?;
        let vh = tape.slice_cols(v, h * d_head, d_head)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scaled = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        attn_nodes.push(attn);
        heads.push(tape.matmul(attn, vh)?);
    }
    let fused = tape.concat_cols(&heads)?;
    Ok((fused, attn_nodes))
}

fn run_fusion(
    query: &EmbeddingMatrix,
    keys_values: &EmbeddingMatrix,
    params: &IcafParams,
) -> Result<FusionOutput> {
    params.validate()?;
    let mut tape = Tape::new();
    let q = tape.constant(query.clone());
    let kv = tape.constant(keys_values.clone());
    let vars = IcafVars::register(&mut tape, params);
    let (fused, attn_nodes) = cross_attention_on_tape(&mut tape, q, kv, &vars, params.head_count)?;

    let mut attention = EmbeddingMatrix::zeros(query.rows(), keys_values.rows());
    for node in &attn_nodes {
        attention = attention.add(tape.value(*node))?;
    }
    let attention_weights = attention.scale(1.0 / attn_nodes.len() as f64);
    Ok(FusionOutput {
        fused: tape.value(fused).clone(),
        attention_weights,
    })
}

/// Cross-attention with intention queries over visual keys/values.
pub fn fuse(
    intention: &EmbeddingMatrix,
    visual: &EmbeddingMatrix,
    params: &IcafParams,
) -> Result<FusionOutput> {
    run_fusion(intention, visual, params)
}

/// Ablation: visual rows as queries, intention rows as keys/values.
pub fn fuse_visual_query(
    intention: &EmbeddingMatrix,
    visual: &EmbeddingMatrix,
    params: &IcafParams,
) -> Result<FusionOutput> {
    run_fusion(visual, intention, params)
}

/// Ablation baseline: row-wise concatenation, intention rows first.
pub fn fuse_concat(
    intention: &EmbeddingMatrix,
    visual: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    if intention.rows() > 0 && visual.rows() > 0 && intention.dims() != visual.dims() {
        return Err(IcvlError::shape(
            "fuse_concat",
            intention.shape(),
            visual.shape(),
        ));
    }
    intention.concat_rows(visual)
}
