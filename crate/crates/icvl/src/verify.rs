//! Canned gradient verifications over the trainable paths.
//!
//! Two scalar objectives cover everything that learns: the squared Frobenius
//! norm of the fused output (all fusion parameters), and the token-sum NLL
//! through one decoder block with LoRA factors and the fusion module in the
//! graph. Both are checked against central finite differences; the adapter
//! factors are randomized here so their gradients are nonzero.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckReport, NamedMatrices, NamedVars};
use crate::icaf::{cross_attention_on_tape, IcafVars};
use crate::matrix::EmbeddingMatrix;

fn icaf_param_map(d_v: usize, d_l: usize, seed: u64) -> NamedMatrices {
    let mut params = NamedMatrices::new();
    params.insert(
        "icaf.proj_weight".into(),
        EmbeddingMatrix::seeded_gaussian(d_v, d_l, 1.0 / (d_v as f64).sqrt(), seed),
    );
    params.insert(
        "icaf.proj_bias".into(),
        EmbeddingMatrix::seeded_gaussian(1, d_l, 0.1, seed + 1),
    );
    params.insert(
        "icaf.wq".into(),
        EmbeddingMatrix::seeded_gaussian(d_l, d_l, 1.0 / (d_l as f64).sqrt(), seed + 2),
    );
    params.insert(
        "icaf.wk".into(),
        EmbeddingMatrix::seeded_gaussian(d_l, d_l, 1.0 / (d_l as f64).sqrt(), seed + 3),
    );
    params.insert(
        "icaf.wv".into(),
        EmbeddingMatrix::seeded_gaussian(d_l, d_l, 1.0 / (d_l as f64).sqrt(), seed + 4),
    );
    params
}

fn icaf_vars_from(vars: &NamedVars) -> IcafVars {
    IcafVars {
        proj_w: vars["icaf.proj_weight"],
        proj_b: vars["icaf.proj_bias"],
        wq: vars["icaf.wq"],
        wk: vars["icaf.wk"],
        wv: vars["icaf.wv"],
    }
}

fn fused_output_on_tape(
    tape: &mut Tape,
    vars: &NamedVars,
    intention: &EmbeddingMatrix,
    raw_visual: &EmbeddingMatrix,
    head_count: usize,
) -> Result<Var> {
    let icaf = icaf_vars_from(vars);
    let raw = tape.constant(raw_visual.clone());
    let visual = crate::icaf::project_visual_on_tape(tape, raw, &icaf)?;
    let i = tape.constant(intention.clone());
    Ok(cross_attention_on_tape(tape, i, visual, &icaf, head_count)?.0)
}

/// Check `||fuse(...)||^2` against finite differences for every fusion
/// parameter at the given head count.
pub fn icaf_gradient_reports(
    head_count: usize,
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let (d_v, d_l, seq, t_rows) = (6usize, 8usize, 3usize, 5usize);
    let params = icaf_param_map(d_v, d_l, seed);
    let intention = EmbeddingMatrix::seeded_gaussian(seq, d_l, 1.0, seed + 10);
    let raw_visual = EmbeddingMatrix::seeded_gaussian(t_rows, d_v, 1.0, seed + 11);
    grad_check(
        |tape, vars| {
            let fused = fused_output_on_tape(tape, vars, &intention, &raw_visual, head_count)?;
            tape.frobenius_sq(fused)
        },
        &params,
        epsilon,
        tolerance,
    )
}

/// Check the token-sum NLL through one causal decoder block with LoRA on the
/// q/v projections and the head, with the fusion module in the graph: every
/// named parameter (fusion tensors, block tensors, adapter factors, head)
/// gets a finite-difference comparison.
pub fn decoder_gradient_reports(
    epsilon: f64,
    tolerance: f64,
    seed: u64,
) -> Result<Vec<GradCheckReport>> {
    let (d_v, d_l, seq, t_rows) = (4usize, 8usize, 2usize, 3usize);
    let vocab_size = 6usize;
    let rank = 2usize;
    let scale = 2.0; // lora_alpha 4 over rank 2

    let mut params = icaf_param_map(d_v, d_l, seed);
    let g = |rows: usize, dims: usize, salt: u64| {
        EmbeddingMatrix::seeded_gaussian(rows, dims, 1.0 / (dims as f64).sqrt(), seed + 20 + salt)
    };
    params.insert("block.wq".into(), g(d_l, d_l, 0));
    params.insert("block.wk".into(), g(d_l, d_l, 1));
    params.insert("block.wv".into(), g(d_l, d_l, 2));
    params.insert("block.wo".into(), g(d_l, d_l, 3));
    params.insert("block.ffn_w1".into(), g(2 * d_l, d_l, 4));
    params.insert("block.ffn_b1".into(), EmbeddingMatrix::zeros(1, 2 * d_l));
    params.insert("block.ffn_w2".into(), g(d_l, 2 * d_l, 5));
    params.insert("block.ffn_b2".into(), EmbeddingMatrix::zeros(1, d_l));
    params.insert("head".into(), g(vocab_size, d_l, 6));
    // Nonzero factors so both sides of each adapter carry gradient.
    params.insert("lora.q.a".into(), g(rank, d_l, 7));
    params.insert("lora.q.b".into(), g(d_l, rank, 8));
    params.insert("lora.v.a".into(), g(rank, d_l, 9));
    params.insert("lora.v.b".into(), g(d_l, rank, 10));
    params.insert("lora.head.a".into(), g(rank, d_l, 11));
    params.insert("lora.head.b".into(), g(vocab_size, rank, 12));

    let intention = EmbeddingMatrix::seeded_gaussian(seq, d_l, 1.0, seed + 40);
    let raw_visual = EmbeddingMatrix::seeded_gaussian(t_rows, d_v, 1.0, seed + 41);
    let token_table = EmbeddingMatrix::seeded_gaussian(vocab_size, d_l, 1.0, seed + 42);
    let targets = vec![1usize, 4, 2];

    grad_check(
        |tape, vars| {
            let adapted = |tape: &mut Tape, x: Var, base: Var, a: Var, b: Var| -> Result<Var> {
                let base_out = tape.matmul_nt(x, base)?;
                let xa = tape.matmul_nt(x, a)?;
                let xab = tape.matmul_nt(xa, b)?;
                let delta = tape.scale(xab, scale);
                tape.add(base_out, delta)
            };

            let prefix = fused_output_on_tape(tape, vars, &intention, &raw_visual, 1)?;
            let table = tape.constant(token_table.clone());
            let teacher = tape.gather_rows(table, &targets[..targets.len() - 1])?;
            let mut x = tape.concat_rows(prefix, teacher)?;
            let prefix_len = seq;

            let q = adapted(tape, x, vars["block.wq"], vars["lora.q.a"], vars["lora.q.b"])?;
            let k = tape.matmul_nt(x, vars["block.wk"])?;
            let v = adapted(tape, x, vars["block.wv"], vars["lora.v.a"], vars["lora.v.b"])?;
            let scores = tape.matmul_nt(q, k)?;
            let scaled = tape.scale(scores, 1.0 / (d_l as f64).sqrt());
            let attn = tape.causal_softmax_rows(scaled)?;
            let ctx = tape.matmul(attn, v)?;
            let out = tape.matmul_nt(ctx, vars["block.wo"])?;
            x = tape.add(x, out)?;
            let f = tape.matmul_nt(x, vars["block.ffn_w1"])?;
            let f = tape.add_bias_row(f, vars["block.ffn_b1"])?;
            let f = tape.relu(f);
            let f = tape.matmul_nt(f, vars["block.ffn_w2"])?;
            let f = tape.add_bias_row(f, vars["block.ffn_b2"])?;
            x = tape.add(x, f)?;

            let logits = adapted(
                tape,
                x,
                vars["head"],
                vars["lora.head.a"],
                vars["lora.head.b"],
            )?;
            let predicted = tape.slice_rows(logits, prefix_len - 1, targets.len())?;
            tape.nll_sum(predicted, &targets)
        },
        &params,
        epsilon,
        tolerance,
    )
}
