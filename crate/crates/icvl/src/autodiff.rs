//! Minimal define-by-run reverse-mode differentiation over [`EmbeddingMatrix`].
//!
//! A [`Tape`] records each operation together with its forward value; calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! accumulates gradients for every node that (transitively) depends on a
//! parameter. Constants are skipped during the backward pass, which is what
//! keeps frozen-base training cheap.
//!
//! The tape is deliberately small: just the operations the recognizer, the
//! fusion module and the decoder need. Analytic gradients are cross-checked
//! against central finite differences in the gradient-check module.

use crate::error::{IcvlError, Result};
use crate::matrix::{matmul, matmul_nt, softmax_in_place, EmbeddingMatrix};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Input,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    AddBiasRow(Var, Var),
    SoftmaxRows(Var),
    CausalSoftmaxRows(Var),
    Relu(Var),
    ConcatRows(Var, Var),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize, usize),
    SliceCols(Var, usize, usize),
    GatherRows(Var, Vec<usize>),
    CrossEntropyMean(Var, Vec<usize>),
    NllSum(Var, Vec<usize>),
    FrobeniusSq(Var),
    SumAll(Var),
}

struct Node {
    op: Op,
    value: EmbeddingMatrix,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<EmbeddingMatrix>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&EmbeddingMatrix> {
        self.grads[v.0].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, op: Op, value: EmbeddingMatrix, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &EmbeddingMatrix {
        &self.nodes[v.0].value
    }

    /// Forward value of a 1x1 node.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.value(v).shape(), (1, 1));
        self.value(v).get(0, 0)
    }

    /// Trainable input: gradients will be accumulated for it.
    pub fn param(&mut self, m: EmbeddingMatrix) -> Var {
        self.push(Op::Input, m, true)
    }

    /// Frozen input: the backward pass skips anything that depends only on constants.
    pub fn constant(&mut self, m: EmbeddingMatrix) -> Var {
        self.push(Op::Input, m, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::Matmul(a, b), value, g))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::MatmulNt(a, b), value, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let g = self.any_grad(&[a]);
        self.push(Op::Scale(a, c), value, g)
    }

    /// Broadcast-add a 1xD bias row to every row of `m`.
    pub fn add_bias_row(&mut self, m: Var, bias: Var) -> Result<Var> {
        let (mv, bv) = (self.value(m), self.value(bias));
        if bv.rows() != 1 || bv.dims() != mv.dims() {
            return Err(IcvlError::shape("add_bias_row", mv.shape(), bv.shape()));
        }
        let mut out = mv.clone();
        for r in 0..out.rows() {
            for (o, b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let g = self.any_grad(&[m, bias]);
        Ok(self.push(Op::AddBiasRow(m, bias), out, g))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let g = self.any_grad(&[a]);
        self.push(Op::SoftmaxRows(a), out, g)
    }

    /// Row-wise softmax over a square score matrix where row `i` may only
    /// attend to columns `<= i`; masked entries come out as exact zeros.
    pub fn causal_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if v.rows() != v.dims() {
            return Err(IcvlError::shape("causal_softmax", v.shape(), v.shape()));
        }
        let mut out = EmbeddingMatrix::zeros(v.rows(), v.dims());
        for r in 0..v.rows() {
            let mut visible: Vec<f64> = v.row(r)[..=r].to_vec();
            softmax_in_place(&mut visible);
            out.row_mut(r)[..=r].copy_from_slice(&visible);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::CausalSoftmaxRows(a), out, g))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(0.0));
        let g = self.any_grad(&[a]);
        self.push(Op::Relu(a), out, g)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).concat_rows(self.value(b))?;
        let g = self.any_grad(&[a, b]);
        Ok(self.push(Op::ConcatRows(a, b), value, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(IcvlError::data("concat_cols over zero parts"));
        }
        let rows = self.value(parts[0]).rows();
        let dims: usize = parts.iter().map(|p| self.value(*p).dims()).sum();
        let mut out = EmbeddingMatrix::zeros(rows, dims);
        let mut offset = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.rows() != rows {
                return Err(IcvlError::shape("concat_cols", (rows, dims), pv.shape()));
            }
            for r in 0..rows {
                out.row_mut(r)[offset..offset + pv.dims()].copy_from_slice(pv.row(r));
            }
            offset += pv.dims();
        }
        let g = self.any_grad(parts);
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, g))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).slice_rows(start, len)?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::SliceRows(a, start, len), value, g))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a);
        if start + len > v.dims() {
            return Err(IcvlError::data(format!(
                "column slice {start}..{} out of range for {} dims",
                start + len,
                v.dims()
            )));
        }
        let mut out = EmbeddingMatrix::zeros(v.rows(), len);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::SliceCols(a, start, len), out, g))
    }

    /// Select rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let mut out = EmbeddingMatrix::zeros(ids.len(), t.dims());
        for (r, &id) in ids.iter().enumerate() {
            if id >= t.rows() {
                return Err(IcvlError::data(format!(
                    "gather index {id} out of range for {} rows",
                    t.rows()
                )));
            }
            out.row_mut(r).copy_from_slice(t.row(id));
        }
        let g = self.any_grad(&[table]);
        Ok(self.push(Op::GatherRows(table, ids.to_vec()), out, g))
    }

    /// Mean over rows of `-log softmax(row)[target]`; returns a 1x1 node.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = crate::matrix::cross_entropy(self.value(logits), targets)?;
        let value = EmbeddingMatrix::from_vec(1, 1, vec![loss])?;
        let g = self.any_grad(&[logits]);
        Ok(self.push(Op::CrossEntropyMean(logits, targets.to_vec()), value, g))
    }

    /// Sum over rows of `-log softmax(row)[target]`; returns a 1x1 node.
    pub fn nll_sum(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        if targets.len() != v.rows() {
            return Err(IcvlError::data(format!(
                "{} targets for {} logit rows",
                targets.len(),
                v.rows()
            )));
        }
        let mut total = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= v.dims() {
                return Err(IcvlError::data(format!(
                    "target index {t} out of range for {} classes",
                    v.dims()
                )));
            }
            total += crate::matrix::row_nll(v.row(r), t);
        }
        let value = EmbeddingMatrix::from_vec(1, 1, vec![total])?;
        let g = self.any_grad(&[logits]);
        Ok(self.push(Op::NllSum(logits, targets.to_vec()), value, g))
    }

    /// Sum of squared entries; returns a 1x1 node.
    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var> {
        let value = EmbeddingMatrix::from_vec(1, 1, vec![self.value(a).frobenius_sq()])?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::FrobeniusSq(a), value, g))
    }

    /// Sum of all entries; returns a 1x1 node.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let value = EmbeddingMatrix::from_vec(1, 1, vec![s])?;
        let g = self.any_grad(&[a]);
        Ok(self.push(Op::SumAll(a), value, g))
    }

    /// Reverse pass from a 1x1 scalar node.
    pub fn backward(&self, scalar: Var) -> Result<Gradients> {
        let out = self.value(scalar);
        if out.shape() != (1, 1) {
            return Err(IcvlError::data(format!(
                "backward needs a 1x1 scalar node, got {}x{}",
                out.rows(),
                out.dims()
            )));
        }
        if !out.is_finite() {
            return Err(IcvlError::numeric("backward from non-finite scalar"));
        }
        let mut grads: Vec<Option<EmbeddingMatrix>> = vec![None; self.nodes.len()];
        grads[scalar.0] = Some(EmbeddingMatrix::from_vec(1, 1, vec![1.0])?);

        for idx in (0..=scalar.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(d_out) = grads[idx].take() else {
                continue;
            };
            self.accumulate(idx, &d_out, &mut grads)?;
            grads[idx] = Some(d_out);
        }
        Ok(Gradients { grads })
    }

    fn bump(
        &self,
        grads: &mut [Option<EmbeddingMatrix>],
        v: Var,
        delta: EmbeddingMatrix,
    ) -> Result<()> {
        if !self.nodes[v.0].needs_grad {
            return Ok(());
        }
        grads[v.0] = Some(match grads[v.0].take() {
            Some(existing) => existing.add(&delta)?,
            None => delta,
        });
        Ok(())
    }

    fn accumulate(
        &self,
        idx: usize,
        d_out: &EmbeddingMatrix,
        grads: &mut [Option<EmbeddingMatrix>],
    ) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Matmul(a, b) => {
                self.bump(grads, *a, matmul_nt(d_out, self.value(*b))?)?;
                self.bump(grads, *b, matmul(&self.value(*a).transpose(), d_out)?)?;
            }
            Op::MatmulNt(a, b) => {
                self.bump(grads, *a, matmul(d_out, self.value(*b))?)?;
                self.bump(grads, *b, matmul(&d_out.transpose(), self.value(*a))?)?;
            }
            Op::Add(a, b) => {
                self.bump(grads, *a, d_out.clone())?;
                self.bump(grads, *b, d_out.clone())?;
            }
            Op::Scale(a, c) => {
                self.bump(grads, *a, d_out.scale(*c))?;
            }
            Op::AddBiasRow(m, bias) => {
                self.bump(grads, *m, d_out.clone())?;
                let mut col_sums = EmbeddingMatrix::zeros(1, d_out.dims());
                for r in 0..d_out.rows() {
                    for (s, v) in col_sums.row_mut(0).iter_mut().zip(d_out.row(r)) {
                        *s += v;
                    }
                }
                self.bump(grads, *bias, col_sums)?;
            }
            Op::SoftmaxRows(a) | Op::CausalSoftmaxRows(a) => {
                let s = &self.nodes[idx].value;
                let mut din = EmbeddingMatrix::zeros(s.rows(), s.dims());
                for r in 0..s.rows() {
                    let dot: f64 = s
                        .row(r)
                        .iter()
                        .zip(d_out.row(r))
                        .map(|(sv, dv)| sv * dv)
                        .sum();
                    for c in 0..s.dims() {
                        din.set(r, c, s.get(r, c) * (d_out.get(r, c) - dot));
                    }
                }
                self.bump(grads, *a, din)?;
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut din = d_out.clone();
                for r in 0..din.rows() {
                    for c in 0..din.dims() {
                        if x.get(r, c) <= 0.0 {
                            din.set(r, c, 0.0);
                        }
                    }
                }
                self.bump(grads, *a, din)?;
            }
            Op::ConcatRows(a, b) => {
                let a_rows = self.value(*a).rows();
                self.bump(grads, *a, d_out.slice_rows(0, a_rows)?)?;
                self.bump(grads, *b, d_out.slice_rows(a_rows, d_out.rows() - a_rows)?)?;
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let dims = self.value(*p).dims();
                    let mut dp = EmbeddingMatrix::zeros(d_out.rows(), dims);
                    for r in 0..d_out.rows() {
                        dp.row_mut(r)
                            .copy_from_slice(&d_out.row(r)[offset..offset + dims]);
                    }
                    self.bump(grads, *p, dp)?;
                    offset += dims;
                }
            }
            Op::SliceRows(a, start, len) => {
                let av = self.value(*a);
                let mut din = EmbeddingMatrix::zeros(av.rows(), av.dims());
                for r in 0..*len {
                    din.row_mut(start + r).copy_from_slice(d_out.row(r));
                }
                self.bump(grads, *a, din)?;
            }
            Op::SliceCols(a, start, len) => {
                let av = self.value(*a);
                let mut din = EmbeddingMatrix::zeros(av.rows(), av.dims());
                for r in 0..av.rows() {
                    din.row_mut(r)[*start..start + len].copy_from_slice(d_out.row(r));
                }
                self.bump(grads, *a, din)?;
            }
            Op::GatherRows(table, ids) => {
                let tv = self.value(*table);
                let mut din = EmbeddingMatrix::zeros(tv.rows(), tv.dims());
                for (r, &id) in ids.iter().enumerate() {
                    for (t, v) in din.row_mut(id).iter_mut().zip(d_out.row(r)) {
                        *t += v;
                    }
                }
                self.bump(grads, *table, din)?;
            }
            Op::CrossEntropyMean(logits, targets) => {
                let scale = d_out.get(0, 0) / targets.len() as f64;
                self.bump(grads, *logits, nll_grad(self.value(*logits), targets, scale))?;
            }
            Op::NllSum(logits, targets) => {
                let scale = d_out.get(0, 0);
                self.bump(grads, *logits, nll_grad(self.value(*logits), targets, scale))?;
            }
            Op::FrobeniusSq(a) => {
                self.bump(grads, *a, self.value(*a).scale(2.0 * d_out.get(0, 0)))?;
            }
            Op::SumAll(a) => {
                let av = self.value(*a);
                self.bump(
                    grads,
                    *a,
                    EmbeddingMatrix::filled(av.rows(), av.dims(), d_out.get(0, 0)),
                )?;
            }
        }
        Ok(())
    }
}

/// `(softmax(row) - onehot(target)) * scale`, shared by both NLL reductions.
fn nll_grad(logits: &EmbeddingMatrix, targets: &[usize], scale: f64) -> EmbeddingMatrix {
    let mut grad = logits.clone();
    for r in 0..grad.rows() {
        softmax_in_place(grad.row_mut(r));
        let t = targets[r];
        grad.row_mut(r)[t] -= 1.0;
        for v in grad.row_mut(r) {
            *v *= scale;
        }
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Central-difference check of `build` with respect to a single input
    /// matrix; `build` must consume the input as its first registered param.
    fn check_against_finite_diff(
        input: &EmbeddingMatrix,
        build: impl Fn(&mut Tape, Var) -> Var,
    ) {
        let mut tape = Tape::new();
        let x = tape.param(input.clone());
        let out = build(&mut tape, x);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.wrt(x).unwrap().clone();

        let eps = 1e-6;
        for r in 0..input.rows() {
            for c in 0..input.dims() {
                let eval = |delta: f64| {
                    let mut bumped = input.clone();
                    bumped.set(r, c, bumped.get(r, c) + delta);
                    let mut t = Tape::new();
                    let v = t.param(bumped);
                    let o = build(&mut t, v);
                    t.scalar_value(o)
                };
                let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
                let a = analytic.get(r, c);
                let denom = a.abs().max(numeric.abs()).max(1e-3);
                assert!(
                    ((a - numeric) / denom).abs() < 1e-6,
                    "grad mismatch at ({r},{c}): analytic {a}, numeric {numeric}"
                );
            }
        }
    }

    #[test]
    fn matmul_gradients() {
        let x = EmbeddingMatrix::seeded_gaussian(3, 4, 1.0, 1);
        let w = EmbeddingMatrix::seeded_gaussian(4, 2, 1.0, 2);
        check_against_finite_diff(&x, |t, v| {
            let wv = t.constant(w.clone());
            let y = t.matmul(v, wv).unwrap();
            t.frobenius_sq(y).unwrap()
        });
        // And with respect to the weight side.
        let x2 = x.clone();
        check_against_finite_diff(&w, |t, v| {
            let xv = t.constant(x2.clone());
            let y = t.matmul(xv, v).unwrap();
            t.frobenius_sq(y).unwrap()
        });
    }

    #[test]
    fn matmul_nt_gradients() {
        let q = EmbeddingMatrix::seeded_gaussian(3, 5, 1.0, 3);
        let k = EmbeddingMatrix::seeded_gaussian(4, 5, 1.0, 4);
        check_against_finite_diff(&q, |t, v| {
            let kv = t.constant(k.clone());
            let y = t.matmul_nt(v, kv).unwrap();
            t.frobenius_sq(y).unwrap()
        });
        let q2 = q.clone();
        check_against_finite_diff(&k, |t, v| {
            let qv = t.constant(q2.clone());
            let y = t.matmul_nt(qv, v).unwrap();
            t.frobenius_sq(y).unwrap()
        });
    }

    #[test]
    fn softmax_and_relu_gradients() {
        let x = EmbeddingMatrix::seeded_gaussian(3, 4, 1.0, 5);
        check_against_finite_diff(&x, |t, v| {
            let s = t.softmax_rows(v);
            t.frobenius_sq(s).unwrap()
        });
        check_against_finite_diff(&x, |t, v| {
            let s = t.relu(v);
            t.frobenius_sq(s).unwrap()
        });
    }

    #[test]
    fn causal_softmax_masks_and_differentiates() {
        let x = EmbeddingMatrix::seeded_gaussian(4, 4, 1.0, 6);
        let mut tape = Tape::new();
        let v = tape.param(x.clone());
        let s = tape.causal_softmax_rows(v).unwrap();
        let sv = tape.value(s);
        for r in 0..4 {
            for c in (r + 1)..4 {
                assert_eq!(sv.get(r, c), 0.0);
            }
            let sum: f64 = sv.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
        check_against_finite_diff(&x, |t, v| {
            let s = t.causal_softmax_rows(v).unwrap();
            t.frobenius_sq(s).unwrap()
        });
    }

    #[test]
    fn bias_concat_slice_gather_gradients() {
        let x = EmbeddingMatrix::seeded_gaussian(4, 3, 1.0, 7);
        check_against_finite_diff(&x, |t, v| {
            let b = t.constant(EmbeddingMatrix::seeded_gaussian(1, 3, 1.0, 8));
            let y = t.add_bias_row(v, b).unwrap();
            let z = t.slice_rows(y, 1, 2).unwrap();
            t.frobenius_sq(z).unwrap()
        });
        let bias = EmbeddingMatrix::seeded_gaussian(1, 3, 1.0, 9);
        let x2 = x.clone();
        check_against_finite_diff(&bias, |t, v| {
            let xv = t.constant(x2.clone());
            let y = t.add_bias_row(xv, v).unwrap();
            t.frobenius_sq(y).unwrap()
        });
        // Gather + concat paths.
        let table = EmbeddingMatrix::seeded_gaussian(5, 3, 1.0, 10);
        check_against_finite_diff(&table, |t, v| {
            let g = t.gather_rows(v, &[4, 0, 0, 2]).unwrap();
            let left = t.slice_cols(g, 0, 2).unwrap();
            let right = t.slice_cols(g, 2, 1).unwrap();
            let joined = t.concat_cols(&[left, right]).unwrap();
            let stacked = t.concat_rows(joined, g).unwrap();
            t.frobenius_sq(stacked).unwrap()
        });
    }

    #[test]
    fn nll_reductions_gradients() {
        let logits = EmbeddingMatrix::seeded_gaussian(4, 5, 1.0, 11);
        let targets = vec![1usize, 4, 0, 2];
        let t1 = targets.clone();
        check_against_finite_diff(&logits, move |t, v| {
            t.cross_entropy_mean(v, &t1).unwrap()
        });
        check_against_finite_diff(&logits, move |t, v| t.nll_sum(v, &targets).unwrap());
    }

    #[test]
    fn constants_are_skipped() {
        let mut tape = Tape::new();
        let c = tape.constant(EmbeddingMatrix::filled(2, 2, 3.0));
        let p = tape.param(EmbeddingMatrix::filled(2, 2, 1.0));
        let s = tape.add(c, p).unwrap();
        let loss = tape.sum_all(s).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(c).is_none());
        assert_eq!(grads.wrt(p).unwrap(), &EmbeddingMatrix::filled(2, 2, 1.0));
    }
}
