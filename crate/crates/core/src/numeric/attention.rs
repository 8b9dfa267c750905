//! Multi-head scaled dot-product attention over packed row blocks.
//!
//! Queries and keys of several independent sequences share one packed
//! matrix each. An [`AttentionLayout`] lists which query rows attend to which
//! key rows, and a boolean visibility mask per block that acts as an
//! additive `0 / -inf` mask before the softmax. Query rows that see no key
//! produce zeros instead of NaN.

use std::sync::Arc;

use super::scalar::{gemm, MatView, MatViewMut};
use super::Scalar;
use crate::error::{Error, Result};

/// Row-major boolean visibility matrix, `allowed[q][k]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMask {
    rows: usize,
    cols: usize,
    allowed: Vec<bool>,
}

impl BoolMask {
    pub fn new(rows: usize, cols: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != rows * cols {
            return Err(Error::Shape { op: "mask", lhs: vec![rows, cols], rhs: vec![allowed.len()] });
        }
        Ok(BoolMask { rows, cols, allowed })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| f(r, c)).collect();
        BoolMask { rows, cols, allowed }
    }

    /// Lower-triangular (inclusive) self-attention mask.
    pub fn causal(len: usize) -> Self {
        Self::from_fn(len, len, |q, k| k <= q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allowed[q * self.cols..(q + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }

    pub fn row_sums(&self) -> Vec<usize> {
        (0..self.rows).map(|r| self.row(r).iter().filter(|&&b| b).count()).collect()
    }

    pub fn all(&self) -> bool {
        self.allowed.iter().all(|&b| b)
    }

    pub fn none(&self) -> bool {
        self.allowed.iter().all(|&b| !b)
    }
}

/// One independent attention problem inside the packed matrices.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub q_offset: usize,
    pub k_offset: usize,
    pub mask: Arc<BoolMask>,
}

impl AttentionBlock {
    pub fn q_len(&self) -> usize {
        self.mask.rows()
    }

    pub fn k_len(&self) -> usize {
        self.mask.cols()
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttentionLayout {
    blocks: Vec<AttentionBlock>,
}

impl AttentionLayout {
    /// Query ranges must not overlap; every query row belongs to at most one
    /// softmax.
    pub fn new(mut blocks: Vec<AttentionBlock>) -> Result<Self> {
        blocks.sort_by_key(|b| b.q_offset);
        for w in blocks.windows(2) {
            if w[0].q_offset + w[0].q_len() > w[1].q_offset {
                return Err(Error::invalid("attention blocks overlap in query rows"));
            }
        }
        Ok(AttentionLayout { blocks })
    }

    /// Single causal self-attention block over `len` rows.
    pub fn causal(len: usize) -> Self {
        AttentionLayout {
            blocks: vec![AttentionBlock { q_offset: 0, k_offset: 0, mask: Arc::new(BoolMask::causal(len)) }],
        }
    }

    pub fn blocks(&self) -> &[AttentionBlock] {
        &self.blocks
    }

    fn check(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        for b in &self.blocks {
            if b.q_offset + b.q_len() > q_rows || b.k_offset + b.k_len() > k_rows {
                return Err(Error::Shape {
                    op: "attention layout",
                    lhs: vec![b.q_offset + b.q_len(), b.k_offset + b.k_len()],
                    rhs: vec![q_rows, k_rows],
                });
            }
        }
        Ok(())
    }

    fn prob_len(&self, heads: usize) -> usize {
        self.blocks.iter().map(|b| b.q_len() * b.k_len() * heads).sum()
    }
}

pub(crate) struct AttentionShapes {
    pub q_rows: usize,
    pub k_rows: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttentionShapes {
    pub fn validate(q: &[usize], k: &[usize], v: &[usize], heads: usize, layout: &AttentionLayout) -> Result<Self> {
        if q.len() != 2 || k.len() != 2 || v.len() != 2 || k != v || q[1] != k[1] {
            return Err(Error::Shape { op: "attention", lhs: q.to_vec(), rhs: k.to_vec() });
        }
        if heads == 0 || !q[1].is_multiple_of(heads) {
            return Err(Error::invalid(format!("width {} not divisible by {heads} heads", q[1])));
        }
        layout.check(q[0], k[0])?;
        Ok(AttentionShapes { q_rows: q[0], k_rows: k[0], dim: q[1], heads })
    }
}

/// Returns `(output, probabilities)`; probabilities are stored block-major,
/// then head-major, for the backward pass.
pub(crate) fn forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: &AttentionShapes,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>) {
    let d = s.dim;
    let dh = d / s.heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); s.q_rows * d];
    let mut probs = vec![T::zero(); layout.prob_len(s.heads)];
    let mut off = 0;
    for b in layout.blocks() {
        let (ql, kl) = (b.q_len(), b.k_len());
        for h in 0..s.heads {
            let p = &mut probs[off..off + ql * kl];
            off += ql * kl;
            let qh = MatView::strided(&q[b.q_offset * d + h * dh..], ql, dh, d);
            let kh = MatView::strided(&k[b.k_offset * d + h * dh..], kl, dh, d);
            gemm(scale, qh, kh.t(), T::zero(), MatViewMut::row_major(p, ql, kl));
            masked_softmax(p, &b.mask);
            let vh = MatView::strided(&v[b.k_offset * d + h * dh..], kl, dh, d);
            let oh = MatViewMut::strided(&mut out[b.q_offset * d + h * dh..], ql, dh, d);
            gemm(T::one(), MatView::row_major(p, ql, kl), vh, T::zero(), oh);
        }
    }
    (out, probs)
}

fn masked_softmax<T: Scalar>(p: &mut [T], mask: &BoolMask) {
    let cols = mask.cols();
    for (r, row) in p.chunks_mut(cols).enumerate() {
        let allowed = mask.row(r);
        let mut max = T::neg_infinity();
        for (x, &ok) in row.iter().zip(allowed) {
            if ok && *x > max {
                max = *x;
            }
        }
        if max == T::neg_infinity() {
            row.iter_mut().for_each(|x| *x = T::zero());
            continue;
        }
        let mut sum = T::zero();
        for (x, &ok) in row.iter_mut().zip(allowed) {
            *x = if ok { (*x - max).exp() } else { T::zero() };
            sum += *x;
        }
        let inv = T::one() / sum;
        row.iter_mut().for_each(|x| *x *= inv);
    }
}

/// Gradients with respect to `(q, k, v)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    dout: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    s: &AttentionShapes,
    layout: &AttentionLayout,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let d = s.dim;
    let dh = d / s.heads;
    let scale = T::from_f64_lossy(1.0 / (dh as f64).sqrt());
    let mut dq = vec![T::zero(); s.q_rows * d];
    let mut dk = vec![T::zero(); s.k_rows * d];
    let mut dv = vec![T::zero(); s.k_rows * d];
    let mut ds = Vec::new();
    let mut off = 0;
    for b in layout.blocks() {
        let (ql, kl) = (b.q_len(), b.k_len());
        for h in 0..s.heads {
            let p = &probs[off..off + ql * kl];
            off += ql * kl;
            let pv = MatView::row_major(p, ql, kl);
            let doh = MatView::strided(&dout[b.q_offset * d + h * dh..], ql, dh, d);
            let vh = MatView::strided(&v[b.k_offset * d + h * dh..], kl, dh, d);
            // dV += P^T dO
            gemm(T::one(), pv.t(), doh, T::one(), MatViewMut::strided(&mut dv[b.k_offset * d + h * dh..], kl, dh, d));
            // dP = dO V^T, then dS = P (dP - rowdot(dP, P))
            ds.clear();
            ds.resize(ql * kl, T::zero());
            gemm(T::one(), doh, vh.t(), T::zero(), MatViewMut::row_major(&mut ds, ql, kl));
            for (drow, prow) in ds.chunks_mut(kl).zip(p.chunks(kl)) {
                let dot: T = drow.iter().zip(prow).map(|(&a, &b)| a * b).sum();
                for (x, &pp) in drow.iter_mut().zip(prow) {
                    *x = pp * (*x - dot);
                }
            }
            let dsv = MatView::row_major(&ds, ql, kl);
            let kh = MatView::strided(&k[b.k_offset * d + h * dh..], kl, dh, d);
            let qh = MatView::strided(&q[b.q_offset * d + h * dh..], ql, dh, d);
            gemm(scale, dsv, kh, T::one(), MatViewMut::strided(&mut dq[b.q_offset * d + h * dh..], ql, dh, d));
            gemm(scale, dsv.t(), qh, T::one(), MatViewMut::strided(&mut dk[b.k_offset * d + h * dh..], kl, dh, d));
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_mask_rows() {
        let m = BoolMask::causal(3);
        assert_eq!(m.row_sums(), vec![1, 2, 3]);
        assert_eq!(BoolMask::causal(1).as_slice(), &[true]);
    }

    #[test]
    fn fully_masked_rows_are_zero() {
        let mask = Arc::new(BoolMask::from_fn(2, 2, |q, _| q == 1));
        let layout = AttentionLayout::new(vec![AttentionBlock { q_offset: 0, k_offset: 0, mask }]).unwrap();
        let q = [1.0f64, 2.0, 3.0, 4.0];
        let s = AttentionShapes::validate(&[2, 2], &[2, 2], &[2, 2], 1, &layout).unwrap();
        let (out, _) = forward(&q, &q, &q, &s, &layout);
        assert_eq!(&out[..2], &[0.0, 0.0]);
        assert!(out[2..].iter().all(|x| x.is_finite()));
    }

    #[test]
    fn overlapping_blocks_rejected() {
        let mask = Arc::new(BoolMask::causal(3));
        let blocks = vec![
            AttentionBlock { q_offset: 0, k_offset: 0, mask: mask.clone() },
            AttentionBlock { q_offset: 2, k_offset: 0, mask },
        ];
        assert!(AttentionLayout::new(blocks).is_err());
    }
}
