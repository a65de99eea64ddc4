//! CSR attention support and the sparse kernels behind the DFA block.
//!
//! Values of an attention matrix are stored aligned with the pattern's
//! nonzeros. Column indices inside a row are strictly increasing.

use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Mask;

#[derive(Debug)]
struct Transposed {
    col_ptr: Vec<usize>,
    /// For each column (in order), the nonzero indices of that column in row order.
    entries: Vec<usize>,
}

/// Compressed-row binary pattern (the sparse index matrix).
#[derive(Debug)]
pub struct SparsePattern {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
    row_of: OnceLock<Vec<u32>>,
    transposed: OnceLock<Transposed>,
}

impl Clone for SparsePattern {
    fn clone(&self) -> Self {
        Self::from_parts(self.rows, self.cols, self.row_ptr.clone(), self.col_idx.clone())
    }
}

impl PartialEq for SparsePattern {
    fn eq(&self, o: &Self) -> bool {
        self.rows == o.rows && self.cols == o.cols && self.row_ptr == o.row_ptr && self.col_idx == o.col_idx
    }
}

impl SparsePattern {
    fn from_parts(rows: usize, cols: usize, row_ptr: Vec<usize>, col_idx: Vec<u32>) -> Self {
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            row_of: OnceLock::new(),
            transposed: OnceLock::new(),
        }
    }

    /// All-ones pattern.
    pub fn dense(rows: usize, cols: usize) -> Self {
        let row_ptr = (0..=rows).map(|i| i * cols).collect();
        let col_idx = (0..rows).flat_map(|_| 0..cols as u32).collect();
        Self::from_parts(rows, cols, row_ptr, col_idx)
    }

    pub fn from_mask(mask: &Mask) -> Self {
        let mut row_ptr = Vec::with_capacity(mask.rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for i in 0..mask.rows {
            for j in 0..mask.cols {
                if mask.get(i, j) {
                    col_idx.push(j as u32);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_parts(mask.rows, mask.cols, row_ptr, col_idx)
    }

    pub fn to_mask(&self) -> Mask {
        let mut m = Mask::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for &j in self.row_cols(i) {
                m.set(i, j as usize, true);
            }
        }
        m
    }

    /// Keeps the nonzeros whose flag in `keep` is set.
    pub fn subset(&self, keep: &[bool]) -> Self {
        debug_assert_eq!(keep.len(), self.nnz());
        let mut row_ptr = Vec::with_capacity(self.rows + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for i in 0..self.rows {
            for k in self.row_range(i) {
                if keep[k] {
                    col_idx.push(self.col_idx[k]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self::from_parts(self.rows, self.cols, row_ptr, col_idx)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col_idx(&self) -> &[u32] {
        &self.col_idx
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.row_ptr[i]..self.row_ptr[i + 1]
    }

    pub fn row_cols(&self, i: usize) -> &[u32] {
        &self.col_idx[self.row_range(i)]
    }

    pub fn has_empty_row(&self) -> bool {
        self.row_ptr.windows(2).any(|w| w[0] == w[1])
    }

    /// Row index of every nonzero.
    pub fn row_of(&self) -> &[u32] {
        self.row_of.get_or_init(|| {
            let mut r = Vec::with_capacity(self.nnz());
            for i in 0..self.rows {
                r.extend(std::iter::repeat_n(i as u32, self.row_ptr[i + 1] - self.row_ptr[i]));
            }
            r
        })
    }

    fn transposed(&self) -> &Transposed {
        self.transposed.get_or_init(|| {
            let mut counts = vec![0usize; self.cols + 1];
            for &j in &self.col_idx {
                counts[j as usize + 1] += 1;
            }
            for j in 0..self.cols {
                counts[j + 1] += counts[j];
            }
            let col_ptr = counts.clone();
            let mut fill = counts;
            let mut entries = vec![0usize; self.nnz()];
            for k in 0..self.nnz() {
                let j = self.col_idx[k] as usize;
                entries[fill[j]] = k;
                fill[j] += 1;
            }
            Transposed { col_ptr, entries }
        })
    }

    /// Whether every nonzero of `self` is also in `other`.
    pub fn is_subset_of(&self, other: &SparsePattern) -> bool {
        if self.rows != other.rows || self.cols != other.cols {
            return false;
        }
        (0..self.rows).all(|i| {
            let theirs = other.row_cols(i);
            self.row_cols(i).iter().all(|j| theirs.binary_search(j).is_ok())
        })
    }
}

/// Additive score bias `-gamma * squared grid distance` between a query token
/// and a key token, both laid out row-major on `width`-wide grids. Keys repeat
/// every `key_period` tokens (one period per concatenated subband).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalityBias {
    pub query_width: usize,
    pub key_width: usize,
    pub key_period: usize,
    pub gamma: f64,
}

impl LocalityBias {
    /// Bias level below which a key is left out of the initial support
    /// (relative weight under e^-36, about 2e-16).
    pub const CUTOFF: f64 = 36.0;

    /// Keys whose bias is at least `-CUTOFF`, for `n` queries and `m` keys.
    /// A zero `gamma` gives the all-ones pattern.
    pub fn support(&self, n: usize, m: usize) -> SparsePattern {
        if self.gamma <= 0.0 {
            return SparsePattern::dense(n, m);
        }
        let r2 = Self::CUTOFF / self.gamma;
        let r = r2.sqrt().floor() as usize;
        let key_rows = self.key_period / self.key_width;
        let mut row_ptr = Vec::with_capacity(n + 1);
        let mut col_idx = Vec::new();
        row_ptr.push(0);
        for i in 0..n {
            let (yi, xi) = (i / self.query_width, i % self.query_width);
            for base in (0..m).step_by(self.key_period) {
                for yj in yi.saturating_sub(r)..(yi + r + 1).min(key_rows) {
                    for xj in xi.saturating_sub(r)..(xi + r + 1).min(self.key_width) {
                        let (dy, dx) = (yi.abs_diff(yj) as f64, xi.abs_diff(xj) as f64);
                        if dy * dy + dx * dx <= r2 {
                            col_idx.push((base + yj * self.key_width + xj) as u32);
                        }
                    }
                }
            }
            row_ptr.push(col_idx.len());
        }
        SparsePattern::from_parts(n, m, row_ptr, col_idx)
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        let j = j % self.key_period;
        let (yi, xi) = ((i / self.query_width) as f64, (i % self.query_width) as f64);
        let (yj, xj) = ((j / self.key_width) as f64, (j % self.key_width) as f64);
        -self.gamma * ((yi - yj) * (yi - yj) + (xi - xj) * (xi - xj))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Row softmax of `scale · q_i·k_j (+ bias)` over the pattern's nonzeros only.
pub fn sparse_scores_softmax(
    q: &[f64],
    k: &[f64],
    d: usize,
    pat: &SparsePattern,
    scale: f64,
    bias: Option<&LocalityBias>,
) -> Vec<f64> {
    let mut out = vec![0.0; pat.nnz()];
    par::for_each_segment(&mut out, pat.row_ptr(), |i, seg| {
        let qi = &q[i * d..(i + 1) * d];
        let cols = pat.row_cols(i);
        let mut max = f64::NEG_INFINITY;
        for (s, &j) in seg.iter_mut().zip(cols) {
            let j = j as usize;
            let mut v = scale * dot(qi, &k[j * d..(j + 1) * d]);
            if let Some(b) = bias {
                v += b.at(i, j);
            }
            *s = v;
            max = max.max(v);
        }
        let mut sum = 0.0;
        for s in seg.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        for s in seg.iter_mut() {
            *s /= sum;
        }
    });
    out
}

/// Gradients of [`sparse_scores_softmax`] given the forward probabilities.
pub fn sparse_scores_softmax_backward(
    q: &[f64],
    k: &[f64],
    d: usize,
    pat: &SparsePattern,
    scale: f64,
    probs: &[f64],
    dprobs: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    // dS = P ⊙ (dP − Σ_row dP·P), pre-multiplied by the score scale.
    let mut ds = vec![0.0; pat.nnz()];
    par::for_each_segment(&mut ds, pat.row_ptr(), |i, seg| {
        let r = pat.row_range(i);
        let (p, dp) = (&probs[r.clone()], &dprobs[r]);
        let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for ((s, &pv), &dv) in seg.iter_mut().zip(p).zip(dp) {
            *s = scale * pv * (dv - inner);
        }
    });
    let mut dq = vec![0.0; pat.rows() * d];
    par::for_each_chunk(&mut dq, d, |i, row| {
        for kk in pat.row_range(i) {
            let j = pat.col_idx()[kk] as usize;
            let g = ds[kk];
            for (o, &kv) in row.iter_mut().zip(&k[j * d..(j + 1) * d]) {
                *o += g * kv;
            }
        }
    });
    let t = pat.transposed();
    let rows_of = pat.row_of();
    let mut dk = vec![0.0; pat.cols() * d];
    par::for_each_chunk(&mut dk, d, |j, row| {
        for &kk in &t.entries[t.col_ptr[j]..t.col_ptr[j + 1]] {
            let i = rows_of[kk] as usize;
            let g = ds[kk];
            for (o, &qv) in row.iter_mut().zip(&q[i * d..(i + 1) * d]) {
                *o += g * qv;
            }
        }
    });
    (dq, dk)
}

/// `O = A · V` restricted to the pattern's nonzeros.
pub fn sparse_attend(a: &[f64], pat: &SparsePattern, v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; pat.rows() * d];
    par::for_each_chunk(&mut out, d, |i, row| {
        for kk in pat.row_range(i) {
            let j = pat.col_idx()[kk] as usize;
            let w = a[kk];
            for (o, &vv) in row.iter_mut().zip(&v[j * d..(j + 1) * d]) {
                *o += w * vv;
            }
        }
    });
    out
}

/// Gradients of [`sparse_attend`] with respect to the values of `A` and `V`.
pub fn sparse_attend_backward(
    a: &[f64],
    pat: &SparsePattern,
    v: &[f64],
    d: usize,
    dout: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let mut da = vec![0.0; pat.nnz()];
    par::for_each_segment(&mut da, pat.row_ptr(), |i, seg| {
        let g = &dout[i * d..(i + 1) * d];
        for (o, &j) in seg.iter_mut().zip(pat.row_cols(i)) {
            let j = j as usize;
            *o = dot(g, &v[j * d..(j + 1) * d]);
        }
    });
    let t = pat.transposed();
    let rows_of = pat.row_of();
    let mut dv = vec![0.0; pat.cols() * d];
    par::for_each_chunk(&mut dv, d, |j, row| {
        for &kk in &t.entries[t.col_ptr[j]..t.col_ptr[j + 1]] {
            let i = rows_of[kk] as usize;
            let w = a[kk];
            for (o, &g) in row.iter_mut().zip(&dout[i * d..(i + 1) * d]) {
                *o += w * g;
            }
        }
    });
    (da, dv)
}

/// Result of combining the previous attention map with the filtered one.
#[derive(Clone, Debug)]
pub struct Propagated {
    /// Support of the new map (`I^l`), a subset of the incoming pattern.
    pub pattern: SparsePattern,
    /// Row-normalized values aligned with `pattern`.
    pub values: Vec<f64>,
    /// For every new nonzero, its index in the incoming pattern.
    pub source: Vec<usize>,
    /// Per-row normalizer; zero marks a row pinned to a single survivor.
    pub row_sums: Vec<f64>,
}

/// `A = Norm(A_prev ⊙ A_oam ⊙ MASK)` with row-L1 normalization.
///
/// `prev = None` stands for the uniform initial map. Rows whose kept mass is
/// zero keep only their largest `A_oam` entry (pinned to weight 1). Entries
/// whose product underflows to zero leave the support, so `I = Sign(A)` holds.
pub fn propagate(pat: &SparsePattern, prev: Option<&[f64]>, oam: &[f64], keep: &[bool]) -> Propagated {
    let weight = |k: usize| prev.map_or(1.0, |p| p[k]) * oam[k];
    let mut new_keep = vec![false; pat.nnz()];
    let mut row_sums = vec![0.0; pat.rows()];
    for i in 0..pat.rows() {
        let r = pat.row_range(i);
        let mut sum = 0.0;
        for k in r.clone() {
            if keep[k] {
                let w = weight(k);
                if w > 0.0 {
                    new_keep[k] = true;
                    sum += w;
                }
            }
        }
        if sum == 0.0 {
            // No usable mass: pin the row to its largest oam entry.
            let best = r
                .clone()
                .fold(None, |best: Option<usize>, k| match best {
                    Some(b) if oam[b] >= oam[k] => Some(b),
                    _ => Some(k),
                })
                .expect("rows are never empty");
            new_keep[best] = true;
        }
        row_sums[i] = sum;
    }
    let pattern = pat.subset(&new_keep);
    let source: Vec<usize> = (0..pat.nnz()).filter(|&k| new_keep[k]).collect();
    let values = (0..pattern.rows())
        .flat_map(|i| pattern.row_range(i).map(move |k| (i, k)))
        .map(|(i, k)| {
            let s = row_sums[i];
            if s == 0.0 {
                1.0
            } else {
                weight(source[k]) / s
            }
        })
        .collect();
    Propagated {
        pattern,
        values,
        source,
        row_sums,
    }
}

/// Gradients of [`propagate`]'s values with respect to `prev` and `oam`
/// (dropped entries and pinned rows receive zero gradient).
pub fn propagate_backward(
    pat_in: &SparsePattern,
    out: &Propagated,
    prev: Option<&[f64]>,
    oam: &[f64],
    dvalues: &[f64],
) -> (Option<Vec<f64>>, Vec<f64>) {
    let mut dprev = prev.map(|_| vec![0.0; pat_in.nnz()]);
    let mut doam = vec![0.0; pat_in.nnz()];
    for i in 0..out.pattern.rows() {
        let s = out.row_sums[i];
        if s == 0.0 {
            continue;
        }
        let r = out.pattern.row_range(i);
        let inner: f64 = r.clone().map(|k| dvalues[k] * out.values[k]).sum();
        for k in r {
            let dw = (dvalues[k] - inner) / s;
            let src = out.source[k];
            let p = prev.map_or(1.0, |p| p[src]);
            doam[src] = dw * p;
            if let Some(dp) = dprev.as_mut() {
                dp[src] = dw * oam[src];
            }
        }
    }
    (dprev, doam)
}

/// Checks that every row keeps at least one position.
pub fn check_rows_nonempty(pat: &SparsePattern, what: &str) -> Result<()> {
    if pat.has_empty_row() {
        Err(Error::Contract(format!("{what}: a query row has no allowed key")))
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_pattern_roundtrip_and_transpose() {
        let m = Mask::from_fn(3, 4, |i, j| (i + j) % 2 == 0);
        let p = SparsePattern::from_mask(&m);
        assert_eq!(p.to_mask(), m);
        assert_eq!(p.nnz(), 6);
        let t = p.transposed();
        // column 0 holds rows 0 and 2
        let col0: Vec<u32> = t.entries[t.col_ptr[0]..t.col_ptr[1]]
            .iter()
            .map(|&k| p.row_of()[k])
            .collect();
        assert_eq!(col0, vec![0, 2]);
        assert!(SparsePattern::dense(3, 4).to_mask().bits.iter().all(|&b| b));
    }

    #[test]
    fn pinned_row_when_nothing_survives() {
        let p = SparsePattern::dense(1, 3);
        let oam = [0.2, 0.5, 0.3];
        let out = propagate(&p, None, &oam, &[false, false, false]);
        assert_eq!(out.pattern.row_cols(0), &[1]);
        assert_eq!(out.values, vec![1.0]);
    }

    #[test]
    fn underflowed_products_leave_support() {
        let p = SparsePattern::dense(1, 3);
        let prev = [0.5, 0.0, 0.5];
        let out = propagate(&p, Some(&prev), &[0.2, 0.6, 0.2], &[true, true, true]);
        assert_eq!(out.pattern.row_cols(0), &[0, 2]);
        assert_eq!(out.values, vec![0.5, 0.5]);
    }
}
