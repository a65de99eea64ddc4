//! Dynamic focused attention: sparse cross-attention whose support shrinks
//! from layer to layer, with a histogram threshold deciding what survives.
//!
//! The free functions here work on dense matrices and mirror the math one
//! step at a time. The model runs the same kernels on CSR patterns through
//! [`block::DfaBlock`].

pub mod block;
pub mod dtb;
pub mod flops;
pub mod sparse;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Mask, Matrix};

pub use block::{DfaBlock, DfaChain, DfaConfig, DfaInput, GraphAttention, LayerTrace};
pub use dtb::{ThresholdResult, BINS};
pub use flops::{FlopEntry, FlopLedger};
pub use sparse::{LocalityBias, SparsePattern};

/// How the filtered map `A_fam` is selected from `A_oam`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRule {
    /// Global histogram threshold per attention matrix.
    Dtb,
    /// Per-row top-k; `None` means half of the keys.
    TopK(Option<usize>),
    /// Keep everything.
    Dense,
}

/// Running attention map `A^l` and its support `I^l`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub a: Matrix,
    pub i: Mask,
    pub layer: usize,
}

impl AttentionState {
    /// Layer-0 state: all-ones support and uniform rows.
    pub fn initial(n: usize, m: usize) -> Self {
        Self {
            a: Matrix::from_fn(n, m, |_, _| 1.0 / m as f64),
            i: Mask::ones(n, m),
            layer: 0,
        }
    }

    /// Row-stochastic, `I = Sign(A)`, no empty rows.
    pub fn validate(&self) -> Result<()> {
        if Mask::support_of(&self.a) != self.i {
            return Err(Error::Contract("index matrix differs from Sign(A)".into()));
        }
        for r in 0..self.a.rows {
            let s: f64 = self.a.row(r).iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!("row {r} sums to {s}")));
            }
            if self.i.row_nnz(r) == 0 {
                return Err(Error::Contract(format!("row {r} is fully masked")));
            }
        }
        Ok(())
    }
}

fn values_on(m: &Matrix, pat: &SparsePattern) -> Vec<f64> {
    (0..pat.rows())
        .flat_map(|i| pat.row_cols(i).iter().map(move |&j| m.get(i, j as usize)))
        .collect()
}

fn densify(pat: &SparsePattern, vals: &[f64]) -> Matrix {
    let mut m = Matrix::zeros(pat.rows(), pat.cols());
    for i in 0..pat.rows() {
        for (k, &j) in pat.row_range(i).zip(pat.row_cols(i)) {
            m.set(i, j as usize, vals[k]);
        }
    }
    m
}

/// Scores only where `i_prev` is set, row softmax over those positions.
pub fn smm_softmax(
    q: &Matrix,
    k: &Matrix,
    i_prev: &Mask,
    scale: f64,
    ledger: Option<(&FlopLedger, &str)>,
) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(dim_err(format!(
            "query width {} differs from key width {}",
            q.cols, k.cols
        )));
    }
    if i_prev.rows != q.rows || i_prev.cols != k.rows {
        return Err(dim_err("index matrix does not match N x M"));
    }
    let pat = SparsePattern::from_mask(i_prev);
    sparse::check_rows_nonempty(&pat, "smm_softmax")?;
    let vals = sparse::sparse_scores_softmax(&q.data, &k.data, q.cols, &pat, scale, None);
    if let Some((l, label)) = ledger {
        l.record(label, 2 * q.cols as u64 * pat.nnz() as u64);
    }
    Ok(densify(&pat, &vals))
}

/// Histogram threshold over the elements of `a_oam` flagged in `active`.
pub fn dtb_threshold(a_oam: &Matrix, active: &Mask) -> Result<ThresholdResult> {
    if active.rows != a_oam.rows || active.cols != a_oam.cols {
        return Err(dim_err("active mask does not match the attention map"));
    }
    dtb::threshold_values(
        a_oam
            .data
            .iter()
            .zip(&active.bits)
            .filter(|(_, &on)| on)
            .map(|(&v, _)| v),
    )
}

/// Per-row top-k mask; ties go to the smaller column.
pub fn topk_mask(a_oam: &Matrix, k: usize) -> Result<Mask> {
    if k == 0 || k > a_oam.cols {
        return Err(Error::Config(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            a_oam.cols
        )));
    }
    let mut mask = Mask::zeros(a_oam.rows, a_oam.cols);
    for i in 0..a_oam.rows {
        for j in top_k_indices(a_oam.row(i), k) {
            mask.set(i, j, true);
        }
    }
    Ok(mask)
}

fn top_k_indices(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Survivor flags for the nonzeros of `pat`, plus the threshold when one was computed.
pub(crate) fn select_keep(
    pat: &SparsePattern,
    oam: &[f64],
    rule: MaskRule,
) -> Result<(Vec<bool>, Option<ThresholdResult>)> {
    match rule {
        MaskRule::Dense => Ok((vec![true; pat.nnz()], None)),
        MaskRule::Dtb => {
            let thr = dtb::threshold_values(oam.iter().copied())?;
            let keep = oam.iter().map(|&v| thr.keeps(v)).collect();
            Ok((keep, Some(thr)))
        }
        MaskRule::TopK(k) => {
            let k = k.unwrap_or(pat.cols() / 2).max(1);
            let mut keep = vec![false; pat.nnz()];
            for i in 0..pat.rows() {
                let r = pat.row_range(i);
                for local in top_k_indices(&oam[r.clone()], k) {
                    keep[r.start + local] = true;
                }
            }
            Ok((keep, None))
        }
    }
}

/// `MASK = A_oam > k*`, `A = Norm(A_prev ⊙ A_oam ⊙ MASK)`, `I = Sign(A)`.
///
/// Only positions in the support of `a_prev` are considered. Every row keeps
/// at least its largest `A_oam` entry.
pub fn mask_and_propagate(
    a_oam: &Matrix,
    a_prev: &Matrix,
    thr: &ThresholdResult,
) -> Result<(Matrix, Mask)> {
    if a_oam.rows != a_prev.rows || a_oam.cols != a_prev.cols {
        return Err(dim_err("A_oam and A_prev differ in shape"));
    }
    let pat = SparsePattern::from_mask(&Mask::support_of(a_prev));
    sparse::check_rows_nonempty(&pat, "mask_and_propagate")?;
    let oam = values_on(a_oam, &pat);
    let prev = values_on(a_prev, &pat);
    let keep: Vec<bool> = oam.iter().map(|&v| thr.keeps(v)).collect();
    let out = sparse::propagate(&pat, Some(&prev), &oam, &keep);
    Ok((densify(&out.pattern, &out.values), out.pattern.to_mask()))
}

/// `O = A · V` over the positions flagged in `I`, which must equal `Sign(A)`.
pub fn attend(
    a: &Matrix,
    v: &Matrix,
    i: &Mask,
    ledger: Option<(&FlopLedger, &str)>,
) -> Result<Matrix> {
    if a.cols != v.rows {
        return Err(dim_err(format!(
            "attention has {} columns but V has {} rows",
            a.cols, v.rows
        )));
    }
    if Mask::support_of(a) != *i {
        return Err(Error::Contract("index matrix is not the support of A".into()));
    }
    let pat = SparsePattern::from_mask(i);
    let vals = values_on(a, &pat);
    let out = sparse::sparse_attend(&vals, &pat, &v.data, v.cols);
    if let Some((l, label)) = ledger {
        l.record(label, 2 * v.cols as u64 * pat.nnz() as u64);
    }
    Matrix::from_vec(a.rows, v.cols, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dense_softmax(q: &Matrix, k: &Matrix, scale: f64, mask: Option<&Mask>) -> Matrix {
        let mut out = Matrix::zeros(q.rows, k.rows);
        for i in 0..q.rows {
            let mut s: Vec<f64> = (0..k.rows)
                .map(|j| scale * q.row(i).iter().zip(k.row(j)).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            s.iter_mut().for_each(|v| *v = (*v - m).exp());
            if let Some(mask) = mask {
                for (j, v) in s.iter_mut().enumerate() {
                    if !mask.get(i, j) {
                        *v = 0.0;
                    }
                }
            }
            let z: f64 = s.iter().sum();
            for j in 0..k.rows {
                out.set(i, j, s[j] / z);
            }
        }
        out
    }

    #[test]
    fn all_ones_matches_dense_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Matrix::randn(6, 4, &mut rng);
        let k = Matrix::randn(9, 4, &mut rng);
        let a = smm_softmax(&q, &k, &Mask::ones(6, 9), 0.5, None).unwrap();
        let d = dense_softmax(&q, &k, 0.5, None);
        assert!(a.data.iter().zip(&d.data).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn singleton_rows_get_full_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Matrix::randn(5, 3, &mut rng);
        let k = Matrix::randn(7, 3, &mut rng);
        let mask = Mask::from_fn(5, 7, |i, j| j == (i * 3) % 7);
        let a = smm_softmax(&q, &k, &mask, 1.0, None).unwrap();
        for i in 0..5 {
            assert_eq!(a.get(i, (i * 3) % 7), 1.0);
        }
    }

    #[test]
    fn masked_oracle_and_flop_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k) = (Matrix::randn(16, 8, &mut rng), Matrix::randn(16, 8, &mut rng));
        let mut mask = Mask::from_fn(16, 16, |_, _| rng.gen_bool(0.4));
        for i in 0..16 {
            mask.set(i, i, true);
        }
        let ledger = FlopLedger::new();
        let a = smm_softmax(&q, &k, &mask, 0.3, Some((&ledger, "x"))).unwrap();
        let d = dense_softmax(&q, &k, 0.3, Some(&mask));
        assert!(a.data.iter().zip(&d.data).all(|(x, y)| (x - y).abs() < 1e-6));
        assert_eq!(ledger.total(), 2 * 8 * mask.nnz() as u64);
    }

    #[test]
    fn empty_row_is_rejected() {
        let q = Matrix::zeros(2, 2);
        let mut m = Mask::ones(2, 2);
        m.set(1, 0, false);
        m.set(1, 1, false);
        assert!(matches!(
            smm_softmax(&q, &q, &m, 1.0, None),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn topk_examples() {
        let a = Matrix::from_vec(1, 4, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
        assert_eq!(topk_mask(&a, 2).unwrap().bits, vec![true, true, false, false]);
        assert!(topk_mask(&a, 4).unwrap().bits.iter().all(|&b| b));
        let tie = Matrix::from_vec(1, 3, vec![0.2, 0.5, 0.5]).unwrap();
        assert_eq!(topk_mask(&tie, 1).unwrap().bits, vec![false, true, false]);
        assert!(topk_mask(&a, 0).is_err());
        assert!(topk_mask(&a, 5).is_err());
    }

    #[test]
    fn identity_propagation_from_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Matrix::randn(4, 3, &mut rng);
        let k = Matrix::randn(6, 3, &mut rng);
        let s0 = AttentionState::initial(4, 6);
        let oam = smm_softmax(&q, &k, &s0.i, 1.0, None).unwrap();
        let keep_all = dtb::threshold_from_histogram({
            let mut h = vec![0; BINS];
            h[0] = 1;
            h
        });
        assert!(keep_all.degenerate);
        let (a, i) = mask_and_propagate(&oam, &s0.a, &keep_all).unwrap();
        assert!(a.data.iter().zip(&oam.data).all(|(x, y)| (x - y).abs() < 1e-12));
        assert_eq!(i, Mask::ones(4, 6));
    }

    #[test]
    fn support_never_grows() {
        let oam = Matrix::from_vec(1, 3, vec![0.2, 0.5, 0.3]).unwrap();
        let prev = Matrix::from_vec(1, 3, vec![0.5, 0.0, 0.5]).unwrap();
        let thr = dtb::threshold_values([0.0, 1.0]).unwrap();
        let (a, i) = mask_and_propagate(&oam, &prev, &thr).unwrap();
        assert_eq!(a.get(0, 1), 0.0);
        assert!(!i.get(0, 1));
    }

    #[test]
    fn attend_selection_and_contract() {
        let a = Matrix::from_vec(2, 3, vec![0.0, 1.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        let v = Matrix::from_fn(3, 2, |i, j| (10 * i + j) as f64);
        let i = Mask::support_of(&a);
        let o = attend(&a, &v, &i, None).unwrap();
        assert_eq!(o.row(0), v.row(1));
        assert_eq!(o.row(1), v.row(2));
        assert!(matches!(
            attend(&a, &v, &Mask::ones(2, 3), None),
            Err(Error::Contract(_))
        ));
    }
}
