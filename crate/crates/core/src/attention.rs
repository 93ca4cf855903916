//! Density-reweighted scaled dot-product self-attention.
//!
//! Scores toward key `j` are shifted by `ln d_j` before the softmax:
//!
//! ```text
//! s'_ij = <q_i, k_j> / sqrt(dim) + ln d_j
//! o_i   = sum_j softmax_j(s'_i.) v_j
//! ```
//!
//! For integer densities this is exactly attention over a sequence in which
//! token `j` appears `d_j` times; [`duplication_oracle`] computes that
//! expanded attention directly and serves as the reference implementation.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Queries, keys and values (`N x dim` each) plus per-token `ln d`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBatch {
    pub queries: Array2<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
    pub log_density: Array1<f64>,
}

impl AttentionBatch {
    /// Batch with all densities 1.
    pub fn uniform(queries: Array2<f64>, keys: Array2<f64>, values: Array2<f64>) -> Self {
        let n = queries.nrows();
        Self {
            queries,
            keys,
            values,
            log_density: Array1::zeros(n),
        }
    }

    pub fn with_densities(mut self, densities: &[f64]) -> Result<Self> {
        if densities.iter().any(|d| !(d.is_finite() && *d > 0.0)) {
            return Err(Error::param("density", "must be finite and positive"));
        }
        self.log_density = densities.iter().map(|d| d.ln()).collect();
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.queries.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.nrows() == 0
    }

    fn validate(&self) -> Result<()> {
        let n = self.queries.nrows();
        if n == 0 {
            return Err(Error::ShapeMismatch("attention needs at least one token".into()));
        }
        if self.keys.nrows() != n || self.values.nrows() != n || self.log_density.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "token counts differ: q {}, k {}, v {}, density {}",
                n,
                self.keys.nrows(),
                self.values.nrows(),
                self.log_density.len()
            )));
        }
        if self.queries.ncols() != self.keys.ncols() {
            return Err(Error::ShapeMismatch(format!(
                "query dim {} vs key dim {}",
                self.queries.ncols(),
                self.keys.ncols()
            )));
        }
        let finite = |a: &Array2<f64>| a.iter().all(|v| v.is_finite());
        if !(finite(&self.queries) && finite(&self.keys) && finite(&self.values)) {
            return Err(Error::NonFinite("attention inputs"));
        }
        if !self.log_density.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("log density"));
        }
        Ok(())
    }
}

/// Row-stochastic weight matrix `w'` of the reweighted attention.
pub fn attention_weights(batch: &AttentionBatch) -> Result<Array2<f64>> {
    batch.validate()?;
    let scale = (batch.queries.ncols() as f64).sqrt().recip();
    let mut scores = batch.queries.dot(&batch.keys.t()) * scale;
    scores += &batch.log_density.view().insert_axis(Axis(0));
    softmax_rows(&mut scores);
    Ok(scores)
}

/// Reweighted attention output, `N x value_dim`.
pub fn reweighted_attention(batch: &AttentionBatch) -> Result<Array2<f64>> {
    let w = attention_weights(batch)?;
    Ok(w.dot(&batch.values))
}

fn softmax_rows(scores: &mut Array2<f64>) {
    for mut row in scores.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Plain softmax attention with `1/sqrt(dim)` scaling.
pub fn standard_attention(q: ArrayView2<f64>, k: ArrayView2<f64>, v: ArrayView2<f64>) -> Array2<f64> {
    let scale = (q.ncols() as f64).sqrt().recip();
    let mut scores = q.dot(&k.t()) * scale;
    softmax_rows(&mut scores);
    scores.dot(&v)
}

/// Largest per-token multiplicity the oracle accepts.
pub const MAX_MULTIPLICITY: u32 = 16;
/// Largest expanded sequence the oracle accepts.
pub const MAX_EXPANDED: usize = 256;

/// Attention over the sequence in which token `j` is physically repeated
/// `multiplicity[j]` times; returns the outputs at each token's first copy.
pub fn duplication_oracle(
    q: ArrayView2<f64>,
    k: ArrayView2<f64>,
    v: ArrayView2<f64>,
    multiplicity: &[u32],
) -> Result<Array2<f64>> {
    let n = q.nrows();
    if k.nrows() != n || v.nrows() != n || multiplicity.len() != n {
        return Err(Error::ShapeMismatch("oracle inputs disagree on token count".into()));
    }
    if let Some(&m) = multiplicity.iter().find(|&&m| m == 0 || m > MAX_MULTIPLICITY) {
        return Err(Error::param(
            "density",
            format!("multiplicity {m} outside 1..={MAX_MULTIPLICITY}"),
        ));
    }
    let total: usize = multiplicity.iter().map(|&m| m as usize).sum();
    if total > MAX_EXPANDED {
        return Err(Error::param(
            "density",
            format!("expanded length {total} exceeds {MAX_EXPANDED}"),
        ));
    }
    let mut order = Vec::with_capacity(total);
    let mut first = Vec::with_capacity(n);
    for (j, &m) in multiplicity.iter().enumerate() {
        first.push(order.len());
        order.extend(std::iter::repeat_n(j, m as usize));
    }
    let qe = q.select(Axis(0), &order);
    let ke = k.select(Axis(0), &order);
    let ve = v.select(Axis(0), &order);
    let out = standard_attention(qe.view(), ke.view(), ve.view());
    Ok(out.select(Axis(0), &first))
}

/// Converts real densities to multiplicities, rejecting non-integers.
pub fn integer_multiplicities(densities: &[f64]) -> Result<Vec<u32>> {
    densities
        .iter()
        .map(|&d| {
            if d.fract() != 0.0 || d < 1.0 || d > MAX_MULTIPLICITY as f64 {
                Err(Error::param("density", format!("{d} is not an integer in 1..={MAX_MULTIPLICITY}")))
            } else {
                Ok(d as u32)
            }
        })
        .collect()
}
