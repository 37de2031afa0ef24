use crate::numerics::{Real, Tensor};

/// Squared Euclidean distance.
#[inline]
pub fn sq_dist<F: Real>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Nearest codebook entry by squared Euclidean distance (lowest index on
/// ties) and the residual `z - entry`.
pub fn quantize_level<F: Real>(z: &[F], entries: &Tensor<F>) -> (usize, Vec<F>) {
    let k = entries.shape()[0];
    let mut best = 0;
    let mut best_d = sq_dist(z, entries.row(0));
    for c in 1..k {
        let d = sq_dist(z, entries.row(c));
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    let residual = z.iter().zip(entries.row(best)).map(|(&x, &e)| x - e).collect();
    (best, residual)
}

/// Residuals `z_0..z_M`, chosen indices and the quantized sum `r̃`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizationTrace<F> {
    pub residuals: Vec<Vec<F>>,
    pub indices: Vec<usize>,
    pub quantized_sum: Vec<F>,
}

/// Applies [`quantize_level`] once per codebook on successive residuals.
pub fn quantize<F: Real>(z0: &[F], codebooks: &[&Tensor<F>]) -> QuantizationTrace<F> {
    let mut residuals = vec![z0.to_vec()];
    let mut indices = Vec::with_capacity(codebooks.len());
    let mut sum = vec![F::zero(); z0.len()];
    for cb in codebooks {
        let (idx, next) = quantize_level(residuals.last().expect("non-empty"), cb);
        for (s, &e) in sum.iter_mut().zip(cb.row(idx)) {
            *s += e;
        }
        indices.push(idx);
        residuals.push(next);
    }
    QuantizationTrace {
        residuals,
        indices,
        quantized_sum: sum,
    }
}
