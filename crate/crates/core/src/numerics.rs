//! Scalar and vector kernels: softmax, entropy, top-k distances, retrieval.
//!
//! All arithmetic is `f64`. Every function here is pure.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

const PROB_SUM_TOL: f64 = 1e-9;

/// A dense probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates and wraps `values`.
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("probability vector is empty"));
        }
        if values.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(invalid("probability entries must be finite and non-negative"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(invalid(format!("probabilities sum to {sum}, expected 1")));
        }
        Ok(Self(values))
    }

    /// Divides a non-negative mass vector by its total.
    pub fn normalized(mass: &[f64]) -> Result<Self> {
        let total: f64 = mass.iter().sum();
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN must fail
        if !(total > 0.0) || !total.is_finite() {
            return Err(invalid("cannot normalize a vector with non-positive mass"));
        }
        Self::new(mass.iter().map(|m| m / total).collect())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = crate::Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// A vector of unnormalized scores over the vocabulary. Entries are finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LogitsVector(Vec<f64>);

impl LogitsVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logits must be finite"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> Option<usize> {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for LogitsVector {
    type Error = crate::Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Self::new(values)
    }
}

impl From<LogitsVector> for Vec<f64> {
    fn from(l: LogitsVector) -> Self {
        l.0
    }
}

/// Index of the largest entry, lowest index on ties. `None` for empty input.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i)
}

/// Max-subtracted softmax.
pub fn softmax(values: &[f64]) -> Result<ProbVector> {
    if values.is_empty() {
        return Err(invalid("softmax of an empty vector"));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(invalid("softmax input contains NaN"));
    }
    if values.iter().any(|v| v.is_infinite()) {
        return Err(invalid("softmax input contains an infinite value"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbVector(exps.into_iter().map(|e| e / total).collect()))
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn shannon_entropy(p: &ProbVector) -> f64 {
    entropy_of(p.as_slice())
}

/// Entropy of an already-normalized slice. Callers are responsible for validity.
pub(crate) fn entropy_of(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&pi| pi > 0.0).map(|&pi| -pi * pi.ln()).sum();
    // -0.0 and tiny negative rounding both collapse to zero
    h.max(0.0)
}

/// Indices of the `k` largest entries, ordered by decreasing value with ties
/// broken toward the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// L1 distance between `a` and `b` restricted to the top-`k` indices of `a`.
pub fn manhattan_topk_distance(a: &LogitsVector, b: &LogitsVector, k: usize) -> Result<f64> {
    if a.len() != b.len() {
        return Err(invalid(format!("length mismatch: {} vs {}", a.len(), b.len())));
    }
    if k == 0 {
        return Err(invalid("top-k requires k >= 1"));
    }
    if k > a.len() {
        return Err(invalid(format!("k = {k} exceeds length {}", a.len())));
    }
    let (a, b) = (a.as_slice(), b.as_slice());
    Ok(top_k_indices(a, k).into_iter().map(|i| (a[i] - b[i]).abs()).sum())
}

/// Activation used to weight visual tokens during retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `Σ_i σ(⟨h, z_i⟩) · z_i`.
pub fn similarity_weighted_retrieval(h: &[f64], visual: &[Vec<f64>], activation: Activation) -> Result<Vec<f64>> {
    if visual.is_empty() {
        return Err(invalid("retrieval over an empty visual token set"));
    }
    let mut out = vec![0.0; h.len()];
    for (i, z) in visual.iter().enumerate() {
        if z.len() != h.len() {
            return Err(invalid(format!(
                "visual token {i} has dim {} but hidden state has dim {}",
                z.len(),
                h.len()
            )));
        }
        let w = activation.apply(dot(h, z));
        for (o, zj) in out.iter_mut().zip(z) {
            *o += w * zj;
        }
    }
    Ok(out)
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row vector times matrix: `x · M`, `x.len() == rows`.
    pub fn left_mul(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += xr * m;
            }
        }
        out
    }

    /// Like [`Matrix::left_mul`] but only over the column range `cols`.
    pub fn left_mul_cols(&self, x: &[f64], cols: std::ops::Range<usize>) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; cols.len()];
        for (r, &xr) in x.iter().enumerate() {
            if xr == 0.0 {
                continue;
            }
            let row = &self.row(r)[cols.clone()];
            for (o, m) in out.iter_mut().zip(row) {
                *o += xr * m;
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn add_assign(a: &mut [f64], b: &[f64]) {
    for (x, y) in a.iter_mut().zip(b) {
        *x += y;
    }
}

pub(crate) fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(v: &[f64]) -> LogitsVector {
        LogitsVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert_abs_diff_eq!(p.as_slice()[0], 1.0, epsilon = 1e-12);
        assert!(p.as_slice()[1] < 1e-300 || p.as_slice()[1] == 0.0);

        let p = softmax(&[1f64.ln(), 2f64.ln(), 3f64.ln()]).unwrap();
        for (got, want) in p.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert_abs_diff_eq!(*got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(softmax(&[0.0, f64::NAN]).is_err());
    }

    #[test]
    fn entropy_examples() {
        let one_hot = ProbVector::new(vec![1.0, 0.0, 0.0]).unwrap();
        assert_eq!(shannon_entropy(&one_hot), 0.0);

        let uniform = ProbVector::new(vec![0.25; 4]).unwrap();
        assert_abs_diff_eq!(shannon_entropy(&uniform), 4f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(shannon_entropy(&uniform), 1.386294, epsilon = 1e-6);

        let p = ProbVector::new(vec![0.5, 0.25, 0.25]).unwrap();
        assert_abs_diff_eq!(shannon_entropy(&p), 1.5 * 2f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn prob_vector_validation() {
        assert!(ProbVector::new(vec![]).is_err());
        assert!(ProbVector::new(vec![0.5, 0.6]).is_err());
        assert!(ProbVector::new(vec![-0.1, 1.1]).is_err());
        assert!(ProbVector::new(vec![f64::NAN]).is_err());
        assert!(serde_json::from_str::<ProbVector>("[0.3, 0.3]").is_err());
    }

    #[test]
    fn manhattan_examples() {
        let a = logits(&[3.0, 1.0, 0.0]);
        assert_eq!(manhattan_topk_distance(&a, &a, 3).unwrap(), 0.0);
        let b = logits(&[1.0, 1.0, 0.0]);
        assert_eq!(manhattan_topk_distance(&a, &b, 2).unwrap(), 2.0);
    }

    #[test]
    fn manhattan_errors() {
        let a = logits(&[1.0, 2.0]);
        let b = logits(&[1.0, 2.0, 3.0]);
        assert!(manhattan_topk_distance(&a, &b, 1).is_err());
        assert!(manhattan_topk_distance(&a, &a, 3).is_err());
        assert!(manhattan_topk_distance(&a, &a, 0).is_err());
    }

    #[test]
    fn top_k_ties_prefer_lower_index() {
        assert_eq!(top_k_indices(&[1.0, 2.0, 2.0, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[1.0, 1.0, 1.0], 2), vec![0, 1]);
    }

    /// Independent oracle: materialize (value, index) pairs, sort descending
    /// with a hand-written insertion sort, sum the first k gaps.
    fn manhattan_oracle(a: &[f64], b: &[f64], k: usize) -> f64 {
        let mut pairs: Vec<(f64, usize)> = a.iter().copied().zip(0..).collect();
        for i in 1..pairs.len() {
            let mut j = i;
            while j > 0 {
                let (v0, i0) = pairs[j - 1];
                let (v1, i1) = pairs[j];
                if v1 > v0 || (v1 == v0 && i1 < i0) {
                    pairs.swap(j - 1, j);
                    j -= 1;
                } else {
                    break;
                }
            }
        }
        let mut total = 0.0;
        for &(_, i) in pairs.iter().take(k) {
            total += (a[i] - b[i]).abs();
        }
        total
    }

    #[test]
    fn manhattan_matches_sort_and_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let a: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
            let b: Vec<f64> = (0..100).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = manhattan_topk_distance(&logits(&a), &logits(&b), 20).unwrap();
            assert_abs_diff_eq!(got, manhattan_oracle(&a, &b, 20), epsilon = 1e-12);
        }
    }

    #[test]
    fn retrieval_examples() {
        let h = [1.0, 0.0, 0.0];
        let zs = vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 2.0]];
        let out = similarity_weighted_retrieval(&h, &zs, Activation::Relu).unwrap();
        assert_eq!(out, vec![0.0, 0.0, 0.0]);

        let h = [2.0, 0.0];
        let z = vec![vec![1.0, 3.0]];
        let out = similarity_weighted_retrieval(&h, &z, Activation::Relu).unwrap();
        assert_eq!(out, vec![2.0, 6.0]);
    }

    #[test]
    fn retrieval_errors() {
        assert!(similarity_weighted_retrieval(&[1.0], &[], Activation::Relu).is_err());
        assert!(similarity_weighted_retrieval(&[1.0, 2.0], &[vec![1.0]], Activation::Silu).is_err());
    }

    #[test]
    fn retrieval_silu_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d = 8;
            let h: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let zs: Vec<Vec<f64>> = (0..3)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let got = similarity_weighted_retrieval(&h, &zs, Activation::Silu).unwrap();
            let mut want = vec![0.0; d];
            for z in &zs {
                let mut s = 0.0;
                for j in 0..d {
                    s += h[j] * z[j];
                }
                let sigmoid = 1.0 / (1.0 + (-s).exp());
                let w = s * sigmoid;
                for j in 0..d {
                    want[j] += w * z[j];
                }
            }
            for (g, w) in got.iter().zip(&want) {
                assert_abs_diff_eq!(*g, *w, epsilon = 1e-12);
            }
        }
    }

    fn finite_vec(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-50.0f64..50.0, len)
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in finite_vec(1..32), c in -100.0f64..100.0) {
            let p = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let q = softmax(&shifted).unwrap();
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() <= 1e-9);
            }
            prop_assert_eq!(argmax(p.as_slice()), argmax(&v));
        }

        #[test]
        fn entropy_is_bounded(v in finite_vec(1..32)) {
            let p = softmax(&v).unwrap();
            let h = shannon_entropy(&p);
            prop_assert!(h >= 0.0);
            prop_assert!(h <= (p.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn manhattan_triangle_inequality_on_fixed_set(
            a in finite_vec(24..25), b in finite_vec(24..25), c in finite_vec(24..25),
        ) {
            let k = 20;
            let idx = top_k_indices(&a, k);
            let d = |x: &[f64], y: &[f64]| idx.iter().map(|&i| (x[i] - y[i]).abs()).sum::<f64>();
            prop_assert!((d(&a, &b) - d(&b, &a)).abs() < 1e-12);
            prop_assert!(d(&a, &c) <= d(&a, &b) + d(&b, &c) + 1e-9);
            let via_api = manhattan_topk_distance(&logits(&a), &logits(&b), k).unwrap();
            prop_assert!((via_api - d(&a, &b)).abs() < 1e-12);
        }

        #[test]
        fn relu_retrieval_is_homogeneous(
            h in prop::collection::vec(0.1f64..1.0, 4),
            scale in 0.1f64..10.0,
        ) {
            // non-negative z keeps every inner product positive
            let zs = vec![vec![0.5, 0.1, 0.2, 0.3], vec![0.1, 0.9, 0.4, 0.2]];
            let base = similarity_weighted_retrieval(&h, &zs, Activation::Relu).unwrap();
            let hs: Vec<f64> = h.iter().map(|x| x * scale).collect();
            let scaled = similarity_weighted_retrieval(&hs, &zs, Activation::Relu).unwrap();
            for (s, b) in scaled.iter().zip(&base) {
                prop_assert!((s - scale * b).abs() <= 1e-9 * (1.0 + s.abs()));
            }
        }
    }
}
