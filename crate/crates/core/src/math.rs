//! Dense f32 numerics shared by the engine and the analyzers.
//!
//! Every reduction accumulates left to right in f32, starting from `0.0`, so
//! a given output element is computed by the same sequence of operations no
//! matter how many rows the surrounding matrix has. Transcendentals go
//! through `libm` so results do not depend on the platform's C library.

use crate::error::{Error, Result};

/// Row-major dense f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    /// Builds a matrix, checking the element count and that every entry is finite.
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite entry at flat index {pos}"
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_raw(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows. Mostly useful for fixtures.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        Matrix::from_raw(self.cols, self.rows, out)
    }

    /// Copies a block of columns `[start, start + width)`.
    pub fn columns(&self, start: usize, width: usize) -> Matrix {
        assert!(start + width <= self.cols, "column block out of range");
        let mut out = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            out.extend_from_slice(&self.row(i)[start..start + width]);
        }
        Matrix::from_raw(self.rows, width, out)
    }

    /// Frobenius norm, accumulated in f64 for use in tests and reports.
    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }
}

/// Causal attention weights: non-negative, rows summing to one, and zero
/// above the causal diagonal.
///
/// Square matrices cover full-sequence attention. A matrix with more columns
/// than rows holds the last `rows` query positions of a longer sequence (the
/// incremental decoding case): row `i` may attend to columns `0..=i + offset`
/// where `offset = cols - rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct RowStochasticMatrix {
    inner: Matrix,
}

impl RowStochasticMatrix {
    pub const ROW_SUM_TOLERANCE: f32 = 1e-5;

    /// Validates an arbitrary matrix against the causal row-stochastic invariants.
    pub fn from_matrix(m: Matrix) -> Result<Self> {
        if m.cols < m.rows {
            return Err(Error::Shape(format!(
                "attention weights need cols >= rows, got {}x{}",
                m.rows, m.cols
            )));
        }
        let offset = m.cols - m.rows;
        for i in 0..m.rows {
            let row = m.row(i);
            let mut sum = 0.0f32;
            for (j, &w) in row.iter().enumerate() {
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Domain(format!("entry ({i},{j}) = {w} outside [0, 1]")));
                }
                if j > i + offset && w != 0.0 {
                    return Err(Error::Domain(format!("entry ({i},{j}) above the causal diagonal")));
                }
                sum += w;
            }
            if (sum - 1.0).abs() > Self::ROW_SUM_TOLERANCE {
                return Err(Error::Domain(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { inner: m })
    }

    /// One-hot causal matrix selecting each row's own position.
    pub fn diagonal(n: usize) -> Self {
        Self {
            inner: Matrix::identity(n),
        }
    }

    pub fn rows(&self) -> usize {
        self.inner.rows
    }

    pub fn cols(&self) -> usize {
        self.inner.cols
    }

    pub fn offset(&self) -> usize {
        self.inner.cols - self.inner.rows
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.inner.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.inner.row(i)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.inner
    }

    pub fn into_matrix(self) -> Matrix {
        self.inner
    }

    /// Entries on or below the causal diagonal, row by row.
    pub fn unmasked(&self) -> impl Iterator<Item = f32> + '_ {
        let offset = self.offset();
        (0..self.rows()).flat_map(move |i| self.row(i)[..=i + offset].iter().copied())
    }
}

/// `a · b` with each output element accumulated over the shared dimension in
/// ascending order.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        let acc = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let lhs = a.data[i * k + p];
            let rhs = &b.data[p * n..(p + 1) * n];
            for (o, &r) in acc.iter_mut().zip(rhs) {
                *o += lhs * r;
            }
        }
    }
    Ok(Matrix::from_raw(m, n, out))
}

/// `a · bᵀ` without materializing the transpose. Used for query/key scores.
pub fn matmul_transposed(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by transpose of {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Vec::with_capacity(a.rows * b.rows);
    for i in 0..a.rows {
        let lhs = a.row(i);
        for j in 0..b.rows {
            out.push(dot(lhs, b.row(j)));
        }
    }
    Ok(Matrix::from_raw(a.rows, b.rows, out))
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// Masked, max-stabilized softmax over a square score matrix.
///
/// Row `i` normalizes `scores[i][j] * scale` over `j <= i`; entries above the
/// diagonal are exactly zero.
pub fn causal_softmax(scores: &Matrix, scale: f32) -> Result<RowStochasticMatrix> {
    if scores.rows != scores.cols {
        return Err(Error::Shape(format!(
            "causal softmax needs square scores, got {}x{}",
            scores.rows, scores.cols
        )));
    }
    Ok(causal_softmax_counted(scores, scale).0)
}

/// Causal softmax over the trailing rows of a longer sequence
/// (`cols >= rows`, see [`RowStochasticMatrix`]). Also returns the number of
/// unmasked elements that were normalized.
pub fn causal_softmax_counted(scores: &Matrix, scale: f32) -> (RowStochasticMatrix, u64) {
    assert!(scores.cols >= scores.rows, "scores need cols >= rows");
    let offset = scores.cols - scores.rows;
    let mut out = vec![0.0f32; scores.data.len()];
    let mut unmasked = 0u64;
    for i in 0..scores.rows {
        let visible = i + offset + 1;
        let src = &scores.row(i)[..visible];
        let dst = &mut out[i * scores.cols..i * scores.cols + visible];
        let mut max = f32::NEG_INFINITY;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s * scale;
            max = max.max(*d);
        }
        let mut sum = 0.0f32;
        for d in dst.iter_mut() {
            *d = libm::expf(*d - max);
            sum += *d;
        }
        for d in dst.iter_mut() {
            *d /= sum;
        }
        unmasked += visible as u64;
    }
    (
        RowStochasticMatrix {
            inner: Matrix::from_raw(scores.rows, scores.cols, out),
        },
        unmasked,
    )
}

/// `gain ⊙ x / sqrt(mean(x²) + eps)`
pub fn rms_norm(x: &[f32], gain: &[f32], eps: f32) -> Result<Vec<f32>> {
    if x.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm input has {} entries, gain has {}",
            x.len(),
            gain.len()
        )));
    }
    if x.is_empty() {
        return Ok(Vec::new());
    }
    let mut ss = 0.0f32;
    for &v in x {
        ss += v * v;
    }
    let mean = ss / x.len() as f32;
    let denom = (mean + eps).sqrt();
    if denom == 0.0 {
        return Ok(vec![0.0; x.len()]);
    }
    Ok(x.iter().zip(gain).map(|(&v, &g)| g * (v / denom)).collect())
}

/// Rotates consecutive pairs `(x[2k], x[2k+1])` by
/// `position * theta_base^(-2k/d)`.
pub fn rope_rotate(x: &[f32], position: usize, theta_base: f32) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    rope_in_place(&mut out, position, theta_base)?;
    Ok(out)
}

pub(crate) fn rope_in_place(x: &mut [f32], position: usize, theta_base: f32) -> Result<()> {
    let d = x.len();
    if !d.is_multiple_of(2) {
        return Err(Error::Config(format!("rotary embedding needs an even head dim, got {d}")));
    }
    let pos = position as f32;
    for (k, pair) in x.chunks_exact_mut(2).enumerate() {
        let freq = libm::powf(theta_base, -((2 * k) as f32) / d as f32);
        let angle = pos * freq;
        let (sin, cos) = (libm::sinf(angle), libm::cosf(angle));
        let (a, b) = (pair[0], pair[1]);
        pair[0] = a * cos - b * sin;
        pair[1] = a * sin + b * cos;
    }
    Ok(())
}

/// `u·v / (‖u‖‖v‖)`, clamped to `[-1, 1]`.
pub fn cosine_similarity(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine similarity of vectors with lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let uv = dot(u, v);
    let uu = dot(u, u);
    let vv = dot(v, v);
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::UndefinedSimilarity);
    }
    // sqrt(uu * vv) rather than sqrt(uu) * sqrt(vv): identical inputs then give exactly 1.
    Ok((uv / (uu * vv).sqrt()).clamp(-1.0, 1.0))
}

/// Population variance.
pub fn variance(values: &[f32]) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Domain("variance of an empty set".into()));
    }
    let n = values.len() as f32;
    let mut sum = 0.0f32;
    for &v in values {
        sum += v;
    }
    let mean = sum / n;
    let mut ss = 0.0f32;
    for &v in values {
        let d = v - mean;
        ss += d * d;
    }
    Ok(ss / n)
}

pub(crate) fn silu(x: f32) -> f32 {
    x / (1.0 + libm::expf(-x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_zero_and_hand_product() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]);
        assert_eq!(matmul(&Matrix::identity(3), &a).unwrap(), a);
        assert_eq!(matmul(&a, &Matrix::identity(3)).unwrap(), a);

        let b = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&b, &Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));

        let c = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&b, &c).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
    }

    #[test]
    fn matmul_rejects_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn matrix_rejects_bad_construction() {
        assert!(matches!(Matrix::new(2, 2, vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(
            Matrix::new(1, 2, vec![0.0, f32::NAN]),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn softmax_first_row_is_one_hot() {
        let s = m(&[&[3.0, 9.0, -1.0], &[0.5, 0.1, 7.0], &[1.0, 2.0, 3.0]]);
        let a = causal_softmax(&s, 0.7).unwrap();
        assert_eq!(a.row(0), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_zero_scores_uniform_over_prefix() {
        let a = causal_softmax(&Matrix::zeros(4, 4), 1.0).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if j <= i { 1.0 / (i + 1) as f32 } else { 0.0 };
                assert!((a.get(i, j) - want).abs() < 1e-7, "({i},{j})");
            }
        }
    }

    #[test]
    fn softmax_hand_row() {
        let s = m(&[&[0.0, 0.0], &[2.0, 0.0]]);
        let a = causal_softmax(&s, 0.5).unwrap();
        let e = std::f64::consts::E;
        assert!((f64::from(a.get(1, 0)) - e / (e + 1.0)).abs() < 1e-6);
        assert!((f64::from(a.get(1, 1)) - 1.0 / (e + 1.0)).abs() < 1e-6);
        assert!((a.get(1, 0) - 0.7311).abs() < 1e-4);
    }

    #[test]
    fn softmax_rejects_non_square() {
        assert!(matches!(
            causal_softmax(&Matrix::zeros(2, 3), 1.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn softmax_counted_handles_trailing_rows() {
        let scores = m(&[&[0.0, 0.0, 0.0, 0.0]]);
        let (a, n) = causal_softmax_counted(&scores, 1.0);
        assert_eq!(n, 4);
        assert_eq!(a.offset(), 3);
        assert!(a.row(0).iter().all(|&w| (w - 0.25).abs() < 1e-7));
    }

    #[test]
    fn rms_norm_cases() {
        let ones = rms_norm(&[1.0; 5], &[1.0; 5], 1e-12).unwrap();
        assert!(ones.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert_eq!(rms_norm(&[0.0; 4], &[1.0; 4], 1e-5).unwrap(), vec![0.0; 4]);
        let y = rms_norm(&[3.0, 4.0], &[1.0, 1.0], 0.0).unwrap();
        let denom = 12.5f64.sqrt();
        assert!((f64::from(y[0]) - 3.0 / denom).abs() < 1e-6);
        assert!((f64::from(y[1]) - 4.0 / denom).abs() < 1e-6);
        assert!((y[0] - 0.8485).abs() < 1e-4 && (y[1] - 1.1314).abs() < 1e-4);
        assert!(matches!(rms_norm(&[1.0], &[1.0, 1.0], 1e-5), Err(Error::Shape(_))));
    }

    #[test]
    fn rope_cases() {
        let x = [0.3, -1.2, 2.5, 0.7];
        assert_eq!(rope_rotate(&x, 0, 10000.0).unwrap(), x.to_vec());
        let y = rope_rotate(&[1.0, 0.0], 1, 10000.0).unwrap();
        assert!((f64::from(y[0]) - 1f64.cos()).abs() < 1e-6);
        assert!((f64::from(y[1]) - 1f64.sin()).abs() < 1e-6);
        assert!(matches!(rope_rotate(&[1.0, 2.0, 3.0], 1, 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn cosine_cases() {
        assert_eq!(cosine_similarity(&[0.3, 0.4], &[0.3, 0.4]).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((f64::from(c) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-6);
        assert!(matches!(
            cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedSimilarity)
        ));
    }

    #[test]
    fn variance_cases() {
        assert_eq!(variance(&[2.5; 7]).unwrap(), 0.0);
        assert_eq!(variance(&[0.0, 1.0]).unwrap(), 0.25);
        assert_eq!(variance(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 1.25);
        assert!(matches!(variance(&[]), Err(Error::Domain(_))));
    }

    fn square(n: usize) -> impl Strategy<Value = Matrix> {
        prop::collection::vec(-20.0f32..20.0, n * n).prop_map(move |d| Matrix::new(n, n, d).unwrap())
    }

    proptest! {
        #[test]
        fn softmax_rows_stochastic_and_causal(s in (1usize..12).prop_flat_map(square), scale in 0.01f32..2.0) {
            let a = causal_softmax(&s, scale).unwrap();
            for i in 0..a.rows() {
                let sum: f32 = a.row(i).iter().sum();
                prop_assert!((sum - 1.0).abs() <= 1e-5);
                for j in 0..a.cols() {
                    let w = a.get(i, j);
                    prop_assert!((0.0..=1.0).contains(&w));
                    if j > i { prop_assert_eq!(w, 0.0); }
                }
            }
            prop_assert!(RowStochasticMatrix::from_matrix(a.into_matrix()).is_ok());
        }

        #[test]
        fn softmax_shift_invariant(s in (1usize..10).prop_flat_map(square), shift in -5.0f32..5.0, row in 0usize..10) {
            let n = s.rows();
            let row = row % n;
            let mut shifted = s.data().to_vec();
            for v in &mut shifted[row * n..(row + 1) * n] { *v += shift; }
            let shifted = Matrix::new(n, n, shifted).unwrap();
            let a = causal_softmax(&s, 1.0).unwrap();
            let b = causal_softmax(&shifted, 1.0).unwrap();
            for j in 0..n {
                prop_assert!((a.get(row, j) - b.get(row, j)).abs() <= 1e-6);
            }
        }

        #[test]
        fn identity_matmul_exact(s in (1usize..8).prop_flat_map(square)) {
            let n = s.rows();
            prop_assert_eq!(&matmul(&Matrix::identity(n), &s).unwrap(), &s);
            prop_assert_eq!(&matmul(&s, &Matrix::identity(n)).unwrap(), &s);
        }

        #[test]
        fn rope_preserves_pair_norms(x in prop::collection::vec(-1.0f32..1.0, 1..16), pos in 0usize..4096) {
            let mut x = x;
            if x.len() % 2 == 1 { x.push(0.5); }
            let y = rope_rotate(&x, pos, 10000.0).unwrap();
            for (a, b) in x.chunks(2).zip(y.chunks(2)) {
                let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
                let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
                prop_assert!((na - nb).abs() <= 1e-6);
            }
        }

        #[test]
        fn cosine_self_and_symmetry(u in prop::collection::vec(-10.0f32..10.0, 1..64), v in prop::collection::vec(-10.0f32..10.0, 1..64)) {
            prop_assume!(u.iter().any(|&x| x != 0.0));
            prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() <= 1e-6);
            let n = u.len().min(v.len());
            let (u, v) = (&u[..n], &v[..n]);
            prop_assume!(u.iter().any(|&x| x != 0.0) && v.iter().any(|&x| x != 0.0));
            prop_assert_eq!(cosine_similarity(u, v).unwrap(), cosine_similarity(v, u).unwrap());
        }
    }
}
