use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{shape_err, CosError, Result};

/// Row-major dense tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() || shape.contains(&0) {
            return shape_err("new", format!("dimensions must be positive, got {shape:?}"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(
                "new",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            );
        }
        Ok(Self { shape, data })
    }

    /// Builds a tensor, rejecting non-finite entries.
    pub fn new_finite(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        t.ensure_finite("new")?;
        Ok(t)
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        assert!(
            !shape.is_empty() && !shape.contains(&0),
            "dimensions must be positive"
        );
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Standard normal entries multiplied by `std`.
    pub fn randn<R: Rng + ?Sized>(shape: impl Into<Vec<usize>>, std: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            let z: f64 = rng.sample(StandardNormal);
            *v = z * std;
        }
        t
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("from_rows", "ragged rows");
        }
        Self::new([rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Size of the trailing dimension.
    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one dimension")
    }

    /// Number of vectors along the trailing dimension.
    pub fn outer(&self) -> usize {
        self.numel() / self.last_dim()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let d = self.last_dim();
        &self.data[r * d..(r + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, op: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(CosError::NonFinite { op })
        }
    }

    pub(crate) fn expect_matrix(&self, op: &'static str) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return shape_err(op, format!("expected a matrix, got shape {:?}", self.shape));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.expect_matrix("matmul")?;
        let (k2, p) = other.expect_matrix("matmul")?;
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} · {k2}x{p}"));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (kk, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[kk * p..(kk + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        let t = Tensor {
            shape: vec![m, p],
            data: out,
        };
        t.ensure_finite("matmul")?;
        Ok(t)
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.expect_matrix("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    pub fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return shape_err(op, format!("{:?} vs {:?}", self.shape, other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        let t = Tensor {
            shape: self.shape.clone(),
            data,
        };
        t.ensure_finite(op)?;
        Ok(t)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Row-wise softmax over the trailing dimension.
    pub fn softmax_rows(&self) -> Result<Tensor> {
        self.ensure_finite("softmax_rows")?;
        let d = self.last_dim();
        let mut out = self.data.clone();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    /// Per-vector normalization over the trailing dimension followed by an
    /// affine map with `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        Ok(layer_norm_parts(self, gain, bias, eps)?.0)
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

/// Returns (output, normalized input, reciprocal std per vector).
pub(crate) fn layer_norm_parts(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    x.ensure_finite("layer_norm")?;
    let d = x.last_dim();
    if gain.shape() != [d] || bias.shape() != [d] {
        return shape_err(
            "layer_norm",
            format!(
                "trailing dim {d} vs gain {:?} / bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        );
    }
    let mut out = vec![0.0; x.numel()];
    let mut xhat = vec![0.0; x.numel()];
    let mut rstd = Vec::with_capacity(x.outer());
    for (r, row) in x.data.chunks(d).enumerate() {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd.push(rs);
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            xhat[r * d + j] = h;
            out[r * d + j] = h * gain.data[j] + bias.data[j];
        }
    }
    let t = Tensor {
        shape: x.shape.clone(),
        data: out,
    };
    t.ensure_finite("layer_norm")?;
    Ok((t, xhat, rstd))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn approx(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{x} vs {y}");
        }
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new([0, 2], vec![]).is_err());
        assert!(Tensor::new_finite([1], vec![f64::NAN]).is_err());
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::from_rows(&[&[1.5, -2.0], &[0.25, 4.0]]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_matmul() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[1.0], &[1.0]]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn([3, 4], 1.0, &mut rng);
        let b = Tensor::randn([4, 2], 1.0, &mut rng);
        let mut oracle = vec![0.0; 6];
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    oracle[i * 2 + j] += a.get2(i, k) * b.get2(k, j);
                }
            }
        }
        approx(a.matmul(&b).unwrap().data(), &oracle, 1e-12);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::zeros([2, 3]);
        assert!(matches!(
            a.matmul(&Tensor::zeros([2, 3])),
            Err(CosError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_uniform_and_shift() {
        let s = Tensor::zeros([1, 3]).softmax_rows().unwrap();
        approx(s.data(), &[1.0 / 3.0; 3], 1e-15);
        for c in [-50.0, 0.0, 3.5, 700.0] {
            let s = Tensor::new([1, 2], vec![c, c + 10.0])
                .unwrap()
                .softmax_rows()
                .unwrap();
            let r = Tensor::new([1, 2], vec![0.0, 10.0])
                .unwrap()
                .softmax_rows()
                .unwrap();
            approx(s.data(), r.data(), 1e-12);
        }
    }

    #[test]
    fn softmax_matches_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::randn([1, 6], 2.0, &mut rng);
        let denom: f64 = x.data().iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = x.data().iter().map(|v| v.exp() / denom).collect();
        approx(x.softmax_rows().unwrap().data(), &oracle, 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Tensor::new([1, 2], vec![0.0, f64::NAN]).unwrap();
        assert!(matches!(x.softmax_rows(), Err(CosError::NonFinite { .. })));
    }

    #[test]
    fn layer_norm_cases() {
        let g = Tensor::ones([4]);
        let b = Tensor::zeros([4]);
        let c = Tensor::filled([1, 4], 2.5).layer_norm(&g, &b, 1e-5).unwrap();
        approx(c.data(), &[0.0; 4], 0.0);

        let x = Tensor::new([1, 4], vec![-1.5, 0.5, 2.0, -1.0]).unwrap();
        let x5 = x.map(|v| 5.0 * v);
        let y = x.layer_norm(&g, &b, 0.0).unwrap();
        let y5 = x5.layer_norm(&g, &b, 0.0).unwrap();
        approx(y.data(), y5.data(), 1e-12);

        assert!(x.layer_norm(&Tensor::ones([3]), &b, 1e-5).is_err());
    }

    #[test]
    fn layer_norm_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::randn([1, 7], 3.0, &mut rng);
        let g = Tensor::randn([7], 1.0, &mut rng);
        let b = Tensor::randn([7], 1.0, &mut rng);
        let eps = 1e-5;
        let n = 7.0;
        let mean = x.data().iter().sum::<f64>() / n;
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let oracle: Vec<f64> = (0..7)
            .map(|j| (x.data()[j] - mean) / (var + eps).sqrt() * g.data()[j] + b.data()[j])
            .collect();
        approx(x.layer_norm(&g, &b, eps).unwrap().data(), &oracle, 1e-10);
    }
}
