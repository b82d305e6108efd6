//! Dense row-major tensors and the numeric kernels built on them.
//!
//! Every tensor is two-dimensional; flat vectors are 1 x n rows and scalars
//! are 1 x 1. Reduction order is pinned so results are reproducible bit for
//! bit: each output element of a reduction is a single accumulator updated in
//! ascending index order, and no kernel relies on fused multiply-add.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} tensor needs {} elements, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![F::zero(); rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn scalar(v: F) -> Self {
        Tensor {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn row(data: Vec<F>) -> Self {
        Tensor {
            rows: 1,
            cols: data.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> F {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: F) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row_slice(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Scalar value of a 1 x 1 tensor.
    pub fn item(&self) -> F {
        assert_eq!(self.data.len(), 1, "item() requires a 1x1 tensor");
        self.data[0]
    }

    /// True when both tensors have the same shape and identical bit patterns.
    /// Stricter than `==` for floats (distinguishes -0.0, compares NaN bits).
    pub fn bits_eq(&self, other: &Tensor<F>) -> bool {
        self.rows == other.rows
            && self.cols == other.cols
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.bit_pattern() == b.bit_pattern())
    }

    pub fn has_non_finite(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor<F>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{}: {}x{} vs {}x{}",
                op, self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor<F>, op: &str, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        self.check_same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor<F>) -> Result<Tensor<F>> {
        self.zip_with(other, "div", |a, b| a / b)
    }

    /// Accumulate `other` into `self` elementwise. Used for gradient buffers.
    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Tensor<F> {
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, c: F) -> Tensor<F> {
        self.map(|v| v * c)
    }

    pub fn one_minus(&self) -> Tensor<F> {
        self.map(|v| F::one() - v)
    }

    pub fn tanh(&self) -> Tensor<F> {
        self.map(|v| v.tanh())
    }

    pub fn sigmoid(&self) -> Tensor<F> {
        self.map(sigmoid_scalar)
    }

    /// Matrix product with a pinned evaluation order.
    ///
    /// Each output element is one accumulator summed over ascending k, exactly
    /// the textbook triple loop. The loops are arranged i-k-j so the inner
    /// loop is vectorizable, which reorders elements across the output row but
    /// never reorders the additions within a single element.
    pub fn matmul(&self, rhs: &Tensor<F>) -> Result<Tensor<F>> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, rhs.cols);
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let lrow = &self.data[i * k..(i + 1) * k];
            let orow = &mut out[i * n..(i + 1) * n];
            for (kk, &lik) in lrow.iter().enumerate() {
                let rrow = &rhs.data[kk * n..(kk + 1) * n];
                for j in 0..n {
                    orow[j] = orow[j] + lik * rrow[j];
                }
            }
        }
        Ok(Tensor {
            rows: m,
            cols: n,
            data: out,
        })
    }

    pub fn transposed(&self) -> Tensor<F> {
        // A row or column vector transposes by relabeling the shape.
        if self.rows == 1 || self.cols == 1 {
            return Tensor {
                rows: self.cols,
                cols: self.rows,
                data: self.data.clone(),
            };
        }
        let mut data = vec![F::zero(); self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Sum of all elements in ascending index order, as a 1 x 1 tensor.
    pub fn sum(&self) -> Tensor<F> {
        let mut acc = F::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        Tensor::scalar(acc)
    }

    /// Sum of squares in ascending index order.
    pub fn sum_squares(&self) -> F {
        let mut acc = F::zero();
        for &v in &self.data {
            acc = acc + v * v;
        }
        acc
    }

    /// Softmax over the whole buffer, shape preserved. Inputs are shifted by
    /// their maximum before exponentiation so large values cannot overflow.
    pub fn softmax(&self) -> Tensor<F> {
        assert!(!self.data.is_empty(), "softmax of an empty tensor");
        let m = self.max_element();
        let mut out: Vec<F> = self.data.iter().map(|&v| (v - m).exp()).collect();
        let mut z = F::zero();
        for &e in &out {
            z = z + e;
        }
        for e in &mut out {
            *e = *e / z;
        }
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: out,
        }
    }

    /// Log-softmax over the whole buffer: (x - max) - ln(sum exp(x - max)).
    pub fn log_softmax(&self) -> Tensor<F> {
        assert!(!self.data.is_empty(), "log_softmax of an empty tensor");
        let m = self.max_element();
        let mut z = F::zero();
        for &v in &self.data {
            z = z + (v - m).exp();
        }
        let lz = z.ln();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| (v - m) - lz).collect(),
        }
    }

    fn max_element(&self) -> F {
        let mut m = self.data[0];
        for &v in &self.data[1..] {
            if v > m {
                m = v;
            }
        }
        m
    }

    /// Concatenate flat buffers into a single row, in argument order.
    pub fn concat(parts: &[&Tensor<F>]) -> Tensor<F> {
        let total = parts.iter().map(|p| p.len()).sum();
        let mut data = Vec::with_capacity(total);
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Tensor::row(data)
    }

    /// Contiguous slice of the flat buffer as a 1 x len row.
    pub fn slice_flat(&self, offset: usize, len: usize) -> Result<Tensor<F>> {
        if offset + len > self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "slice [{}, {}) out of bounds for {} elements",
                offset,
                offset + len,
                self.data.len()
            )));
        }
        Ok(Tensor::row(self.data[offset..offset + len].to_vec()))
    }

    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Tensor<F>> {
        if rows * cols != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "reshape {}x{} to {}x{}",
                self.rows, self.cols, rows, cols
            )));
        }
        Ok(Tensor {
            rows,
            cols,
            data: self.data.clone(),
        })
    }

    /// Copy of row `r` as a 1 x cols tensor (embedding lookup).
    pub fn pick_row(&self, r: usize) -> Result<Tensor<F>> {
        if r >= self.rows {
            return Err(Error::ShapeMismatch(format!(
                "row {} out of bounds for {} rows",
                r, self.rows
            )));
        }
        Ok(Tensor::row(self.row_slice(r).to_vec()))
    }
}

/// Numerically stable logistic function: never exponentiates a positive
/// argument, so there is no overflow anywhere in the representable range.
pub fn sigmoid_scalar<F: Scalar>(x: F) -> F {
    let one = F::one();
    if x >= F::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Textbook triple loop with a local accumulator; the reference the fast
    /// kernel must match bit for bit.
    fn matmul_oracle(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop_oracle_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let m = rng.gen_range(1..8);
            let k = rng.gen_range(1..8);
            let n = rng.gen_range(1..8);
            let a = random_tensor(&mut rng, m, k);
            let b = random_tensor(&mut rng, k, n);
            let fast = a.matmul(&b).unwrap();
            let slow = matmul_oracle(&a, &b);
            assert!(fast.bits_eq(&slow), "mismatch at {}x{}x{}", m, k, n);
        }
    }

    #[test]
    fn matmul_known_values() {
        let a = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);

        let one = Tensor::scalar(3.0f64);
        let two = Tensor::scalar(4.0f64);
        assert_eq!(one.matmul(&two).unwrap().item(), 12.0);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(2, 3);
        let b = Tensor::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn elementwise_ops_match_scalar_arithmetic() {
        let a = Tensor::new(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        let b = Tensor::new(1, 3, vec![4.0, 0.25, -1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[5.0, -1.75, -0.5]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-3.0, -2.25, 1.5]);
        assert_eq!(a.mul(&b).unwrap().data(), &[4.0, -0.5, -0.5]);
        assert_eq!(a.div(&b).unwrap().data(), &[0.25, -8.0, -0.5]);
        assert_eq!(a.one_minus().data(), &[0.0, 3.0, 0.5]);
        assert_eq!(a.scale(2.0).data(), &[2.0, -4.0, 1.0]);
        assert!(a.add(&Tensor::zeros(3, 1)).is_err());
    }

    #[test]
    fn sigmoid_is_stable_and_correct() {
        // Direct formula as oracle in the range where it does not overflow.
        for x in [-30.0, -4.0, -0.5, 0.0, 0.5, 4.0, 30.0] {
            let got = sigmoid_scalar(x);
            let want = 1.0 / (1.0 + (-x as f64).exp());
            assert!((got - want).abs() <= 1e-15, "x={x}: {got} vs {want}");
        }
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        // Extreme arguments saturate without producing NaN or infinity.
        assert_eq!(sigmoid_scalar(700.0f64), 1.0);
        let tiny = sigmoid_scalar(-700.0f64);
        assert!(tiny.is_finite() && tiny > 0.0 && tiny < 1e-300);
        assert!((sigmoid_scalar(88.0f32) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::new(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let s = x.softmax();
        let z: f64 = (1.0f64 - 3.0).exp() + (2.0f64 - 3.0).exp() + 1.0;
        let want = [
            (1.0f64 - 3.0).exp() / z,
            (2.0f64 - 3.0).exp() / z,
            1.0 / z,
        ];
        for (g, w) in s.data().iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_handles_large_inputs_and_constants() {
        let x = Tensor::new(1, 4, vec![1000.0, 1000.0, 999.0, 998.0]).unwrap();
        let s = x.softmax();
        assert!(!s.has_non_finite());
        let total: f64 = s.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);

        let c = Tensor::filled(1, 5, 42.0f64).softmax();
        for &v in c.data() {
            assert_eq!(v, 0.2);
        }
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax() {
        let x = Tensor::<f64>::new(1, 4, vec![0.3, -1.2, 2.0, 0.0]).unwrap();
        let ls = x.log_softmax();
        let s = x.softmax();
        for (&l, &p) in ls.data().iter().zip(s.data()) {
            assert!((l - p.ln()).abs() < 1e-12);
        }
        // exp of log-probabilities is a distribution.
        let total: f64 = ls.data().iter().map(|&v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn transpose_roundtrip_and_values() {
        let a = Tensor::new(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = a.transposed();
        assert_eq!(t.shape(), (3, 2));
        assert_eq!(t.data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(t.transposed().bits_eq(&a));

        let r = Tensor::row(vec![1.0, 2.0]);
        assert_eq!(r.transposed().shape(), (2, 1));
        assert_eq!(r.transposed().data(), &[1.0, 2.0]);
    }

    #[test]
    fn concat_slice_reshape_pick_row() {
        let a = Tensor::row(vec![1.0, 2.0]);
        let b = Tensor::row(vec![3.0]);
        let c = Tensor::concat(&[&a, &b]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        assert!(c.slice_flat(1, 2).unwrap().bits_eq(&Tensor::row(vec![2.0, 3.0])));
        assert!(c.slice_flat(2, 2).is_err());

        let m = c.reshape(3, 1).unwrap();
        assert_eq!(m.shape(), (3, 1));
        assert!(c.reshape(2, 2).is_err());

        let e = Tensor::new(2, 2, vec![9.0, 8.0, 7.0, 6.0]).unwrap();
        assert_eq!(e.pick_row(1).unwrap().data(), &[7.0, 6.0]);
        assert!(e.pick_row(2).is_err());
    }

    #[test]
    fn sum_is_ascending_order() {
        let a = Tensor::row(vec![1e16, 1.0, -1e16]);
        // (1e16 + 1) + -1e16 == 0.0 exactly in f64 given rounding of the
        // first addition; a different order would give 1.0.
        assert_eq!(a.sum().item(), 0.0);
        assert_eq!(Tensor::row(vec![2.0f64, 3.0]).sum_squares(), 13.0);
    }

    #[test]
    fn f32_construction_and_kernels() {
        let a = Tensor::<f32>::new(1, 2, vec![0.5, -1.5]).unwrap();
        let b = Tensor::<f32>::new(2, 1, vec![2.0, 2.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().item(), -2.0f32);
        assert!((a.sigmoid().data()[0] - 0.62245935).abs() < 1e-6);
    }
}
