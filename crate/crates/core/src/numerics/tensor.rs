use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Dense row-major tensor of `f64` values.
///
/// Rank 1 and rank 2 cover everything this crate needs; shape is kept as a
/// vector so values round-trip through serialization unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dimension(
                "Tensor::new",
                format!("{} values for shape {:?}", numel, shape),
                data.len(),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged rows");
            data.extend_from_slice(r);
        }
        Tensor {
            shape: vec![n, d],
            data,
        }
    }

    /// Fills with U(-limit, limit) where `limit = sqrt(1/fan_in)`.
    pub fn fan_in_init(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Self {
        let limit = (1.0 / fan_in as f64).sqrt();
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Interprets the tensor as a matrix, treating rank 1 as a single row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            2 => Ok((self.shape[0], self.shape[1])),
            1 => Ok((1, self.shape[0])),
            r => Err(Error::dimension("dims2", "rank 1 or 2", format!("rank {r}"))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let (_, d) = self.dims2().expect("row on non-matrix");
        &self.data[i * d..(i + 1) * d]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        let (_, d) = self.dims2().expect("at on non-matrix");
        self.data[i * d + j]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

/// Sums `terms` after sorting them into canonical value order.
///
/// Any permutation of the same multiset of values produces the bit-identical
/// result. Used for reductions whose operands may arrive in arbitrary order
/// (position-axis softmax denominators, key/value contractions).
pub fn ordered_sum(terms: &mut [f64]) -> f64 {
    terms.sort_unstable_by(f64::total_cmp);
    terms.iter().sum()
}

/// `[m×k]·[k×n]` matrix product; the contraction runs in fixed k-order.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dimension(
            "matmul",
            format!("inner dim {k}"),
            format!("{k2}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// Matrix product whose per-element contraction uses [`ordered_sum`], so the
/// result is invariant under joint permutation of A's columns and B's rows.
pub fn matmul_ordered(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::dimension(
            "matmul_ordered",
            format!("inner dim {k}"),
            format!("{k2}"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let mut buf = vec![0.0; k];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            for p in 0..k {
                buf[p] = arow[p] * b.data[p * n + j];
            }
            out[i * n + j] = ordered_sum(&mut buf);
        }
    }
    Tensor::new(vec![m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let i2 = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let c = matmul(&i2, &b).unwrap();
        assert_eq!(c.data(), b.data());
    }

    #[test]
    fn matmul_projector_selects_row() {
        let p = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]);
        let b = Tensor::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        let c = matmul(&p, &b).unwrap();
        assert_eq!(c.data(), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn ordered_sum_is_permutation_invariant() {
        let vals = [0.1, -3.7, 2.5e-3, 1.0 / 3.0, 9.9, -0.25];
        let mut a = vals;
        let mut b = [vals[3], vals[5], vals[0], vals[4], vals[2], vals[1]];
        assert_eq!(
            ordered_sum(&mut a).to_bits(),
            ordered_sum(&mut b).to_bits()
        );
    }

    #[test]
    fn matmul_ordered_matches_matmul_closely() {
        let mut rng = crate::numerics::tests_rng(7);
        let a = Tensor::fan_in_init(&[3, 5], 5, &mut rng);
        let b = Tensor::fan_in_init(&[5, 4], 5, &mut rng);
        let c1 = matmul(&a, &b).unwrap();
        let c2 = matmul_ordered(&a, &b).unwrap();
        for (x, y) in c1.data().iter().zip(c2.data()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let mut rng = crate::numerics::tests_rng(3);
        let a = Tensor::fan_in_init(&[4, 7], 7, &mut rng);
        let back = a.transpose().unwrap().transpose().unwrap();
        assert_eq!(a, back);
    }
}
