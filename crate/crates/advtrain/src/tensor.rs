//! Dense 2-D tensor of 64-bit reals.
//!
//! Row-major storage, immutable after construction. Construction validates
//! that every element is finite; arithmetic on finite operands of training
//! magnitude keeps it that way, and the training loop independently checks
//! every loss value so a blow-up is reported instead of propagated.

use crate::error::{Error, Result};
use crate::matmul::matmul_dispatch;

/// Dense rows x cols matrix, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor({}x{}", self.rows, self.cols)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

/// Closed catalog of elementwise scalar functions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScalarFn {
    /// max(x, slope*x) for slope in [0,1).
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    /// -1, 0, +1 with sign(0) = 0.
    Sign,
    Add(f64),
    Mul(f64),
}

impl ScalarFn {
    /// Resolve a function by name. `param` feeds the parameterized entries
    /// and must be absent for the rest.
    pub fn parse(name: &str, param: Option<f64>) -> Result<ScalarFn> {
        match (name, param) {
            ("leaky_relu", Some(s)) => Ok(ScalarFn::LeakyRelu(s)),
            ("relu", None) => Ok(ScalarFn::Relu),
            ("sigmoid", None) => Ok(ScalarFn::Sigmoid),
            ("sign", None) => Ok(ScalarFn::Sign),
            ("add", Some(c)) => Ok(ScalarFn::Add(c)),
            ("mul", Some(c)) => Ok(ScalarFn::Mul(c)),
            ("leaky_relu" | "add" | "mul", None) => Err(Error::Config(format!(
                "scalar function '{name}' requires a parameter"
            ))),
            ("relu" | "sigmoid" | "sign", Some(_)) => Err(Error::Config(format!(
                "scalar function '{name}' takes no parameter"
            ))),
            _ => Err(Error::Config(format!("unknown scalar function '{name}'"))),
        }
    }

    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            ScalarFn::LeakyRelu(slope) => {
                if x < 0.0 {
                    slope * x
                } else {
                    x
                }
            }
            ScalarFn::Relu => {
                if x < 0.0 {
                    0.0
                } else {
                    x
                }
            }
            ScalarFn::Sigmoid => sigmoid(x),
            ScalarFn::Sign => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            ScalarFn::Add(c) => x + c,
            ScalarFn::Mul(c) => x * c,
        }
    }
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Tensor {
        Tensor {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Build from row-major data. Rejects length mismatches and non-finite
    /// elements.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Tensor> {
        if data.len() != rows * cols {
            return Err(Error::Data(format!(
                "tensor data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Data(
                "tensor data contains non-finite values".to_string(),
            ));
        }
        Ok(Tensor { rows, cols, data })
    }

    /// Test convenience: build from nested rows, panicking on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Tensor {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flatten().copied().collect();
        Tensor::from_vec(r, c, data).expect("finite row data")
    }

    pub fn identity(n: usize) -> Tensor {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Matrix product. The summation order per output element is fixed
    /// (inner index ascending), so results are reproducible bit for bit.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = Tensor::zeros(self.rows, other.cols);
        matmul_dispatch(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        Ok(out)
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = Tensor::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Elementwise application of a cataloged scalar function.
    pub fn map(&self, f: ScalarFn) -> Tensor {
        let data = self.data.iter().map(|&x| f.apply(x)).collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
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

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(ScalarFn::Mul(c))
    }

    /// Add a 1 x cols bias row to every row.
    pub fn add_row(&self, bias: &Tensor) -> Result<Tensor> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::shape("add_row", self.shape(), bias.shape()));
        }
        let mut out = self.clone();
        for i in 0..self.rows {
            let row = &mut out.data[i * self.cols..(i + 1) * self.cols];
            for (o, &b) in row.iter_mut().zip(&bias.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Sum each column into a 1 x cols row vector.
    pub fn column_sums(&self) -> Tensor {
        let mut out = Tensor::zeros(1, self.cols);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j] += self.data[i * self.cols + j];
            }
        }
        out
    }

    /// Clamp every element into [0, 1].
    pub fn clamp01(&self) -> Tensor {
        let data = self.data.iter().map(|&x| x.clamp(0.0, 1.0)).collect();
        Tensor {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }

    /// New tensor holding the given rows in the given order.
    pub fn select_rows(&self, indices: &[usize]) -> Tensor {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Tensor {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stack two tensors with equal column counts on top of each other.
    pub fn vstack(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols != other.cols {
            return Err(Error::shape("vstack", self.shape(), other.shape()));
        }
        let mut data = Vec::with_capacity((self.rows + other.rows) * self.cols);
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Ok(Tensor {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    /// Largest absolute elementwise difference; shapes must match.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
