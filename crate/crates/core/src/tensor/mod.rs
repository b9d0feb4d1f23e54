//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! The kernels in this module are shared by the tape (traced evaluation) and
//! by the untraced fast paths in the models, so both produce bit-identical
//! values. There is no implicit broadcasting: the only mixed-shape forms are
//! scalar scaling, the explicit row-bias add, and matrix-vector products.

mod tape;

pub use tape::{CustomOp, Gradients, NodeTag, Tape, Var};

use std::sync::Arc;

use crate::error::{Error, Result};

/// Cloning is cheap: storage is shared and copied on first write.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: Arc::new(vec![value]),
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data: Arc::new(data),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: Arc::new((0..n).map(&mut f).collect()),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_data(self) -> Vec<f64> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    same_shape(op, a, b)?;
    Ok(Tensor {
        shape: a.shape.clone(),
        data: Arc::new(a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect()),
    })
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    a.map(|v| v * c)
}

/// `[m, n] x [n, p] -> [m, p]` or `[m, n] x [n] -> [m]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let err = || Error::Shape {
        op: "matmul",
        lhs: a.shape.clone(),
        rhs: b.shape.clone(),
    };
    if a.rank() != 2 {
        return Err(err());
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    match b.rank() {
        1 => {
            if b.shape[0] != n {
                return Err(err());
            }
            let data = a
                .data
                .chunks_exact(n.max(1))
                .take(m)
                .map(|row| row.iter().zip(b.data.iter()).map(|(x, y)| x * y).sum())
                .collect();
            Ok(Tensor {
                shape: vec![m],
                data: Arc::new(data),
            })
        }
        2 => {
            if b.shape[0] != n {
                return Err(err());
            }
            let p = b.shape[1];
            let mut out = vec![0.0; m * p];
            for i in 0..m {
                let orow = &mut out[i * p..(i + 1) * p];
                for k in 0..n {
                    let aik = a.data[i * n + k];
                    if aik == 0.0 {
                        continue;
                    }
                    let brow = &b.data[k * p..(k + 1) * p];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += aik * bv;
                    }
                }
            }
            Ok(Tensor {
                shape: vec![m, p],
                data: Arc::new(out),
            })
        }
        _ => Err(err()),
    }
}

/// `a·bᵀ` for `[m, n] x [p, n] -> [m, p]` without materializing `bᵀ`.
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[1] {
        return Err(Error::Shape {
            op: "matmul_nt",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, n, p) = (a.shape[0], a.shape[1], b.shape[0]);
    let mut data = Vec::with_capacity(m * p);
    for arow in a.data.chunks_exact(n.max(1)).take(m) {
        for brow in b.data.chunks_exact(n.max(1)).take(p) {
            data.push(arow.iter().zip(brow).map(|(x, y)| x * y).sum());
        }
    }
    Ok(Tensor {
        shape: vec![m, p],
        data: Arc::new(data),
    })
}

/// `aᵀ·b` for `[m, n] x [m, p] -> [n, p]` without materializing `aᵀ`.
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[0] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul_tn",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, n, p) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; n * p];
    for i in 0..m {
        let brow = &b.data[i * p..(i + 1) * p];
        for (k, &aik) in a.data[i * n..(i + 1) * n].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bv) in out[k * p..(k + 1) * p].iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![n, p],
        data: Arc::new(out),
    })
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 {
        return Err(Error::Shape {
            op: "transpose",
            lhs: a.shape.clone(),
            rhs: vec![],
        });
    }
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = a.data[i * n + j];
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: Arc::new(data),
    })
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum())
}

pub fn mean(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum::<f64>() / a.len() as f64)
}

pub fn relu(a: &Tensor) -> Tensor {
    a.map(|v| v.max(0.0))
}

pub fn tanh(a: &Tensor) -> Tensor {
    a.map(f64::tanh)
}

pub fn l1(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().map(|v| v.abs()).sum())
}

pub fn l2norm(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().map(|v| v * v).sum::<f64>().sqrt())
}

pub fn clamp(a: &Tensor, lo: f64, hi: f64) -> Tensor {
    a.map(|v| v.clamp(lo, hi))
}

/// Adds a length-`n` bias to every row of a `[rows, n]` matrix.
pub fn add_bias(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || bias.rank() != 1 || a.shape[1] != bias.shape[0] {
        return Err(Error::Shape {
            op: "add_bias",
            lhs: a.shape.clone(),
            rhs: bias.shape.clone(),
        });
    }
    let n = bias.len();
    let mut out = a.clone();
    for row in out.data_mut().chunks_exact_mut(n) {
        for (o, b) in row.iter_mut().zip(bias.data.iter()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Concatenates two vectors, or two matrices with equal row counts along the
/// column axis.
pub fn concat(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match (a.rank(), b.rank()) {
        (1, 1) => {
            let mut data = a.data.to_vec();
            data.extend_from_slice(&b.data);
            Ok(Tensor::vector(data))
        }
        (2, 2) if a.shape[0] == b.shape[0] => {
            let (rows, p, q) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut data = Vec::with_capacity(rows * (p + q));
            for r in 0..rows {
                data.extend_from_slice(&a.data[r * p..(r + 1) * p]);
                data.extend_from_slice(&b.data[r * q..(r + 1) * q]);
            }
            Ok(Tensor {
                shape: vec![rows, p + q],
                data: Arc::new(data),
            })
        }
        _ => Err(Error::Shape {
            op: "concat",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        }),
    }
}

/// Splits the last axis of `a` at `at`, inverse of [`concat`].
fn split_last(a: &Tensor, at: usize) -> (Tensor, Tensor) {
    match a.rank() {
        1 => (
            Tensor::vector(a.data[..at].to_vec()),
            Tensor::vector(a.data[at..].to_vec()),
        ),
        _ => {
            let (rows, cols) = (a.shape[0], a.shape[1]);
            let q = cols - at;
            let mut left = Vec::with_capacity(rows * at);
            let mut right = Vec::with_capacity(rows * q);
            for row in a.data.chunks_exact(cols) {
                left.extend_from_slice(&row[..at]);
                right.extend_from_slice(&row[at..]);
            }
            (
                Tensor {
                    shape: vec![rows, at],
                    data: Arc::new(left),
                },
                Tensor {
                    shape: vec![rows, q],
                    data: Arc::new(right),
                },
            )
        }
    }
}

/// Central finite-difference gradient of a scalar function.
pub fn finite_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`, or 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Largest singular value of a matrix by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Tensor, iters: usize) -> f64 {
    let mt = transpose(m).expect("rank-2 matrix");
    let mut v = Tensor::vector((0..m.cols()).map(|i| 1.0 + (i as f64 * 0.618).sin() * 0.1).collect());
    let mut norm = 0.0;
    for _ in 0..iters {
        let w = matmul(&mt, &matmul(m, &v).expect("conforming")).expect("conforming");
        let nw = l2norm(&w).item();
        if nw == 0.0 {
            return 0.0;
        }
        norm = nw.sqrt();
        v = scale(&w, 1.0 / nw);
    }
    norm
}
