//! Pixel-space degradation operators `A` and noisy measurements `y = A(x) + v`.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::{CustomOp, NodeTag, Tape, Tensor, Var};

/// Default measurement noise on the `[-1, 1]` pixel scale.
pub const DEFAULT_SIGMA_Y: f64 = 0.02;
/// High-noise setting on the `[-1, 1]` pixel scale.
pub const HIGH_SIGMA_Y: f64 = 0.06;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DegradationKind {
    Identity,
    GaussianBlur { kernel_size: usize, sigma: f64 },
    Downsample { factor: usize },
    BoxInpaint { box_size: usize, fill: f64 },
    DctJpeg { quality: u32 },
}

impl DegradationKind {
    pub fn name(&self) -> &'static str {
        match self {
            DegradationKind::Identity => "identity",
            DegradationKind::GaussianBlur { .. } => "blur",
            DegradationKind::Downsample { .. } => "sr2",
            DegradationKind::BoxInpaint { .. } => "inpaint",
            DegradationKind::DctJpeg { .. } => "jpeg",
        }
    }

    /// Desk-scale defaults for an image of side `size`.
    pub fn default_for(name: &str, size: usize) -> Result<Self> {
        Ok(match name {
            "identity" => DegradationKind::Identity,
            "blur" => DegradationKind::GaussianBlur {
                kernel_size: 7,
                sigma: 1.0,
            },
            "sr2" => DegradationKind::Downsample { factor: 2 },
            "inpaint" => DegradationKind::BoxInpaint {
                box_size: size / 2,
                fill: 0.0,
            },
            "jpeg" => DegradationKind::DctJpeg { quality: 10 },
            other => {
                return Err(Error::Parse(format!(
                    "unknown degradation '{other}' (expected blur|sr2|inpaint|jpeg|identity)"
                )))
            }
        })
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A configured degradation for square images of a fixed side length.
#[derive(Clone, Debug)]
pub struct DegradationOp {
    kind: DegradationKind,
    size: usize,
    matrix: Option<Tensor>,
}

impl PartialEq for DegradationOp {
    fn eq(&self, other: &Self) -> bool {
        self.kind == other.kind && self.size == other.size
    }
}

impl DegradationOp {
    pub fn new(kind: DegradationKind, size: usize) -> Result<Self> {
        match kind {
            DegradationKind::GaussianBlur { kernel_size, sigma } => {
                if kernel_size % 2 == 0 || kernel_size / 2 >= size || sigma <= 0.0 {
                    return Err(Error::invalid(format!(
                        "blur kernel {kernel_size} / sigma {sigma} invalid for size {size}"
                    )));
                }
            }
            DegradationKind::Downsample { factor } => {
                if factor == 0 || size % factor != 0 {
                    return Err(Error::invalid(format!("factor {factor} does not divide {size}")));
                }
            }
            DegradationKind::BoxInpaint { box_size, .. } => {
                if box_size > size {
                    return Err(Error::invalid(format!("box {box_size} larger than image {size}")));
                }
            }
            DegradationKind::DctJpeg { quality } => {
                if size % 8 != 0 || !(1..=100).contains(&quality) {
                    return Err(Error::invalid(format!(
                        "jpeg needs size divisible by 8 and quality in 1..=100 (size {size}, quality {quality})"
                    )));
                }
            }
            DegradationKind::Identity => {}
        }
        let mut op = DegradationOp {
            kind,
            size,
            matrix: None,
        };
        if op.is_linear() {
            op.matrix = Some(op.build_matrix());
        }
        Ok(op)
    }

    pub fn from_name(name: &str, size: usize) -> Result<Self> {
        Self::new(DegradationKind::default_for(name, size)?, size)
    }

    pub fn kind(&self) -> DegradationKind {
        self.kind
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn input_dim(&self) -> usize {
        self.size * self.size
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            DegradationKind::Downsample { factor } => (self.size / factor).pow(2),
            _ => self.input_dim(),
        }
    }

    pub fn is_linear(&self) -> bool {
        match self.kind {
            DegradationKind::DctJpeg { .. } => false,
            DegradationKind::BoxInpaint { fill, .. } => fill == 0.0,
            _ => true,
        }
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::Dimension {
                what: "degradation input",
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let n = self.size;
        Ok(match self.kind {
            DegradationKind::Identity => x.to_vec(),
            DegradationKind::GaussianBlur { kernel_size, sigma } => {
                let kernel = gaussian_kernel(kernel_size, sigma);
                let half = (kernel_size / 2) as isize;
                let mut out = vec![0.0; n * n];
                for r in 0..n {
                    for c in 0..n {
                        let mut acc = 0.0;
                        for (kr, krow) in kernel.chunks_exact(kernel_size).enumerate() {
                            let sr = reflect(r as isize + kr as isize - half, n);
                            for (kc, &w) in krow.iter().enumerate() {
                                let sc = reflect(c as isize + kc as isize - half, n);
                                acc += w * x[sr * n + sc];
                            }
                        }
                        out[r * n + c] = acc;
                    }
                }
                out
            }
            DegradationKind::Downsample { factor } => {
                let m = n / factor;
                let w = 1.0 / (factor * factor) as f64;
                let mut out = vec![0.0; m * m];
                for r in 0..n {
                    for c in 0..n {
                        out[(r / factor) * m + c / factor] += w * x[r * n + c];
                    }
                }
                out
            }
            DegradationKind::BoxInpaint { box_size, fill } => {
                let mask = self.box_mask(box_size);
                x.iter().zip(&mask).map(|(&v, &keep)| if keep { v } else { fill }).collect()
            }
            DegradationKind::DctJpeg { quality } => jpeg_roundtrip(x, n, quality),
        })
    }

    /// Places a measurement on the pixel grid so that it can be encoded.
    /// Downsampled measurements are upsampled by pixel replication; every other
    /// kind already lives on the pixel grid.
    pub fn lift(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.output_dim() {
            return Err(Error::Dimension {
                what: "measurement",
                expected: self.output_dim(),
                actual: y.len(),
            });
        }
        Ok(match self.kind {
            DegradationKind::Downsample { factor } => {
                let n = self.size;
                let m = n / factor;
                (0..n * n).map(|i| y[(i / n / factor) * m + (i % n) / factor]).collect()
            }
            _ => y.to_vec(),
        })
    }

    /// `true` for pixels outside the inpainting box.
    fn box_mask(&self, box_size: usize) -> Vec<bool> {
        let n = self.size;
        let start = (n - box_size) / 2;
        let inside = |i: usize| (start..start + box_size).contains(&i);
        (0..n * n).map(|i| !(inside(i / n) && inside(i % n))).collect()
    }

    /// Pixels that survive the operator unchanged in position (inpainting only).
    pub fn observed_mask(&self) -> Option<Vec<bool>> {
        match self.kind {
            DegradationKind::BoxInpaint { box_size, .. } => Some(self.box_mask(box_size)),
            _ => None,
        }
    }

    /// Explicit `d' × d` matrix of a linear operator.
    pub fn as_matrix(&self) -> Result<&Tensor> {
        self.matrix.as_ref().ok_or_else(|| {
            Error::Unsupported(format!("{} is a nonlinear operator and has no matrix", self.kind))
        })
    }

    // Built from the operator's definition, independently of `apply`.
    fn build_matrix(&self) -> Tensor {
        let n = self.size;
        let d = n * n;
        let mut m = Tensor::zeros(&[self.output_dim(), d]);
        let cols = d;
        let data = m.data_mut();
        match self.kind {
            DegradationKind::Identity => {
                for i in 0..d {
                    data[i * cols + i] = 1.0;
                }
            }
            DegradationKind::GaussianBlur { kernel_size, sigma } => {
                let kernel = gaussian_kernel(kernel_size, sigma);
                let half = (kernel_size / 2) as isize;
                for r in 0..n {
                    for c in 0..n {
                        let row = r * n + c;
                        for kr in 0..kernel_size {
                            for kc in 0..kernel_size {
                                let sr = reflect(r as isize + kr as isize - half, n);
                                let sc = reflect(c as isize + kc as isize - half, n);
                                data[row * cols + sr * n + sc] += kernel[kr * kernel_size + kc];
                            }
                        }
                    }
                }
            }
            DegradationKind::Downsample { factor } => {
                let m_side = n / factor;
                let w = 1.0 / (factor * factor) as f64;
                for orow in 0..m_side * m_side {
                    let (br, bc) = (orow / m_side, orow % m_side);
                    for dr in 0..factor {
                        for dc in 0..factor {
                            data[orow * cols + (br * factor + dr) * n + bc * factor + dc] = w;
                        }
                    }
                }
            }
            DegradationKind::BoxInpaint { box_size, .. } => {
                for (i, keep) in self.box_mask(box_size).into_iter().enumerate() {
                    if keep {
                        data[i * cols + i] = 1.0;
                    }
                }
            }
            DegradationKind::DctJpeg { .. } => unreachable!("jpeg has no matrix"),
        }
        m
    }

    /// Traced application. Linear kinds multiply by their matrix; JPEG uses
    /// a straight-through gradient (quantization treated as identity).
    pub fn apply_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape.value(x).data())?;
        tape.scoped(NodeTag::Degradation, |tape| match &self.matrix {
            Some(m) => {
                let mv = tape.constant(m.clone());
                tape.matmul(mv, x)
            }
            None => {
                let value = Tensor::vector(self.apply(tape.value(x).data())?);
                Ok(tape.custom(x, value, Box::new(StraightThrough)))
            }
        })
    }
}

struct StraightThrough;

impl CustomOp for StraightThrough {
    fn name(&self) -> &'static str {
        "jpeg_straight_through"
    }

    fn vjp(&self, upstream: &Tensor) -> Tensor {
        upstream.clone()
    }
}

/// Symmetric reflection without repeating the edge sample: `-1 -> 1`, `n -> n - 2`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Normalized separable Gaussian kernel, row-major `size × size`.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut k: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    k
}

const LUMA_QUANT: [f64; 64] = [
    16., 11., 10., 16., 24., 40., 51., 61., //
    12., 12., 14., 19., 26., 58., 60., 55., //
    14., 13., 16., 24., 40., 57., 69., 56., //
    14., 17., 22., 29., 51., 87., 80., 62., //
    18., 22., 37., 56., 68., 109., 103., 77., //
    24., 35., 55., 64., 81., 104., 113., 92., //
    49., 64., 78., 87., 103., 121., 120., 101., //
    72., 92., 95., 98., 112., 100., 103., 99.,
];

/// Luminance quantization table scaled to `quality` with the IJG rule.
pub fn quant_table(quality: u32) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let scale = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut t = [0.0; 64];
    for (o, &b) in t.iter_mut().zip(&LUMA_QUANT) {
        *o = ((b * scale + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    t
}

/// Orthonormal 8-point DCT-II basis, `C[u][x]`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut c = [[0.0; 8]; 8];
    for (u, row) in c.iter_mut().enumerate() {
        let alpha = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = alpha * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    c
}

/// Forward 2-D DCT of every 8×8 block (level-shifted 8-bit scale), block-major.
pub fn block_dct(x: &[f64], n: usize) -> Vec<[f64; 64]> {
    let c = dct_basis();
    let mut blocks = Vec::with_capacity((n / 8) * (n / 8));
    for br in 0..n / 8 {
        for bc in 0..n / 8 {
            let mut b = [0.0; 64];
            for r in 0..8 {
                for col in 0..8 {
                    b[r * 8 + col] = (x[(br * 8 + r) * n + bc * 8 + col] + 1.0) * 127.5 - 128.0;
                }
            }
            // F = C B Cᵀ
            let mut tmp = [0.0; 64];
            for u in 0..8 {
                for col in 0..8 {
                    tmp[u * 8 + col] = (0..8).map(|r| c[u][r] * b[r * 8 + col]).sum();
                }
            }
            let mut f = [0.0; 64];
            for u in 0..8 {
                for v in 0..8 {
                    f[u * 8 + v] = (0..8).map(|col| tmp[u * 8 + col] * c[v][col]).sum();
                }
            }
            blocks.push(f);
        }
    }
    blocks
}

fn block_idct(blocks: &[[f64; 64]], n: usize) -> Vec<f64> {
    let c = dct_basis();
    let mut out = vec![0.0; n * n];
    for (bi, f) in blocks.iter().enumerate() {
        let (br, bc) = (bi / (n / 8), bi % (n / 8));
        // B = Cᵀ F C
        let mut tmp = [0.0; 64];
        for r in 0..8 {
            for v in 0..8 {
                tmp[r * 8 + v] = (0..8).map(|u| c[u][r] * f[u * 8 + v]).sum();
            }
        }
        for r in 0..8 {
            for col in 0..8 {
                let b: f64 = (0..8).map(|v| tmp[r * 8 + v] * c[v][col]).sum();
                let pixel = (b + 128.0).clamp(0.0, 255.0);
                out[(br * 8 + r) * n + bc * 8 + col] = pixel / 127.5 - 1.0;
            }
        }
    }
    out
}

fn jpeg_roundtrip(x: &[f64], n: usize, quality: u32) -> Vec<f64> {
    let q = quant_table(quality);
    let blocks: Vec<[f64; 64]> = block_dct(x, n)
        .into_iter()
        .map(|f| {
            let mut o = [0.0; 64];
            for i in 0..64 {
                o[i] = (f[i] / q[i]).round() * q[i];
            }
            o
        })
        .collect();
    block_idct(&blocks, n)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Measurement {
    /// Degraded pixels, length `op.output_dim()`.
    pub y: Vec<f64>,
    pub sigma_y: f64,
    pub op_kind: DegradationKind,
    pub source_seed: u64,
}

/// `y = A(x) + v` with `v ~ N(0, σ_y² I)` drawn from `seed`.
pub fn measure(op: &DegradationOp, x: &ImageSample, sigma_y: f64, seed: u64) -> Result<Measurement> {
    if !(sigma_y >= 0.0 && sigma_y.is_finite()) {
        return Err(Error::invalid(format!("sigma_y must be >= 0, got {sigma_y}")));
    }
    let mut y = op.apply(&x.pixels)?;
    if sigma_y > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, sigma_y).expect("positive std");
        for v in &mut y {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Measurement {
        y,
        sigma_y,
        op_kind: op.kind(),
        source_seed: seed,
    })
}

impl FromStr for DegradationKind {
    type Err = Error;

    /// Parses a kind name with default parameters for 16-pixel images.
    fn from_str(s: &str) -> Result<Self> {
        DegradationKind::default_for(s, 16)
    }
}
