//! Small fully-connected networks and an Adam optimizer, built on the tape.

use rand::Rng;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::tensor::{self, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parse(format!("unknown activation '{other}'"))),
        }
    }
}

/// Affine layer `x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        Dense {
            weight: Tensor::from_fn(&[fan_in, fan_out], |_| rng.random_range(-limit..limit)),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Dense {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[fan_out]),
        }
    }

    fn eval(&self, x: &Tensor) -> Result<Tensor> {
        tensor::add_bias(&tensor::matmul(x, &self.weight)?, &self.bias)
    }
}

/// Multi-layer perceptron with an optional affine bypass from input to output.
///
/// The output layer and the bypass start at zero, so an untrained network
/// predicts exactly zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
    skip: Option<Dense>,
    activation: Activation,
}

/// Tape handles for an [`Mlp`]'s parameters, in [`Mlp::parameters`] order.
#[derive(Clone, Debug)]
pub struct MlpVars {
    vars: Vec<Var>,
}

impl MlpVars {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Mlp {
    /// `sizes` lists layer widths from input to output, e.g. `[34, 128, 128, 32]`.
    pub fn new(sizes: &[usize], activation: Activation, skip: bool, rng: &mut impl Rng) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::invalid(format!("bad layer sizes {sizes:?}")));
        }
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| {
                if i + 1 == n {
                    Dense::zeros(sizes[i], sizes[i + 1])
                } else {
                    Dense::glorot(sizes[i], sizes[i + 1], rng)
                }
            })
            .collect();
        let skip = skip.then(|| Dense::zeros(sizes[0], sizes[n]));
        Ok(Mlp {
            layers,
            skip,
            activation,
        })
    }

    /// Rescales the first layer so that inputs with per-feature `mean`/`std`
    /// enter the first activation standardized. Only changes initialization.
    pub fn standardize_inputs(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        let first = &mut self.layers[0];
        let (fan_in, fan_out) = (first.weight.rows(), first.weight.cols());
        if mean.len() != fan_in || std.len() != fan_in {
            return Err(Error::Dimension {
                what: "input statistics",
                expected: fan_in,
                actual: mean.len(),
            });
        }
        let w = first.weight.data_mut();
        for i in 0..fan_in {
            let s = if std[i] > 1e-8 { 1.0 / std[i] } else { 1.0 };
            for j in 0..fan_out {
                w[i * fan_out + j] *= s;
            }
        }
        let mut bias = vec![0.0; fan_out];
        for i in 0..fan_in {
            for j in 0..fan_out {
                bias[j] -= mean[i] * w[i * fan_out + j];
            }
        }
        first.bias = Tensor::vector(bias);
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.cols())
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn has_skip(&self) -> bool {
        self.skip.is_some()
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter().chain(self.skip.as_ref()) {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut().chain(self.skip.as_mut()) {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.len()).sum()
    }

    /// Places the parameters on `tape`, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let vars = self
            .parameters()
            .into_iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        MlpVars { vars }
    }

    fn activate(&self, tape: &mut Tape, v: Var) -> Var {
        match self.activation {
            Activation::Tanh => tape.tanh(v),
            Activation::Relu => tape.relu(v),
        }
    }

    fn activate_value(&self, t: &Tensor) -> Tensor {
        match self.activation {
            Activation::Tanh => tensor::tanh(t),
            Activation::Relu => tensor::relu(t),
        }
    }

    /// Traced forward pass on a `[batch, in]` input.
    pub fn forward(&self, tape: &mut Tape, params: &MlpVars, input: Var) -> Result<Var> {
        let n = self.layers.len();
        let mut h = input;
        for i in 0..n {
            let (w, b) = (params.vars[2 * i], params.vars[2 * i + 1]);
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if i + 1 < n {
                h = self.activate(tape, h);
            }
        }
        if self.skip.is_some() {
            let (w, b) = (params.vars[2 * n], params.vars[2 * n + 1]);
            let lin = tape.matmul(input, w)?;
            let s = tape.add_bias(lin, b)?;
            h = tape.add(h, s)?;
        }
        Ok(h)
    }

    /// Untraced forward pass; bit-identical to [`Mlp::forward`].
    pub fn predict(&self, input: &Tensor) -> Result<Tensor> {
        let n = self.layers.len();
        let mut h = input.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.eval(&h)?;
            if i + 1 < n {
                h = self.activate_value(&h);
            }
        }
        if let Some(skip) = &self.skip {
            h = tensor::add(&h, &skip.eval(input)?)?;
        }
        Ok(h)
    }

    pub fn gradients(&self, tape: &Tape, params: &MlpVars, grads: &Gradients) -> Vec<Tensor> {
        params.vars.iter().map(|&v| grads.wrt(tape, v)).collect()
    }

    pub fn save(&self, ckpt: &mut Checkpoint, prefix: &str) {
        ckpt.set_meta(format!("{prefix}.activation"), self.activation.name());
        ckpt.set_meta(format!("{prefix}.layers"), self.layers.len().to_string());
        ckpt.set_meta(format!("{prefix}.skip"), self.skip.is_some().to_string());
        for (i, l) in self.layers.iter().enumerate() {
            ckpt.insert(format!("{prefix}.layer{i}.weight"), l.weight.clone());
            ckpt.insert(format!("{prefix}.layer{i}.bias"), l.bias.clone());
        }
        if let Some(s) = &self.skip {
            ckpt.insert(format!("{prefix}.skip.weight"), s.weight.clone());
            ckpt.insert(format!("{prefix}.skip.bias"), s.bias.clone());
        }
    }

    pub fn load(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let activation = Activation::parse(ckpt.meta(&format!("{prefix}.activation"))?)?;
        let n: usize = ckpt.meta_parse(&format!("{prefix}.layers"))?;
        let has_skip: bool = ckpt.meta_parse(&format!("{prefix}.skip"))?;
        let dense = |name: &str| -> Result<Dense> {
            let weight = ckpt.array(&format!("{prefix}.{name}.weight"))?.clone();
            let bias = ckpt.array(&format!("{prefix}.{name}.bias"))?.clone();
            if weight.rank() != 2 || bias.rank() != 1 || weight.cols() != bias.len() {
                return Err(Error::Checkpoint(format!("inconsistent layer {prefix}.{name}")));
            }
            Ok(Dense { weight, bias })
        };
        let layers = (0..n)
            .map(|i| dense(&format!("layer{i}")))
            .collect::<Result<Vec<_>>>()?;
        for pair in layers.windows(2) {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::Checkpoint(format!("layer widths do not chain in {prefix}")));
            }
        }
        let skip = has_skip.then(|| dense("skip")).transpose()?;
        Ok(Mlp {
            layers,
            skip,
            activation,
        })
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: i32,
}

impl Adam {
    pub fn new(params: &[&Tensor]) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            steps: 0,
        }
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Cosine decay from `lr` to `lr · floor` over `total` steps.
pub fn cosine_lr(lr: f64, floor: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total.max(1) as f64;
    let cos = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    lr * (floor + (1.0 - floor) * cos)
}

/// Per-column mean and standard deviation of a `[rows, cols]` matrix.
pub fn column_stats(data: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (rows, cols) = (data.rows(), data.cols());
    let mut mean = vec![0.0; cols];
    for row in data.data().chunks_exact(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v / rows as f64;
        }
    }
    let mut var = vec![0.0; cols];
    for row in data.data().chunks_exact(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m).powi(2) / rows as f64;
        }
    }
    (mean, var.into_iter().map(f64::sqrt).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_mlp(seed: u64) -> Mlp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mlp = Mlp::new(&[3, 8, 8, 2], Activation::Tanh, true, &mut rng).unwrap();
        for p in mlp.parameters_mut() {
            for v in p.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
        mlp
    }

    #[test]
    fn untrained_network_outputs_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&[4, 16, 3], Activation::Relu, true, &mut rng).unwrap();
        let out = mlp.predict(&Tensor::from_fn(&[5, 4], |i| i as f64)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn traced_and_untraced_forward_agree_bitwise() {
        let mlp = random_mlp(3);
        let x = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).sin());
        let mut tape = Tape::new();
        let params = mlp.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let out = mlp.forward(&mut tape, &params, input).unwrap();
        assert_eq!(tape.value(out), &mlp.predict(&x).unwrap());
    }

    #[test]
    fn standardize_inputs_preserves_shapes_and_centers() {
        let mut mlp = random_mlp(4);
        mlp.standardize_inputs(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        // The first pre-activation at the input mean is zero.
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let pre = mlp.layers[0].eval(&x).unwrap();
        assert!(pre.max_abs() < 1e-12);
    }

    #[test]
    fn adam_fits_a_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::new(&[2, 16, 1], Activation::Tanh, true, &mut rng).unwrap();
        let mut adam = Adam::new(&mlp.parameters());
        let xs = Tensor::from_fn(&[32, 2], |_| rng.random_range(-1.0..1.0));
        let ys = Tensor::from_fn(&[32, 1], |i| 2.0 * xs.data()[2 * i] - xs.data()[2 * i + 1] + 0.5);
        let mut first = None;
        let mut last = f64::INFINITY;
        for step in 0..2000 {
            let mut tape = Tape::new();
            let params = mlp.bind(&mut tape, true);
            let x = tape.constant(xs.clone());
            let y = tape.constant(ys.clone());
            let out = mlp.forward(&mut tape, &params, x).unwrap();
            let r = tape.sub(out, y).unwrap();
            let loss = tape.squared_norm(r).unwrap();
            last = tape.value(loss).item();
            first.get_or_insert(last);
            let grads = mlp.gradients(&tape, &params, &tape.backward(loss).unwrap());
            adam.step(mlp.parameters_mut(), &grads, cosine_lr(0.02, 0.01, step, 2000));
        }
        let first = first.unwrap();
        assert!(last < 1e-3 * first, "loss {first} -> {last}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mlp = random_mlp(5);
        let mut ckpt = Checkpoint::new();
        mlp.save(&mut ckpt, "net");
        assert_eq!(Mlp::load(&ckpt, "net").unwrap(), mlp);
    }
}
