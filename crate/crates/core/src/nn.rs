//! Neural layers and losses built on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Named access to the learnable tensors of a module.
pub trait Parameters {
    fn params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)>;

    /// Number of scalar parameters with `requires_grad` set.
    fn trainable_count(&self) -> usize {
        self.params()
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(_, t)| t.numel())
            .sum()
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|(_, t)| t.numel()).sum()
    }

    fn zero_grad(&mut self) {
        for (_, t) in self.params_mut() {
            t.zero_grad();
        }
    }

    /// Copies gradients recorded on `tape` into each bound parameter.
    fn pull_grads(&mut self, tape: &Tape) -> Result<()> {
        for (_, t) in self.params_mut() {
            if t.requires_grad() {
                tape.write_grad(t)?;
            }
        }
        Ok(())
    }

    /// Combined checksum of every parameter in declaration order.
    fn checksum(&self) -> u64 {
        self.params()
            .iter()
            .fold(0xcbf2_9ce4_8422_2325u64, |h, (_, t)| {
                (h ^ t.checksum()).wrapping_mul(0x0000_0100_0000_01b3)
            })
    }
}

pub(crate) fn prefixed<'a>(
    prefix: &str,
    items: Vec<(String, &'a Tensor)>,
) -> Vec<(String, &'a Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

pub(crate) fn prefixed_mut<'a>(
    prefix: &str,
    items: Vec<(String, &'a mut Tensor)>,
) -> Vec<(String, &'a mut Tensor)> {
    items
        .into_iter()
        .map(|(n, t)| (format!("{prefix}.{n}"), t))
        .collect()
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data)
        .expect("shape matches data")
        .with_requires_grad(true)
}

fn zeros_param(shape: &[usize]) -> Tensor {
    Tensor::zeros(shape).with_requires_grad(true)
}

/// Square-kernel 2-D convolution. Weights `[out, in, k, k]`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Conv2d {
            weight: he_uniform(
                &[out_ch, in_ch, kernel, kernel],
                in_ch * kernel * kernel,
                rng,
            ),
            bias: zeros_param(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || bias.shape() != [s[0]] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "Conv2d::from_parts",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `floor((n + 2 pad - k) / stride) + 1`, or `None` if the kernel does
    /// not fit.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        (n + 2 * self.padding)
            .checked_sub(self.kernel_size())
            .map(|v| v / self.stride + 1)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_channels("conv2d", tape.shape(x), self.in_channels())?;
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv2d(x, w, b, self.stride, self.padding)
    }
}

impl Parameters for Conv2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Square-kernel transposed convolution. Weights `[in, out, k, k]`.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl ConvTranspose2d {
    pub fn new(
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        ConvTranspose2d {
            weight: he_uniform(
                &[in_ch, out_ch, kernel, kernel],
                in_ch * kernel * kernel,
                rng,
            ),
            bias: zeros_param(&[out_ch]),
            stride,
            padding,
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, stride: usize, padding: usize) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 4 || bias.shape() != [s[1]] || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "ConvTranspose2d::from_parts",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(ConvTranspose2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[2]
    }

    /// `(n - 1) stride - 2 pad + k`.
    pub fn output_size(&self, n: usize) -> Option<usize> {
        (n.checked_sub(1)? * self.stride + self.kernel_size())
            .checked_sub(2 * self.padding)
            .filter(|&v| v > 0)
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_channels("conv_transpose2d", tape.shape(x), self.in_channels())?;
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.conv_transpose2d(x, w, b, self.stride, self.padding)
    }
}

impl Parameters for ConvTranspose2d {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

fn check_channels(op: &'static str, shape: &[usize], expected: usize) -> Result<()> {
    if shape.len() != 4 || shape[1] != expected {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![expected],
        });
    }
    Ok(())
}

/// Affine layer, weights `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Linear {
            weight: he_uniform(&[out_dim, in_dim], in_dim, rng),
            bias: zeros_param(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Linear {
            weight: zeros_param(&[out_dim, in_dim]),
            bias: zeros_param(&[out_dim]),
        }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let s = weight.shape();
        if s.len() != 2 || bias.shape() != [s[0]] {
            return Err(Error::ShapeMismatch {
                op: "Linear::from_parts",
                lhs: s.to_vec(),
                rhs: bias.shape().to_vec(),
            });
        }
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, b)
    }
}

impl Parameters for Linear {
    fn params(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("weight".into(), &mut self.weight),
            ("bias".into(), &mut self.bias),
        ]
    }
}

/// Squeeze-and-excite gate over a feature vector:
/// `w = sigmoid(expand(relu(reduce(f))))`, `f_att = f * w`.
#[derive(Debug, Clone)]
pub struct SeBlock {
    pub reduce: Linear,
    pub expand: Linear,
    pub ratio: usize,
}

/// Outputs of [`SeBlock::forward`].
#[derive(Debug, Clone, Copy)]
pub struct SeOutput {
    pub weights: Var,
    pub attended: Var,
}

impl SeBlock {
    pub fn new(dim: usize, ratio: usize, rng: &mut impl Rng) -> Result<Self> {
        let hidden = bottleneck(dim, ratio)?;
        Ok(SeBlock {
            reduce: Linear::new(dim, hidden, rng),
            expand: Linear::new(hidden, dim, rng),
            ratio,
        })
    }

    pub fn from_parts(reduce: Linear, expand: Linear, ratio: usize) -> Result<Self> {
        if reduce.out_dim() != expand.in_dim() || reduce.in_dim() != expand.out_dim() {
            return Err(Error::ShapeMismatch {
                op: "SeBlock::from_parts",
                lhs: reduce.weight.shape().to_vec(),
                rhs: expand.weight.shape().to_vec(),
            });
        }
        Ok(SeBlock {
            reduce,
            expand,
            ratio,
        })
    }

    pub fn dim(&self) -> usize {
        self.reduce.in_dim()
    }

    pub fn forward(&self, tape: &mut Tape, features: Var) -> Result<SeOutput> {
        let s = tape.shape(features);
        if s.len() != 2 || s[1] != self.dim() {
            return Err(Error::ShapeMismatch {
                op: "se_forward",
                lhs: s.to_vec(),
                rhs: vec![self.dim()],
            });
        }
        let h = self.reduce.forward(tape, features)?;
        let h = tape.relu(h);
        let e = self.expand.forward(tape, h)?;
        let weights = tape.sigmoid(e);
        let attended = tape.mul(features, weights)?;
        Ok(SeOutput { weights, attended })
    }
}

/// Bottleneck width `max(1, dim / ratio)`.
pub fn bottleneck(dim: usize, ratio: usize) -> Result<usize> {
    if ratio == 0 || dim == 0 {
        return Err(Error::invalid("SE block needs dim > 0 and ratio > 0"));
    }
    Ok((dim / ratio).max(1))
}

impl Parameters for SeBlock {
    fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = prefixed("reduce", self.reduce.params());
        v.extend(prefixed("expand", self.expand.params()));
        v
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = prefixed_mut("reduce", self.reduce.params_mut());
        v.extend(prefixed_mut("expand", self.expand.params_mut()));
        v
    }
}

pub fn softmax(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax(logits)
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, labels)
}

pub fn mse(tape: &mut Tape, recon: Var, target: Var) -> Result<Var> {
    tape.mse(recon, target)
}

pub fn global_avg_pool(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.global_avg_pool(x)
}

/// Index of the largest entry, ties resolved toward the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
