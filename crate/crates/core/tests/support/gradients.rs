//! Finite-difference checks of every differentiable primitive and of the
//! composed reconstruction and fusion losses.

use cdae::corruption::DEFAULT_R;
use cdae::models::{Autoencoder, ClassifierModel, EncoderConfig, FusionModel};
use cdae::nn::{Conv2d, ConvTranspose2d, Linear, Parameters, SeBlock};
use cdae::tensor::{grad_check, Operand, Tape, Tensor, Var};
use cdae::Result;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CONFIGS: u64 = 20;
pub const EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

pub fn tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), uniform(rng, n, lo, hi)).unwrap()
}

/// `sum(w * y)` with fixed pseudo-random weights in `[0.5, 1.5]` of random
/// sign, so no output coordinate is ignored and no gradient cancels by
/// symmetry.
pub fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n = shape.iter().product();
    let mut r = rng(seed ^ 0x5eed);
    let w: Vec<f64> = (0..n)
        .map(|_| {
            let m = r.random_range(0.5..1.5);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    let w = t.constant(&shape, w)?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

/// Worst error over [`CONFIGS`] seeds of `check(seed)`.
fn worst(mut check: impl FnMut(u64) -> Result<f64>) -> f64 {
    (0..CONFIGS)
        .map(|s| check(s).expect("gradient check ran"))
        .fold(0.0, f64::max)
}

fn dims(r: &mut ChaCha8Rng) -> [usize; 2] {
    [r.random_range(1..5), r.random_range(1..6)]
}

fn unary(
    name: &'static str,
    lo: f64,
    hi: f64,
    op: fn(&mut Tape, Var) -> Result<Var>,
) -> (String, f64) {
    let e = worst(|s| {
        let mut r = rng(s);
        let d = dims(&mut r);
        let p = tensor(&mut r, &d, lo, hi);
        grad_check(
            |t, x| {
                let y = op(t, x)?;
                weighted_sum(t, y, s)
            },
            &p,
            EPS,
        )
    });
    (name.to_string(), e)
}

/// Gradient of a two-input op with respect to each input in turn.
fn binary(
    name: &'static str,
    shapes: impl Fn(&mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>),
    op: fn(&mut Tape, Var, Var) -> Result<Var>,
) -> (String, f64) {
    let e = worst(|s| {
        let mut r = rng(s);
        let (sa, sb) = shapes(&mut r);
        let a = tensor(&mut r, &sa, -2.0, 2.0);
        let b = tensor(&mut r, &sb, -2.0, 2.0);
        let ea = grad_check(
            |t, x| {
                let bv = t.constant(b.shape(), b.data().to_vec())?;
                let y = op(t, x, bv)?;
                weighted_sum(t, y, s)
            },
            &a,
            EPS,
        )?;
        let eb = grad_check(
            |t, x| {
                let av = t.constant(a.shape(), a.data().to_vec())?;
                let y = op(t, av, x)?;
                weighted_sum(t, y, s)
            },
            &b,
            EPS,
        )?;
        Ok(ea.max(eb))
    });
    (name.to_string(), e)
}

fn same_shape(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let d = dims(r).to_vec();
    (d.clone(), d)
}

fn row_broadcast(r: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let [m, n] = dims(r);
    (vec![m, n], vec![n])
}

/// Checks every tensor of `params` through [`Tape::bind`], and the input.
fn layer_check(
    seed: u64,
    input: &Tensor,
    params: &[&Tensor],
    forward: &dyn Fn(&mut Tape, Var) -> Result<Var>,
) -> Result<f64> {
    let mut e = grad_check(
        |t, x| {
            let y = forward(t, x)?;
            weighted_sum(t, y, seed)
        },
        input,
        EPS,
    )?;
    for (i, p) in params.iter().enumerate() {
        let ep = grad_check(
            |t, v| {
                t.bind(p, v)?;
                let x = t.constant(input.shape(), input.data().to_vec())?;
                let y = forward(t, x)?;
                weighted_sum(t, y, seed.wrapping_add(i as u64 + 1))
            },
            p,
            EPS,
        )?;
        e = e.max(ep);
    }
    Ok(e)
}

fn conv_geometry(r: &mut ChaCha8Rng) -> (usize, usize, usize, usize, usize, usize, usize) {
    let n = r.random_range(1..3);
    let cin = r.random_range(1..4);
    let cout = r.random_range(1..4);
    let k = r.random_range(1..4);
    let stride = r.random_range(1..3);
    let pad = r.random_range(0..k.min(2));
    let size = r.random_range(k.max(3)..7);
    (n, cin, cout, k, stride, pad, size)
}

/// Replaces every bias with values in `[-0.5, 0.5]`. Zero biases place
/// ReLU inputs exactly on the kink wherever upstream activations vanish,
/// where the loss has no derivative.
fn jitter_biases(model: &mut impl Parameters, r: &mut ChaCha8Rng) {
    for (name, t) in model.params_mut() {
        if name.ends_with("bias") {
            for v in t.data_mut() {
                *v = r.random_range(-0.5..0.5);
            }
        }
    }
}

/// Logistic map expressed with tape primitives: `r x (1 - x)`.
fn chaos(t: &mut Tape, x: Var) -> Result<Var> {
    let one_minus = t.scale(x, -1.0);
    let one_minus = t.add_scalar(one_minus, 1.0);
    let prod = t.mul(x, one_minus)?;
    Ok(t.scale(prod, DEFAULT_R))
}

/// `(name, worst relative error)` for every check.
pub fn suite() -> Vec<(String, f64)> {
    let mut out = vec![
        binary("add", same_shape, |t, a, b| t.add(a, b)),
        binary("add (row broadcast)", row_broadcast, |t, a, b| t.add(a, b)),
        binary("sub", same_shape, |t, a, b| t.sub(a, b)),
        binary("sub (row broadcast)", row_broadcast, |t, a, b| t.sub(a, b)),
        binary("mul", same_shape, |t, a, b| t.mul(a, b)),
        binary("mul (row broadcast)", row_broadcast, |t, a, b| t.mul(a, b)),
        unary("add_scalar", -2.0, 2.0, |t, x| Ok(t.add_scalar(x, 0.7))),
        unary("scale", -2.0, 2.0, |t, x| Ok(t.scale(x, -1.3))),
        unary("relu", -2.0, 2.0, |t, x| Ok(t.relu(x))),
        unary("sigmoid", -4.0, 4.0, |t, x| Ok(t.sigmoid(x))),
        unary("exp", -2.0, 2.0, |t, x| Ok(t.exp(x))),
        unary("log", 0.2, 3.0, |t, x| t.log(x)),
        unary("sum", -2.0, 2.0, |t, x| {
            let y = t.sum(x);
            let s = t.mul(y, y)?;
            t.add(s, y)
        }),
        unary("mean", -2.0, 2.0, |t, x| {
            let y = t.mean(x);
            let e = t.exp(y);
            t.add(e, y)
        }),
        unary("reshape", -2.0, 2.0, |t, x| {
            let n: usize = t.shape(x).iter().product();
            let y = t.reshape(x, &[n])?;
            Ok(t.sigmoid(y))
        }),
        unary("softmax", -3.0, 3.0, |t, x| t.softmax(x)),
        unary("elementwise scalar operand", -2.0, 2.0, |t, x| {
            t.elementwise(
                cdae::tensor::ElementwiseOp::Mul,
                x,
                Some(Operand::Scalar(0.3)),
            )
        }),
    ];

    out.push(binary(
        "matmul",
        |r| {
            let (m, k, n) = (
                r.random_range(1..5),
                r.random_range(1..5),
                r.random_range(1..5),
            );
            (vec![m, k], vec![k, n])
        },
        |t, a, b| t.matmul(a, b),
    ));
    out.push(binary(
        "concat_cols",
        |r| (vec![3, r.random_range(1..4)], vec![3, r.random_range(1..4)]),
        |t, a, b| t.concat_cols(&[a, b]),
    ));
    out.push(binary("mse", same_shape, |t, a, b| t.mse(a, b)));

    out.push((
        "linear".into(),
        worst(|s| {
            let mut r = rng(s);
            let (n, i, o) = (
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..5),
            );
            let layer = Linear::new(i, o, &mut r);
            let mut layer = layer;
            layer.bias = tensor(&mut r, &[o], -1.0, 1.0).with_requires_grad(true);
            let x = tensor(&mut r, &[n, i], -2.0, 2.0);
            layer_check(s, &x, &[&layer.weight, &layer.bias], &|t, x| {
                layer.forward(t, x)
            })
        }),
    ));

    out.push((
        "cross_entropy".into(),
        worst(|s| {
            let mut r = rng(s);
            let (n, k) = (r.random_range(1..5), r.random_range(2..6));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            let p = tensor(&mut r, &[n, k], -3.0, 3.0);
            grad_check(|t, x| t.cross_entropy(x, &labels), &p, EPS)
        }),
    ));

    out.push((
        "global_avg_pool".into(),
        worst(|s| {
            let mut r = rng(s);
            let shape = [
                r.random_range(1..3),
                r.random_range(1..4),
                r.random_range(1..5),
                r.random_range(1..5),
            ];
            let p = tensor(&mut r, &shape, -2.0, 2.0);
            grad_check(
                |t, x| {
                    let y = t.global_avg_pool(x)?;
                    weighted_sum(t, y, s)
                },
                &p,
                EPS,
            )
        }),
    ));

    out.push((
        "conv2d".into(),
        worst(|s| {
            let mut r = rng(s);
            let (n, cin, cout, k, stride, pad, size) = conv_geometry(&mut r);
            let mut layer = Conv2d::new(cin, cout, k, stride, pad, &mut r);
            layer.bias = tensor(&mut r, &[cout], -1.0, 1.0).with_requires_grad(true);
            let x = tensor(&mut r, &[n, cin, size, size], -1.0, 1.0);
            layer_check(s, &x, &[&layer.weight, &layer.bias], &|t, x| {
                layer.forward(t, x)
            })
        }),
    ));

    out.push((
        "conv_transpose2d".into(),
        worst(|s| {
            let mut r = rng(s);
            let (n, cin, cout, k, stride, pad, size) = conv_geometry(&mut r);
            let mut layer = ConvTranspose2d::new(cin, cout, k, stride, pad, &mut r);
            layer.bias = tensor(&mut r, &[cout], -1.0, 1.0).with_requires_grad(true);
            let x = tensor(&mut r, &[n, cin, size, size], -1.0, 1.0);
            layer_check(s, &x, &[&layer.weight, &layer.bias], &|t, x| {
                layer.forward(t, x)
            })
        }),
    ));

    out.push((
        "se_block".into(),
        worst(|s| {
            let mut r = rng(s);
            let (n, d) = (r.random_range(1..4), r.random_range(2..9));
            let mut se = SeBlock::new(d, 2, &mut r).unwrap();
            se.reduce.bias =
                tensor(&mut r, &[se.reduce.out_dim()], -0.5, 0.5).with_requires_grad(true);
            se.expand.bias = tensor(&mut r, &[d], -0.5, 0.5).with_requires_grad(true);
            let x = tensor(&mut r, &[n, d], 0.0, 2.0);
            let params = [
                &se.reduce.weight,
                &se.reduce.bias,
                &se.expand.weight,
                &se.expand.bias,
            ];
            layer_check(s, &x, &params, &|t, x| Ok(se.forward(t, x)?.attended))
        }),
    ));

    out.push((
        "cdae loss (1x1x8x8)".into(),
        worst(|s| {
            let case = CdaeCase::new(s);
            grad_check(|t, x| case.loss(t, x), &case.x, EPS)
        }),
    ));
    out.push((
        "fusion cross-entropy".into(),
        worst(|s| {
            let case = FusionCase::new(s);
            grad_check(|t, x| case.loss(t, x), &case.x, EPS)
        }),
    ));
    out
}

/// Reconstruction loss of a two-stage autoencoder on a chaotically
/// corrupted 1x1x8x8 batch.
pub struct CdaeCase {
    pub ae: Autoencoder,
    pub x: Tensor,
}

impl CdaeCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let mut ae = Autoencoder::new(EncoderConfig::new(vec![2, 3], 3, 1), 8, &mut r).unwrap();
        jitter_biases(&mut ae, &mut r);
        let x = tensor(&mut r, &[1, 1, 8, 8], 0.0, 1.0);
        CdaeCase { ae, x }
    }

    pub fn loss(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let xp = chaos(t, x)?;
        let recon = self.ae.forward(t, xp)?;
        t.mse(recon, x)
    }
}

/// Cross-entropy of a fusion head over two small frozen backbones.
pub struct FusionCase {
    pub fusion: FusionModel,
    pub x: Tensor,
    pub labels: Vec<usize>,
}

impl FusionCase {
    pub fn new(seed: u64) -> Self {
        let mut r = rng(seed);
        let k = 3;
        let mut b1 = ClassifierModel::new(EncoderConfig::new(vec![3, 4], 3, 2), k, &mut r).unwrap();
        let mut b2 = ClassifierModel::new(EncoderConfig::new(vec![2], 3, 2), k, &mut r).unwrap();
        b1.freeze();
        b2.freeze();
        let mut fusion = FusionModel::new(b1, b2, 2, &mut r).unwrap();
        jitter_biases(&mut fusion, &mut r);
        let labels = (0..2).map(|_| r.random_range(0..k)).collect();
        let x = tensor(&mut r, &[2, 2, 4, 4], 0.0, 1.0);
        FusionCase { fusion, x, labels }
    }

    pub fn loss(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let logits = self.fusion.trace(t, x)?.logits;
        t.cross_entropy(logits, &self.labels)
    }

    /// Tensors trained in the fusion stage.
    pub fn trainable(&self) -> Vec<(String, &Tensor)> {
        self.fusion
            .params()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }
}

/// `(analytic, central difference)` for every coordinate of `p`, with the
/// input fixed at `x` and `p` bound to the perturbed values.
pub fn param_pairs(
    loss: &dyn Fn(&mut Tape, Var) -> Result<Var>,
    x: &Tensor,
    p: &Tensor,
) -> Result<Vec<(f64, f64)>> {
    let eval = |values: Vec<f64>, grad: bool| -> Result<(Tape, Var, f64)> {
        let mut t = Tape::new();
        let v = t.leaf(p.shape(), values, grad)?;
        t.bind(p, v)?;
        let xv = t.constant(x.shape(), x.data().to_vec())?;
        let y = loss(&mut t, xv)?;
        let value = t.scalar(y);
        if grad {
            t.backward(y)?;
        }
        Ok((t, v, value))
    };
    let (tape, v, _) = eval(p.data().to_vec(), true)?;
    let analytic = tape
        .grad(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; p.numel()]);
    let mut out = Vec::with_capacity(p.numel());
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = p.data().to_vec();
        let mut minus = plus.clone();
        plus[i] += EPS;
        minus[i] -= EPS;
        let n = (eval(plus, false)?.2 - eval(minus, false)?.2) / (2.0 * EPS);
        out.push((a, n));
    }
    Ok(out)
}
