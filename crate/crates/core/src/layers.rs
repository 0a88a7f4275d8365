//! Forward and analytic backward passes for every layer kind the network
//! configurations use, plus the categorical cross-entropy loss.
//!
//! The free functions are the numeric definitions. [`LayerState`] wraps them
//! with the activation cache a training step needs between its forward and
//! backward halves.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{gemm, Op, Patches, Scalar, Tensor};

/// Guards `log(0)` in the cross-entropy loss.
pub const LOSS_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Training pass. Dropout masks derive from `seed` and caches are kept.
    Train {
        seed: u64,
    },
    Infer,
}

/// Whether batch-level kernels may fan out across threads. Both settings
/// reduce per-sample contributions in sample order, so results are identical;
/// `Sequential` simply never touches the thread pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    #[default]
    Parallel,
}

/// Local response normalization hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnParams {
    pub k: f64,
    /// Channel window size, odd.
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for LrnParams {
    fn default() -> Self {
        Self {
            k: 2.0,
            n: 5,
            alpha: 1e-4,
            beta: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Square convolution, stride 1, padding `(kernel - 1) / 2`.
    Conv {
        kernel: usize,
        channels: usize,
    },
    /// 2×2 window, stride 2.
    MaxPool,
    Relu,
    Lrn(LrnParams),
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    Flatten,
    Softmax,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub trainable: bool,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        Self {
            name: name.into(),
            kind,
            trainable: true,
        }
    }

    /// Conv and dense layers carry weights; everything else is parameter-free.
    pub fn is_weight_layer(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. })
    }

    /// Per-sample output shape (batch axis omitted).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = || {
            Error::ShapeMismatch(format!(
                "layer {} ({:?}) cannot take per-sample input {input:?}",
                self.name, self.kind
            ))
        };
        match &self.kind {
            LayerKind::Conv { kernel, channels } => {
                let &[_, h, w] = input else {
                    return Err(mismatch());
                };
                if kernel % 2 == 0 {
                    return Err(Error::InvalidGeometry(format!(
                        "layer {}: kernel {kernel} must be odd to preserve spatial size",
                        self.name
                    )));
                }
                Ok(vec![*channels, h, w])
            }
            LayerKind::MaxPool => {
                let &[c, h, w] = input else {
                    return Err(mismatch());
                };
                pooled_extents(h, w).map(|(oh, ow)| vec![c, oh, ow])
            }
            LayerKind::Relu | LayerKind::Dropout { .. } => Ok(input.to_vec()),
            LayerKind::Lrn(_) => match input {
                [_, _, _] => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
            LayerKind::Dense { units } => match input {
                [_] => Ok(vec![*units]),
                _ => Err(mismatch()),
            },
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
            LayerKind::Softmax => match input {
                [k] if *k >= 2 => Ok(input.to_vec()),
                _ => Err(mismatch()),
            },
        }
    }

    /// Weight and bias shapes for a weight layer fed with the given
    /// per-sample input shape.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
        match (&self.kind, input) {
            (LayerKind::Conv { kernel, channels }, &[c_in, _, _]) => Ok(Some((
                vec![*channels, c_in, *kernel, *kernel],
                vec![*channels],
            ))),
            (LayerKind::Dense { units }, &[fan_in]) => {
                Ok(Some((vec![fan_in, *units], vec![*units])))
            }
            (LayerKind::Conv { .. } | LayerKind::Dense { .. }, _) => Err(Error::ShapeMismatch(
                format!("layer {} cannot take per-sample input {input:?}", self.name),
            )),
            _ => Ok(None),
        }
    }
}

/// Weight and bias tensors of one weight layer. Conv weights are
/// `[C_out, C_in, k, k]`, dense weights `[fan_in, fan_out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

fn pooled_extents(h: usize, w: usize) -> Result<(usize, usize)> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) {
        return Err(Error::InvalidGeometry(format!(
            "2x2 max-pooling needs even spatial extents, got {h}x{w}"
        )));
    }
    Ok((h / 2, w / 2))
}

fn dims4<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 4]> {
    t.expect_rank(4, what)?;
    let s = t.shape();
    Ok([s[0], s[1], s[2], s[3]])
}

fn dims2<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<[usize; 2]> {
    t.expect_rank(2, what)?;
    let s = t.shape();
    Ok([s[0], s[1]])
}

/// Mixes two words into a fresh seed (splitmix64 finalizer).
pub(crate) fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------- convolution

struct ConvGeometry {
    n: usize,
    c_out: usize,
    patches: Patches,
}

fn conv_geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<ConvGeometry> {
    let [n, c, h, w] = dims4(input, "conv2d input")?;
    let [c_out, c_in, kh, kw] = dims4(weight, "conv2d weight")?;
    if c_in != c {
        return Err(Error::ShapeMismatch(format!(
            "conv2d weight expects {c_in} input channels, input has {c}"
        )));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::InvalidGeometry(format!(
            "conv2d needs an odd square kernel, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [c_out] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d bias shape {:?}, expected [{c_out}]",
            bias.shape()
        )));
    }
    Ok(ConvGeometry {
        n,
        c_out,
        patches: Patches::new(c, h, w, kh, 1, (kh - 1) / 2)?,
    })
}

fn for_each_sample<T: Scalar, F>(out: &mut [T], chunk: usize, exec: Exec, f: F)
where
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    match exec {
        Exec::Sequential => out
            .chunks_exact_mut(chunk)
            .enumerate()
            .for_each(|(i, o)| f(i, o)),
        Exec::Parallel => out
            .par_chunks_exact_mut(chunk)
            .enumerate()
            .for_each(|(i, o)| f(i, o)),
    }
}

/// Same-size convolution: stride 1, zero padding `(k-1)/2`, realized as
/// im2col followed by one matrix multiply per image.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    conv2d_with(input, weight, bias, Exec::default())
}

pub fn conv2d_with<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    exec: Exec,
) -> Result<Tensor<T>> {
    let g = conv_geometry(input, weight, bias)?;
    let p = g.patches;
    let (rows, hw) = (p.rows(), p.cols());
    let in_chunk = p.channels * p.height * p.width;
    let out_chunk = g.c_out * hw;
    let mut out = vec![T::zero(); g.n * out_chunk];
    for_each_sample(&mut out, out_chunk, exec, |i, dst| {
        let mut cols = vec![T::zero(); rows * hw];
        p.unfold(
            &input.data()[i * in_chunk..(i + 1) * in_chunk],
            &mut cols,
            hw,
            0,
        );
        for (o, plane) in dst.chunks_exact_mut(hw).enumerate() {
            plane.fill(bias.data()[o]);
        }
        gemm(
            g.c_out,
            rows,
            hw,
            weight.data(),
            Op::N,
            &cols,
            Op::N,
            T::one(),
            dst,
        );
    });
    Tensor::new(&[g.n, g.c_out, p.out_h, p.out_w], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    exec: Exec,
) -> Result<ConvGrads<T>> {
    let zero_bias = Tensor::zeros(&[weight.shape()[0]])?;
    let g = conv_geometry(input, weight, &zero_bias)?;
    let p = g.patches;
    let (rows, hw) = (p.rows(), p.cols());
    if grad_out.shape() != [g.n, g.c_out, p.out_h, p.out_w] {
        return Err(Error::ShapeMismatch(format!(
            "conv2d upstream gradient {:?}, expected {:?}",
            grad_out.shape(),
            [g.n, g.c_out, p.out_h, p.out_w]
        )));
    }
    let in_chunk = p.channels * p.height * p.width;
    let out_chunk = g.c_out * hw;

    let per_sample = |i: usize| {
        let x = &input.data()[i * in_chunk..(i + 1) * in_chunk];
        let dy = &grad_out.data()[i * out_chunk..(i + 1) * out_chunk];
        let mut cols = vec![T::zero(); rows * hw];
        p.unfold(x, &mut cols, hw, 0);
        let mut dw = vec![T::zero(); g.c_out * rows];
        gemm(
            g.c_out,
            hw,
            rows,
            dy,
            Op::N,
            &cols,
            Op::T,
            T::zero(),
            &mut dw,
        );
        let db: Vec<T> = dy
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum())
            .collect();
        // Reuse the column buffer for the input-side gradient.
        gemm(
            rows,
            g.c_out,
            hw,
            weight.data(),
            Op::T,
            dy,
            Op::N,
            T::zero(),
            &mut cols,
        );
        let mut dx = vec![T::zero(); in_chunk];
        p.fold(&cols, hw, 0, &mut dx);
        (dx, dw, db)
    };
    let parts: Vec<_> = match exec {
        Exec::Sequential => (0..g.n).map(per_sample).collect(),
        Exec::Parallel => (0..g.n).into_par_iter().map(per_sample).collect(),
    };

    let mut dx = Vec::with_capacity(g.n * in_chunk);
    let mut dw = vec![T::zero(); g.c_out * rows];
    let mut db = vec![T::zero(); g.c_out];
    for (sx, sw, sb) in parts {
        dx.extend_from_slice(&sx);
        dw.iter_mut().zip(&sw).for_each(|(a, &b)| *a = *a + b);
        db.iter_mut().zip(&sb).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(ConvGrads {
        input: Tensor::new(input.shape(), dx)?,
        weight: Tensor::new(weight.shape(), dw)?,
        bias: Tensor::new(&[g.c_out], db)?,
    })
}

// ---------------------------------------------------------------- max-pool

/// 2×2/stride-2 max-pooling. Also returns, for every output element, the flat
/// input offset that won (first in row-major window order on ties).
pub fn maxpool2d_with_indices<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(input, "maxpool2d")?;
    let (oh, ow) = pooled_extents(h, w)?;
    let x = input.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(out.capacity());
    for plane in 0..n * c {
        let base = plane * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let cand = base + (2 * i + di) * w + 2 * j + dj;
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    maxpool2d_with_indices(input).map(|(out, _)| out)
}

/// Routes each upstream gradient entry to the input position that won its
/// window.
pub fn maxpool2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::ShapeMismatch(format!(
            "maxpool2d upstream gradient has {} entries, forward produced {}",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut dx = Tensor::zeros(input_shape)?;
    let d = dx.data_mut();
    for (&g, &at) in grad_out.data().iter().zip(argmax) {
        d[at] = d[at] + g;
    }
    Ok(dx)
}

// ---------------------------------------------------------------- relu

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the input is strictly positive; the subgradient
/// at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    input.zip_map(grad_out, |x, g| if x > T::zero() { g } else { T::zero() })
}

// ---------------------------------------------------------------- LRN

fn check_lrn(params: &LrnParams) -> Result<()> {
    if params.n.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "LRN window must be odd, got {}",
            params.n
        )));
    }
    Ok(())
}

/// Cross-channel normalizer `k + alpha·Σ x²` over the clipped window of every
/// channel, laid out like the input.
fn lrn_denominators<T: Scalar>(input: &Tensor<T>, params: &LrnParams) -> Result<Vec<T>> {
    let [n, c, h, w] = dims4(input, "lrn")?;
    let half = params.n / 2;
    let (k, alpha) = (T::from_f64_lossy(params.k), T::from_f64_lossy(params.alpha));
    let hw = h * w;
    let x = input.data();
    let mut scale = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for p in 0..hw {
                let sq: T = (lo..=hi)
                    .map(|cc| {
                        let v = x[base + cc * hw + p];
                        v * v
                    })
                    .sum();
                scale[base + ch * hw + p] = k + alpha * sq;
            }
        }
    }
    Ok(scale)
}

/// `out[c] = in[c] / (k + alpha·Σ_{c' in window(c)} in[c']²)^beta`, window of
/// `n` channels centred on `c` and clipped at the channel boundaries.
pub fn lrn<T: Scalar>(input: &Tensor<T>, params: &LrnParams) -> Result<Tensor<T>> {
    check_lrn(params)?;
    let beta = T::from_f64_lossy(params.beta);
    let scale = lrn_denominators(input, params)?;
    let out = input
        .data()
        .iter()
        .zip(&scale)
        .map(|(&x, &s)| x / s.powf(beta))
        .collect();
    Tensor::new(input.shape(), out)
}

pub fn lrn_backward<T: Scalar>(
    input: &Tensor<T>,
    grad_out: &Tensor<T>,
    params: &LrnParams,
) -> Result<Tensor<T>> {
    check_lrn(params)?;
    input.expect_same_shape(grad_out)?;
    let [n, c, h, w] = dims4(input, "lrn")?;
    let half = params.n / 2;
    let beta = T::from_f64_lossy(params.beta);
    let two_alpha_beta = T::from_f64_lossy(2.0 * params.alpha * params.beta);
    let scale = lrn_denominators(input, params)?;
    let (x, g) = (input.data(), grad_out.data());
    let hw = h * w;
    // t[c] = g[c]·x[c]·S[c]^(-beta-1), shared by every channel whose window holds c.
    let t: Vec<T> = (0..x.len())
        .map(|i| g[i] * x[i] * scale[i].powf(-beta - T::one()))
        .collect();
    let mut dx = vec![T::zero(); x.len()];
    for b in 0..n {
        let base = b * c * hw;
        for ch in 0..c {
            let lo = ch.saturating_sub(half);
            let hi = (ch + half).min(c - 1);
            for p in 0..hw {
                let i = base + ch * hw + p;
                let cross: T = (lo..=hi).map(|cc| t[base + cc * hw + p]).sum();
                dx[i] = g[i] * scale[i].powf(-beta) - two_alpha_beta * x[i] * cross;
            }
        }
    }
    Tensor::new(input.shape(), dx)
}

// ---------------------------------------------------------------- dropout

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidParameter(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    Ok(())
}

/// Keep-mask for inverted dropout: `true` survives. Reproducible from `seed`.
pub fn dropout_mask(len: usize, rate: f64, seed: u64) -> Result<Vec<bool>> {
    check_rate(rate)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..len).map(|_| rng.random::<f64>() >= rate).collect())
}

fn apply_mask<T: Scalar>(t: &Tensor<T>, mask: &[bool], rate: f64) -> Result<Tensor<T>> {
    if mask.len() != t.len() {
        return Err(Error::ShapeMismatch(format!(
            "dropout mask covers {} elements, tensor has {}",
            mask.len(),
            t.len()
        )));
    }
    let keep_scale = T::from_f64_lossy(1.0 / (1.0 - rate));
    let data = t
        .data()
        .iter()
        .zip(mask)
        .map(|(&v, &keep)| if keep { v * keep_scale } else { T::zero() })
        .collect();
    Tensor::new(t.shape(), data)
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1/(1-rate)`; inference is the identity.
pub fn dropout_apply<T: Scalar>(input: &Tensor<T>, rate: f64, mode: Mode) -> Result<Tensor<T>> {
    check_rate(rate)?;
    match mode {
        Mode::Infer => Ok(input.clone()),
        Mode::Train { seed } => apply_mask(input, &dropout_mask(input.len(), rate, seed)?, rate),
    }
}

/// Gradient of dropout under a fixed mask: the same mask and scale.
pub fn dropout_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    mask: &[bool],
    rate: f64,
) -> Result<Tensor<T>> {
    check_rate(rate)?;
    apply_mask(grad_out, mask, rate)
}

// ---------------------------------------------------------------- dense

fn dense_dims<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let [n, fan_in] = dims2(input, "dense input")?;
    let [w_in, fan_out] = dims2(weight, "dense weight")?;
    if w_in != fan_in {
        return Err(Error::ShapeMismatch(format!(
            "dense weight expects fan_in {w_in}, input has {fan_in}"
        )));
    }
    Ok((n, fan_in, fan_out))
}

/// `input·W + bias`, bias broadcast over rows.
pub fn dense<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, fan_in, fan_out) = dense_dims(input, weight)?;
    if bias.shape() != [fan_out] {
        return Err(Error::ShapeMismatch(format!(
            "dense bias shape {:?}, expected [{fan_out}]",
            bias.shape()
        )));
    }
    let mut out: Vec<T> = (0..n).flat_map(|_| bias.data().iter().copied()).collect();
    gemm(
        n,
        fan_in,
        fan_out,
        input.data(),
        Op::N,
        weight.data(),
        Op::N,
        T::one(),
        &mut out,
    );
    Tensor::new(&[n, fan_out], out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<DenseGrads<T>> {
    let (n, fan_in, fan_out) = dense_dims(input, weight)?;
    if grad_out.shape() != [n, fan_out] {
        return Err(Error::ShapeMismatch(format!(
            "dense upstream gradient {:?}, expected [{n}, {fan_out}]",
            grad_out.shape()
        )));
    }
    let mut dx = vec![T::zero(); n * fan_in];
    gemm(
        n,
        fan_out,
        fan_in,
        grad_out.data(),
        Op::N,
        weight.data(),
        Op::T,
        T::zero(),
        &mut dx,
    );
    let mut dw = vec![T::zero(); fan_in * fan_out];
    gemm(
        fan_in,
        n,
        fan_out,
        input.data(),
        Op::T,
        grad_out.data(),
        Op::N,
        T::zero(),
        &mut dw,
    );
    let mut db = vec![T::zero(); fan_out];
    for row in grad_out.data().chunks_exact(fan_out) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a = *a + b);
    }
    Ok(DenseGrads {
        input: Tensor::new(&[n, fan_in], dx)?,
        weight: Tensor::new(&[fan_in, fan_out], dw)?,
        bias: Tensor::new(&[fan_out], db)?,
    })
}

// ---------------------------------------------------------------- flatten

pub fn flatten<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let n = input.shape()[0];
    input.clone().reshape(&[n, input.len() / n])
}

// ---------------------------------------------------------------- softmax + loss

/// Row-wise softmax with max subtraction.
pub fn softmax<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, k] = dims2(input, "softmax")?;
    if k < 2 {
        return Err(Error::InvalidParameter(format!(
            "softmax needs at least 2 classes, got {k}"
        )));
    }
    let mut out = Vec::with_capacity(input.len());
    for row in input.data().chunks_exact(k) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        out.extend(row.iter().map(|&v| (v - max).exp()));
        let total: T = out[start..].iter().copied().sum();
        out[start..].iter_mut().for_each(|v| *v = *v / total);
    }
    Tensor::new(input.shape(), out)
}

/// Softmax Jacobian-vector product from the forward output.
pub fn softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.expect_same_shape(grad_out)?;
    let [_, k] = dims2(output, "softmax")?;
    let mut dx = Vec::with_capacity(output.len());
    for (y, g) in output
        .data()
        .chunks_exact(k)
        .zip(grad_out.data().chunks_exact(k))
    {
        let inner: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
        dx.extend(y.iter().zip(g).map(|(&yi, &gi)| yi * (gi - inner)));
    }
    Tensor::new(output.shape(), dx)
}

/// Index of the hot entry of every row, or an error if a row is not one-hot.
pub fn one_hot_labels<T: Scalar>(targets: &Tensor<T>) -> Result<Vec<usize>> {
    let [_, k] = dims2(targets, "one-hot targets")?;
    targets
        .data()
        .chunks_exact(k)
        .enumerate()
        .map(|(i, row)| {
            let ones: Vec<usize> = (0..k).filter(|&j| row[j] == T::one()).collect();
            let zeros = row.iter().filter(|&&v| v == T::zero()).count();
            match ones.as_slice() {
                [hot] if zeros == k - 1 => Ok(*hot),
                _ => Err(Error::InvalidTarget(format!(
                    "row {i} is not one-hot: {row:?}"
                ))),
            }
        })
        .collect()
}

/// `-(1/N)·Σ_i log(probs[i][label_i] + ε)`.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, targets: &Tensor<T>) -> Result<T> {
    probs.expect_same_shape(targets)?;
    let labels = one_hot_labels(targets)?;
    let k = probs.shape()[1];
    let eps = T::from_f64_lossy(LOSS_EPSILON);
    let total: T = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -(probs.data()[i * k + l] + eps).ln())
        .sum();
    Ok(total / T::from_usize(labels.len()).expect("batch size"))
}

/// Gradient of the mean cross-entropy with respect to the pre-softmax logits:
/// `(probs - targets)/N`.
pub fn softmax_cross_entropy_grad<T: Scalar>(
    probs: &Tensor<T>,
    targets: &Tensor<T>,
) -> Result<Tensor<T>> {
    probs.expect_same_shape(targets)?;
    one_hot_labels(targets)?;
    let n = T::from_usize(probs.shape()[0]).expect("batch size");
    probs.zip_map(targets, |p, t| (p - t) / n)
}

// ---------------------------------------------------------------- stateful wrapper

#[derive(Debug, Clone)]
enum Cache<T> {
    Input(Tensor<T>),
    Pool {
        argmax: Vec<usize>,
        input_shape: Vec<usize>,
    },
    Mask(Vec<bool>),
    Shape(Vec<usize>),
    Output(Tensor<T>),
}

/// One layer of a live model: its spec plus whatever the forward pass kept
/// for backward. Parameters are owned by the caller and passed in.
#[derive(Debug, Clone)]
pub struct LayerState<T> {
    spec: LayerSpec,
    index: usize,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> LayerState<T> {
    /// `index` is the layer's position in its network; it decorrelates the
    /// dropout masks of different layers that share a step seed.
    pub fn new(spec: LayerSpec, index: usize) -> Self {
        Self {
            spec,
            index,
            cache: None,
        }
    }

    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    fn params<'a>(&self, params: Option<&'a Params<T>>) -> Result<&'a Params<T>> {
        params.ok_or_else(|| {
            Error::InvalidParameter(format!("layer {} needs weights", self.spec.name))
        })
    }

    /// Runs the layer. In training mode the activations needed by
    /// [`LayerState::backward`] are cached; inference drops any cache.
    pub fn forward(
        &mut self,
        input: Tensor<T>,
        params: Option<&Params<T>>,
        mode: Mode,
        exec: Exec,
    ) -> Result<Tensor<T>> {
        let train = matches!(mode, Mode::Train { .. });
        self.cache = None;
        let (out, cache) = match &self.spec.kind {
            LayerKind::Conv { .. } => {
                let p = self.params(params)?;
                let out = conv2d_with(&input, &p.weight, &p.bias, exec)?;
                (out, Cache::Input(input))
            }
            LayerKind::MaxPool => {
                let (out, argmax) = maxpool2d_with_indices(&input)?;
                let input_shape = input.shape().to_vec();
                (
                    out,
                    Cache::Pool {
                        argmax,
                        input_shape,
                    },
                )
            }
            LayerKind::Relu => (relu(&input), Cache::Input(input)),
            LayerKind::Lrn(lp) => (lrn(&input, lp)?, Cache::Input(input)),
            LayerKind::Dropout { rate } => match mode {
                Mode::Infer => (dropout_apply(&input, *rate, mode)?, Cache::Mask(Vec::new())),
                Mode::Train { seed } => {
                    let mask = dropout_mask(input.len(), *rate, mix_seed(seed, self.index as u64))?;
                    (apply_mask(&input, &mask, *rate)?, Cache::Mask(mask))
                }
            },
            LayerKind::Dense { .. } => {
                let p = self.params(params)?;
                (dense(&input, &p.weight, &p.bias)?, Cache::Input(input))
            }
            LayerKind::Flatten => {
                let shape = input.shape().to_vec();
                (flatten(&input)?, Cache::Shape(shape))
            }
            LayerKind::Softmax => {
                let out = softmax(&input)?;
                let cache = if train {
                    Cache::Output(out.clone())
                } else {
                    Cache::Shape(Vec::new())
                };
                (out, cache)
            }
        };
        if train {
            self.cache = Some(cache);
        }
        Ok(out)
    }

    /// Back-propagates `grad_out`, consuming the cache. Returns the input
    /// gradient and, for weight layers, the parameter gradients.
    pub fn backward(
        &mut self,
        grad_out: Tensor<T>,
        params: Option<&Params<T>>,
        exec: Exec,
    ) -> Result<(Tensor<T>, Option<Params<T>>)> {
        let cache = self.cache.take().ok_or_else(|| {
            Error::InvalidParameter(format!(
                "layer {} has no cached activations; run forward in training mode first",
                self.spec.name
            ))
        })?;
        match (&self.spec.kind, cache) {
            (LayerKind::Conv { .. }, Cache::Input(x)) => {
                let p = self.params(params)?;
                let g = conv2d_backward(&x, &p.weight, &grad_out, exec)?;
                Ok((
                    g.input,
                    Some(Params {
                        weight: g.weight,
                        bias: g.bias,
                    }),
                ))
            }
            (
                LayerKind::MaxPool,
                Cache::Pool {
                    argmax,
                    input_shape,
                },
            ) => Ok((maxpool2d_backward(&grad_out, &argmax, &input_shape)?, None)),
            (LayerKind::Relu, Cache::Input(x)) => Ok((relu_backward(&x, &grad_out)?, None)),
            (LayerKind::Lrn(lp), Cache::Input(x)) => Ok((lrn_backward(&x, &grad_out, lp)?, None)),
            (LayerKind::Dropout { rate }, Cache::Mask(mask)) => {
                Ok((dropout_backward(&grad_out, &mask, *rate)?, None))
            }
            (LayerKind::Dense { .. }, Cache::Input(x)) => {
                let p = self.params(params)?;
                let g = dense_backward(&x, &p.weight, &grad_out)?;
                Ok((
                    g.input,
                    Some(Params {
                        weight: g.weight,
                        bias: g.bias,
                    }),
                ))
            }
            (LayerKind::Flatten, Cache::Shape(shape)) => Ok((grad_out.reshape(&shape)?, None)),
            (LayerKind::Softmax, Cache::Output(y)) => Ok((softmax_backward(&y, &grad_out)?, None)),
            (kind, _) => unreachable!("cache variant does not match layer kind {kind:?}"),
        }
    }
}
