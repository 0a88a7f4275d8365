//! Dense row-major tensors and the numeric kernels every layer is built on.
//!
//! Image batches use N×C×H×W order throughout. Element `(n, c, h, w)` lives at
//! flat offset `((n·C + c)·H + h)·W + w`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Element type tag, used by the checkpoint format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Floating element type. `f32` drives training and inference, `f64` is used
/// for finite-difference gradient checks.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    /// `c ← alpha·op(a)·op(b) + beta·c` on strided row/column layouts.
    ///
    /// # Safety
    /// Every index reachable through the given extents and strides must lie
    /// inside the corresponding slice.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 converts")
    }
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> f64 {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Whether a row-major operand enters a product as stored or transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    N,
    T,
}

/// Dense `m×n = op(a)·op(b)` on row-major slices, accumulating into `c` with
/// weight `beta`. `a` is stored `m×k` (or `k×m` when transposed), likewise `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    op_a: Op,
    b: &[T],
    op_b: Op,
    beta: T,
    c: &mut [T],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: lengths were checked above; the strides describe exactly the
    // m×k, k×n and m×n row-major (or transposed) views of those slices.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How [`Tensor::create`] fills a new tensor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fill<T> {
    Constant(T),
    /// Independent draws from `[low, high)`.
    Uniform {
        low: T,
        high: T,
    },
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        let head = &self.data[..self.data.len().min(SHOWN)];
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &head)
            .field("len", &self.data.len())
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::InvalidShape(shape.to_vec()));
    }
    Ok(shape.iter().product())
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} holds {len} elements but {} were supplied",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        let len = check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Creates a tensor from a fill rule. Random fills are a pure function of
    /// `(shape, fill, seed)`.
    pub fn create(shape: &[usize], fill: Fill<T>, seed: u64) -> Result<Self> {
        match fill {
            Fill::Constant(v) => Self::full(shape, v),
            Fill::Uniform { low, high } => {
                let len = check_shape(shape)?;
                if low.partial_cmp(&high) != Some(std::cmp::Ordering::Less) {
                    return Err(Error::InvalidParameter(format!(
                        "uniform fill needs low < high, got [{low}, {high})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let data = uniform_vec(&mut rng, len, low, high);
                Ok(Self {
                    shape: shape.to_vec(),
                    data,
                })
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len = check_shape(shape)?;
        if len != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        index.iter().zip(&self.shape).fold(0, |acc, (&i, &extent)| {
            assert!(i < extent, "index {i} out of bounds for extent {extent}");
            acc * extent + i
        })
    }

    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_same_shape(other)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<T> {
        self.expect_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a * b)
            .sum())
    }

    pub fn expect_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::ShapeMismatch(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    /// Stacks equally shaped tensors along a new leading batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::InvalidShape(vec![0]))?;
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        let mut data = Vec::with_capacity(items.len() * first.len());
        for item in items {
            first.expect_same_shape(item)?;
            data.extend_from_slice(&item.data);
        }
        Self::new(&shape, data)
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().expect("finite")))
                .collect(),
        }
    }
}

pub(crate) fn uniform_vec<T: Scalar>(rng: &mut ChaCha8Rng, len: usize, low: T, high: T) -> Vec<T> {
    let low = low.to_f64().expect("finite");
    let high = high.to_f64().expect("finite");
    (0..len)
        .map(|_| T::from_f64_lossy(rng.random_range(low..high)))
        .collect()
}

/// `[m×k]·[k×n] → [m×n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "matmul")?;
    b.expect_rank(2, "matmul")?;
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents differ: {:?} × {:?}",
            a.shape, b.shape
        )));
    }
    let mut out = vec![T::zero(); m * n];
    gemm(m, k, n, &a.data, Op::N, &b.data, Op::N, T::zero(), &mut out);
    Tensor::new(&[m, n], out)
}

/// Output extent of a sliding window, or an error if the window does not tile
/// the padded input exactly.
pub fn window_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::InvalidGeometry(format!(
            "kernel {kernel} and stride {stride} must be positive"
        )));
    }
    let padded = input + 2 * pad;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::InvalidGeometry(format!(
            "input {input} with kernel {kernel}, stride {stride}, pad {pad} gives a non-integral output extent"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Geometry of one im2col unfolding over a single `C×H×W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Patches {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Patches {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        Ok(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_h: window_extent(height, kernel, stride, pad)?,
            out_w: window_extent(width, kernel, stride, pad)?,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Unfolds one image into `cols` (a `rows × row_stride` block, writing the
    /// `self.cols()` entries of each row starting at `col_offset`).
    pub fn unfold<T: Scalar>(
        &self,
        image: &[T],
        cols: &mut [T],
        row_stride: usize,
        col_offset: usize,
    ) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        for c in 0..self.channels {
            let plane = &image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * row_stride + col_offset..][..self.cols()];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let line = &mut dst[oh * self.out_w..(oh + 1) * self.out_w];
                        if ih < 0 || ih >= h {
                            line.fill(T::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * self.width..][..self.width];
                        for (ow, slot) in line.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *slot = if iw < 0 || iw >= w {
                                T::zero()
                            } else {
                                src[iw as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Patches::unfold`]: scatter-adds columns back into `image`.
    pub fn fold<T: Scalar>(
        &self,
        cols: &[T],
        row_stride: usize,
        col_offset: usize,
        image: &mut [T],
    ) {
        let (h, w, k) = (self.height as isize, self.width as isize, self.kernel);
        for c in 0..self.channels {
            let plane =
                &mut image[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * row_stride + col_offset..][..self.cols()];
                    for oh in 0..self.out_h {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= h {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.width..][..self.width];
                        for (ow, &v) in src[oh * self.out_w..(oh + 1) * self.out_w]
                            .iter()
                            .enumerate()
                        {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < w {
                                dst[iw as usize] = dst[iw as usize] + v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn nchw(t: &Tensor<impl Scalar>, what: &str) -> Result<[usize; 4]> {
    t.expect_rank(4, what)?;
    Ok([t.shape[0], t.shape[1], t.shape[2], t.shape[3]])
}

/// Unfolds every receptive field of an `[N,C,H,W]` batch into the columns of
/// a `[C·k·k, N·H_out·W_out]` matrix. Column `(n·H_out + oh)·W_out + ow` holds
/// the patch anchored at output position `(oh, ow)` of image `n`, with rows
/// ordered `(c, i, j)`. Positions outside the image read as zero.
pub fn im2col<T: Scalar>(
    input: &Tensor<T>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let [n, c, h, w] = nchw(input, "im2col")?;
    let geo = Patches::new(c, h, w, kernel, stride, pad)?;
    let per_image = geo.cols();
    let total = n * per_image;
    let mut cols = vec![T::zero(); geo.rows() * total];
    for (i, image) in input.data.chunks_exact(c * h * w).enumerate() {
        geo.unfold(image, &mut cols, total, i * per_image);
    }
    Tensor::new(&[geo.rows(), total], cols)
}

/// Adjoint of [`im2col`]: scatter-adds a `[C·k·k, N·H_out·W_out]` column matrix
/// back onto an `[N,C,H,W]` tensor of the given shape.
pub fn col2im<T: Scalar>(
    cols: &Tensor<T>,
    input_shape: &[usize],
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let &[n, c, h, w] = input_shape else {
        return Err(Error::ShapeMismatch(format!(
            "col2im target must be rank 4, got {input_shape:?}"
        )));
    };
    let geo = Patches::new(c, h, w, kernel, stride, pad)?;
    let total = n * geo.cols();
    if cols.shape != [geo.rows(), total] {
        return Err(Error::ShapeMismatch(format!(
            "col2im expected columns {:?}, got {:?}",
            [geo.rows(), total],
            cols.shape
        )));
    }
    let mut out = Tensor::zeros(input_shape)?;
    for (i, image) in out.data.chunks_exact_mut(c * h * w).enumerate() {
        geo.fold(&cols.data, total, i * geo.cols(), image);
    }
    Ok(out)
}
