//! Dense row-major tensors and the forward kernels used by the tape.
//!
//! Everything is generic over [`Scalar`] so the same code paths run in
//! 32-bit (training, inference) and 64-bit (gradient checking).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

use crate::error::{Error, Result};

pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn erf(self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn valid_shape(shape: &[usize]) -> bool {
    !shape.is_empty() && shape.iter().all(|&d| d >= 1)
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if !valid_shape(&shape) || shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(shape));
        }
        Ok(Self { shape, data })
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        if !valid_shape(shape) {
            return Err(Error::Shape(shape.to_vec()));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Result<Self> {
        if !valid_shape(shape) {
            return Err(Error::Shape(shape.to_vec()));
        }
        let n = shape.iter().product();
        Ok(Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        })
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&v| T::of(v)).collect())
    }

    /// Shape-checked constructor for internal kernels whose output shape is
    /// known to be valid.
    pub(crate) fn raw(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert!(valid_shape(&shape) && shape.iter().product::<usize>() == data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// First element; the value of a scalar tensor.
    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
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
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let d = self.zip_map(other, "max_abs_diff", |a, b| (a - b).abs())?;
        Ok(d.data.iter().fold(0.0, |m, v| m.max(v.f64())))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
    }

    /// (rows, cols) view of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2("transpose")?;
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self::raw(vec![c, r], out))
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Self::raw(vec![m, n], out))
    }

    pub fn softmax_rows(&self) -> Result<Self> {
        let (r, c) = self.dims2("softmax_rows")?;
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericDomain("softmax_rows: NaN input"));
        }
        let mut out = self.data.clone();
        for row in 0..r {
            softmax_in_place(&mut out[row * c..(row + 1) * c]);
        }
        Ok(Self::raw(vec![r, c], out))
    }

    /// Cross-correlation of a `C_in x H x W` map with `C_out x C_in/g x k x k`
    /// weights, stride 1, symmetric zero padding.
    pub fn conv2d(&self, weight: &Self, bias: Option<&Self>, groups: usize, padding: usize) -> Result<Self> {
        let geom = ConvGeometry::new(self.shape(), weight.shape(), groups, padding)?;
        if let Some(b) = bias {
            if b.shape() != [geom.c_out] {
                return Err(Error::Dimension {
                    op: "conv2d bias",
                    lhs: weight.shape.clone(),
                    rhs: b.shape.clone(),
                });
            }
        }
        Ok(geom.forward(&self.data, &weight.data, bias.map(|b| b.data())))
    }
}

/// `out += a[m x k] * b[k x n]`, i-k-j order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub groups: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(x: &[usize], weight: &[usize], groups: usize, padding: usize) -> Result<Self> {
        let dim_err = || Error::Dimension {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: weight.to_vec(),
        };
        let (c_in, h, w) = match x {
            [c, h, w] => (*c, *h, *w),
            _ => return Err(dim_err()),
        };
        let (c_out, c_per_group, k, k2) = match weight {
            [a, b, c, d] => (*a, *b, *c, *d),
            _ => return Err(dim_err()),
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::UnsupportedKernel(if k % 2 == 0 { k } else { k2 }));
        }
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 || c_per_group != c_in / groups {
            return Err(dim_err());
        }
        if h + 2 * padding < k || w + 2 * padding < k {
            return Err(dim_err());
        }
        Ok(Self {
            c_in,
            c_out,
            h,
            w,
            k,
            groups,
            padding,
            h_out: h + 2 * padding - k + 1,
            w_out: w + 2 * padding - k + 1,
        })
    }

    pub fn macs(&self) -> u64 {
        (self.c_out * (self.c_in / self.groups) * self.k * self.k * self.h_out * self.w_out) as u64
    }

    pub fn forward<T: Scalar>(&self, x: &[T], wt: &[T], bias: Option<&[T]>) -> Tensor<T> {
        let ConvGeometry { c_in, c_out, h, w, k, groups, padding, h_out, w_out } = *self;
        let cig = c_in / groups;
        let cog = c_out / groups;
        let mut out = vec![T::zero(); c_out * h_out * w_out];
        for co in 0..c_out {
            let g = co / cog;
            let plane = &mut out[co * h_out * w_out..(co + 1) * h_out * w_out];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|v| *v = b[co]);
            }
            for cl in 0..cig {
                let ci = g * cig + cl;
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wt[((co * cig + cl) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oy in 0..h_out {
                            let iy = oy + ky;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            let (lo, hi) = valid_span(kx, padding, w, w_out);
                            let orow = &mut plane[oy * w_out..(oy + 1) * w_out];
                            let xrow = &xin[iy * w..(iy + 1) * w];
                            for ox in lo..hi {
                                orow[ox] += wv * xrow[ox + kx - padding];
                            }
                        }
                    }
                }
            }
        }
        Tensor::raw(vec![c_out, h_out, w_out], out)
    }

    /// Gradients with respect to input, weight and bias.
    pub fn backward<T: Scalar>(&self, x: &[T], wt: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
        let ConvGeometry { c_in, c_out, h, w, k, groups, padding, h_out, w_out } = *self;
        let cig = c_in / groups;
        let cog = c_out / groups;
        let mut gx = vec![T::zero(); x.len()];
        let mut gw = vec![T::zero(); wt.len()];
        let mut gb = vec![T::zero(); c_out];
        for co in 0..c_out {
            let grp = co / cog;
            let gplane = &g[co * h_out * w_out..(co + 1) * h_out * w_out];
            gb[co] = gplane.iter().copied().sum();
            for cl in 0..cig {
                let ci = grp * cig + cl;
                let xin = &x[ci * h * w..(ci + 1) * h * w];
                let gxin = &mut gx[ci * h * w..(ci + 1) * h * w];
                for ky in 0..k {
                    for kx in 0..k {
                        let widx = ((co * cig + cl) * k + ky) * k + kx;
                        let wv = wt[widx];
                        let mut acc = T::zero();
                        let (lo, hi) = valid_span(kx, padding, w, w_out);
                        for oy in 0..h_out {
                            let iy = oy + ky;
                            if iy < padding || iy - padding >= h {
                                continue;
                            }
                            let iy = iy - padding;
                            let grow = &gplane[oy * w_out..(oy + 1) * w_out];
                            for ox in lo..hi {
                                let ix = iy * w + ox + kx - padding;
                                acc += grow[ox] * xin[ix];
                                gxin[ix] += grow[ox] * wv;
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
        (gx, gw, gb)
    }
}

/// Output columns `[lo, hi)` whose tap at kernel column `kx` lands inside the input.
#[inline]
fn valid_span(kx: usize, padding: usize, w: usize, w_out: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx);
    let hi = (w + padding).saturating_sub(kx).min(w_out);
    (lo, hi.max(lo))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64, n: usize) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn shape_invariants_are_enforced() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![0, 3], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn matmul_identity_and_scalar() {
        let eye = Tensor::<f32>::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }).unwrap();
        let b = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32 * 0.5 - 1.0).unwrap();
        assert_eq!(eye.matmul(&b).unwrap(), b);
        let a = Tensor::<f32>::from_f64(&[1, 1], &[2.0]).unwrap();
        let c = Tensor::<f32>::from_f64(&[1, 1], &[3.0]).unwrap();
        assert_eq!(a.matmul(&c).unwrap().data(), &[6.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = lcg(1, 20);
        let b = lcg(2, 12);
        let ta = Tensor::<f32>::from_f64(&[5, 4], &a).unwrap();
        let tb = Tensor::<f32>::from_f64(&[4, 3], &b).unwrap();
        let got = ta.matmul(&tb).unwrap();
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a[i * 4 + p] * b[p * 3 + j];
                }
                assert!((got.data()[i * 3 + j] as f64 - s).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_rejects_mismatch_naming_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[4, 2]).unwrap();
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn conv_identity_and_zero_kernels() {
        let x = Tensor::<f32>::from_f64(&[1, 4, 4], &lcg(3, 16)).unwrap();
        let one = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0).unwrap();
        assert_eq!(x.conv2d(&one, None, 1, 0).unwrap(), x);
        let zero = Tensor::<f32>::zeros(&[2, 1, 3, 3]).unwrap();
        let y = x.conv2d(&zero, None, 1, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert_eq!(y.shape(), &[2, 4, 4]);
    }

    #[test]
    fn conv_rejects_even_kernel_and_bad_groups() {
        let x = Tensor::<f32>::zeros(&[4, 4, 4]).unwrap();
        let even = Tensor::<f32>::zeros(&[4, 1, 2, 2]).unwrap();
        assert!(matches!(x.conv2d(&even, None, 4, 0), Err(Error::UnsupportedKernel(2))));
        let w = Tensor::<f32>::zeros(&[4, 1, 3, 3]).unwrap();
        assert!(matches!(x.conv2d(&w, None, 3, 1), Err(Error::Dimension { .. })));
    }

    #[test]
    fn softmax_edge_cases() {
        let col = Tensor::<f64>::from_f64(&[3, 1], &[5.0, -2.0, 0.0]).unwrap();
        assert!(col.softmax_rows().unwrap().data().iter().all(|&v| v == 1.0));
        let eq = Tensor::<f64>::from_f64(&[1, 4], &[0.3; 4]).unwrap();
        assert_eq!(eq.softmax_rows().unwrap().data(), &[0.25; 4]);
        let big = Tensor::<f64>::from_f64(&[1, 2], &[1000.0, 0.0]).unwrap();
        let s = big.softmax_rows().unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1].abs() < 1e-12);
        let nan = Tensor::<f64>::from_f64(&[1, 2], &[f64::NAN, 0.0]).unwrap();
        assert!(matches!(nan.softmax_rows(), Err(Error::NumericDomain(_))));
    }
}
