//! Compact convolutional backbone with hand-written backward pass.
//!
//! Four 3x3 stride-2 convolutions (padding 1) with SiLU, global average
//! pooling, then a linear projection to the embedding dimension. Convolutions
//! run as im2col + GEMM. Generic over the scalar so gradient checks can use
//! `f64` while training uses `f32`.

use std::fmt::Debug;
use std::ops::AddAssign;

use num_traits::Float;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{GalaError, Result};

pub trait Scalar: Float + Default + Debug + Send + Sync + AddAssign + std::iter::Sum + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c`, all row-major; `op(a)` is
    /// `m x k`, `op(b)` is `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]);

    fn lit(v: f64) -> Self {
        Self::from(v).expect("representable literal")
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: &[Self], a_t: bool, b: &[Self], b_t: bool, beta: Self, c: &mut [Self]) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
                let (rsa, csa) = strides(m, k, a_t);
                let (rsb, csb) = strides(k, n, b_t);
                // SAFETY: bounds asserted above; strides describe the operands'
                // row-major layout (or its transpose) within those bounds.
                unsafe {
                    $f(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvShape {
    in_c: usize,
    out_c: usize,
    in_size: usize,
    out_size: usize,
    w_off: usize,
    b_off: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ToyCnn {
    input_size: usize,
    embed_dim: usize,
    convs: Vec<ConvShape>,
    proj_w: usize,
    proj_b: usize,
    param_count: usize,
}

pub struct ForwardCache<T> {
    cols: Vec<Vec<T>>,
    pre: Vec<Vec<T>>,
    pooled: Vec<T>,
    pub output: Vec<T>,
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

pub fn conv_out_size(size: usize) -> usize {
    (size - 1) / 2 + 1
}

impl ToyCnn {
    pub fn new(input_size: usize, channels: &[usize], embed_dim: usize) -> Result<Self> {
        if input_size == 0 || embed_dim == 0 || channels.is_empty() || channels.contains(&0) {
            return Err(GalaError::invalid("toy backbone dimensions must be positive"));
        }
        let mut convs = Vec::with_capacity(channels.len());
        let (mut in_c, mut size, mut off) = (3usize, input_size, 0usize);
        for &out_c in channels {
            let out_size = conv_out_size(size);
            let w_off = off;
            let b_off = w_off + out_c * in_c * 9;
            off = b_off + out_c;
            convs.push(ConvShape { in_c, out_c, in_size: size, out_size, w_off, b_off });
            in_c = out_c;
            size = out_size;
        }
        let proj_w = off;
        let proj_b = proj_w + embed_dim * in_c;
        Ok(Self {
            input_size,
            embed_dim,
            convs,
            proj_w,
            proj_b,
            param_count: proj_b + embed_dim,
        })
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Spatial side of the last feature map before pooling.
    pub fn final_map_size(&self) -> usize {
        self.convs.last().map(|c| c.out_size).unwrap_or(self.input_size)
    }

    /// He-normal convolution weights, scaled-normal projection, zero biases.
    pub fn init_params(&self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![0f32; self.param_count];
        for c in &self.convs {
            let std = (2.0 / (c.in_c * 9) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid std");
            for w in &mut p[c.w_off..c.b_off] {
                *w = dist.sample(&mut rng) as f32;
            }
        }
        let last_c = self.convs.last().map(|c| c.out_c).unwrap_or(3);
        let dist = Normal::new(0.0, (1.0 / last_c as f64).sqrt()).expect("valid std");
        for w in &mut p[self.proj_w..self.proj_b] {
            *w = dist.sample(&mut rng) as f32;
        }
        p
    }

    fn im2col<T: Scalar>(x: &[T], c: &ConvShape) -> Vec<T> {
        let (s, o) = (c.in_size as isize, c.out_size);
        let p = o * o;
        let mut cols = vec![T::zero(); c.in_c * 9 * p];
        for ic in 0..c.in_c {
            let plane = &x[ic * c.in_size * c.in_size..(ic + 1) * c.in_size * c.in_size];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &mut cols[((ic * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..o {
                        let iy = 2 * oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= s {
                            continue;
                        }
                        let src = &plane[iy as usize * c.in_size..][..c.in_size];
                        let dst = &mut row[oy * o..][..o];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = 2 * ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < s {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im<T: Scalar>(cols: &[T], c: &ConvShape) -> Vec<T> {
        let (s, o) = (c.in_size as isize, c.out_size);
        let p = o * o;
        let mut x = vec![T::zero(); c.in_c * c.in_size * c.in_size];
        for ic in 0..c.in_c {
            let plane = &mut x[ic * c.in_size * c.in_size..(ic + 1) * c.in_size * c.in_size];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &cols[((ic * 9) + ky * 3 + kx) * p..][..p];
                    for oy in 0..o {
                        let iy = 2 * oy as isize + ky as isize - 1;
                        if iy < 0 || iy >= s {
                            continue;
                        }
                        for ox in 0..o {
                            let ix = 2 * ox as isize + kx as isize - 1;
                            if ix >= 0 && ix < s {
                                plane[iy as usize * c.in_size + ix as usize] += row[oy * o + ox];
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// Runs the network on a channel-planar `3 x size x size` input.
    pub fn forward<T: Scalar>(&self, params: &[T], input: &[T]) -> Result<ForwardCache<T>> {
        if params.len() != self.param_count {
            return Err(GalaError::DimensionMismatch { expected: self.param_count, got: params.len() });
        }
        let expected = 3 * self.input_size * self.input_size;
        if input.len() != expected {
            return Err(GalaError::DimensionMismatch { expected, got: input.len() });
        }
        let mut cols_cache = Vec::with_capacity(self.convs.len());
        let mut pre_cache = Vec::with_capacity(self.convs.len());
        let mut act = input.to_vec();
        for c in &self.convs {
            let p = c.out_size * c.out_size;
            let cols = Self::im2col(&act, c);
            let mut z = vec![T::zero(); c.out_c * p];
            for (oc, row) in z.chunks_exact_mut(p).enumerate() {
                row.fill(params[c.b_off + oc]);
            }
            T::gemm(c.out_c, c.in_c * 9, p, &params[c.w_off..c.b_off], false, &cols, false, T::one(), &mut z);
            act = z.iter().map(|&v| v * sigmoid(v)).collect();
            cols_cache.push(cols);
            pre_cache.push(z);
        }
        let last = self.convs.last().expect("at least one conv");
        let p = last.out_size * last.out_size;
        let inv_p = T::one() / T::lit(p as f64);
        let pooled: Vec<T> = act.chunks_exact(p).map(|ch| ch.iter().copied().sum::<T>() * inv_p).collect();
        let mut output = params[self.proj_b..self.proj_b + self.embed_dim].to_vec();
        T::gemm(self.embed_dim, last.out_c, 1, &params[self.proj_w..self.proj_b], false, &pooled, false, T::one(), &mut output);
        Ok(ForwardCache { cols: cols_cache, pre: pre_cache, pooled, output })
    }

    /// Accumulates d(loss)/d(params) into `grad` given d(loss)/d(output).
    pub fn backward<T: Scalar>(&self, params: &[T], cache: &ForwardCache<T>, d_out: &[T], grad: &mut [T]) {
        assert_eq!(grad.len(), self.param_count);
        assert_eq!(d_out.len(), self.embed_dim);
        let last = self.convs.last().expect("at least one conv");
        let c_last = last.out_c;
        // Projection.
        for (i, d) in d_out.iter().enumerate() {
            grad[self.proj_b + i] += *d;
            let row = &mut grad[self.proj_w + i * c_last..self.proj_w + (i + 1) * c_last];
            for (g, x) in row.iter_mut().zip(&cache.pooled) {
                *g += *d * *x;
            }
        }
        let mut d_pooled = vec![T::zero(); c_last];
        T::gemm(c_last, self.embed_dim, 1, &params[self.proj_w..self.proj_b], true, d_out, false, T::zero(), &mut d_pooled);

        // Global average pool.
        let p = last.out_size * last.out_size;
        let inv_p = T::one() / T::lit(p as f64);
        let mut d_act: Vec<T> = d_pooled.iter().flat_map(|d| std::iter::repeat_n(*d * inv_p, p)).collect();

        for (li, c) in self.convs.iter().enumerate().rev() {
            let p = c.out_size * c.out_size;
            let z = &cache.pre[li];
            let d_z: Vec<T> = d_act
                .iter()
                .zip(z)
                .map(|(&d, &z)| {
                    let s = sigmoid(z);
                    d * s * (T::one() + z * (T::one() - s))
                })
                .collect();
            for (oc, row) in d_z.chunks_exact(p).enumerate() {
                grad[c.b_off + oc] += row.iter().copied().sum::<T>();
            }
            let k = c.in_c * 9;
            T::gemm(c.out_c, p, k, &d_z, false, &cache.cols[li], true, T::one(), &mut grad[c.w_off..c.b_off]);
            if li > 0 {
                let mut d_cols = vec![T::zero(); k * p];
                T::gemm(k, c.out_c, p, &params[c.w_off..c.b_off], true, &d_z, false, T::zero(), &mut d_cols);
                d_act = Self::col2im(&d_cols, c);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spatial_sizes() {
        let net = ToyCnn::new(224, &[8, 8, 8, 8], 16).unwrap();
        assert_eq!(net.final_map_size(), 14);
        let net = ToyCnn::new(16, &[4, 4, 4, 4], 8).unwrap();
        assert_eq!(net.final_map_size(), 1);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        f64::gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        f64::gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let net = ToyCnn::new(16, &[4, 4, 4, 4], 8).unwrap();
        let mut params = net.init_params(1);
        // init already zeroes biases
        let out = net.forward::<f32>(&params, &vec![0.0; 3 * 16 * 16]).unwrap().output;
        assert!(out.iter().all(|v| *v == 0.0));
        params[net.proj_b] = 1.0;
        let out = net.forward::<f32>(&params, &vec![0.0; 3 * 16 * 16]).unwrap().output;
        assert_eq!(out[0], 1.0);
    }

    #[test]
    fn wrong_input_size_is_error() {
        let net = ToyCnn::new(16, &[4, 4, 4, 4], 8).unwrap();
        let params = net.init_params(1);
        assert!(net.forward::<f32>(&params, &[0.0; 10]).is_err());
    }

    fn central_diff_check(seed: u64) {
        let net = ToyCnn::new(16, &[3, 4, 5, 6], 5).unwrap();
        let params: Vec<f64> = net.init_params(seed).iter().map(|v| *v as f64).collect();
        let mut params = params;
        for (i, p) in params.iter_mut().enumerate() {
            if i >= net.convs[0].b_off && i < net.convs[0].b_off + 3 {
                *p = 0.05 * (i as f64).sin();
            }
        }
        let input: Vec<f64> = (0..3 * 16 * 16).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect();
        let coef: Vec<f64> = (0..5).map(|i| 1.0 + 0.3 * i as f64).collect();
        let loss = |p: &[f64]| -> f64 {
            let y = net.forward(p, &input).unwrap().output;
            y.iter().zip(&coef).map(|(y, c)| c * y * y).sum::<f64>()
        };
        let cache = net.forward(&params, &input).unwrap();
        let d_out: Vec<f64> = cache.output.iter().zip(&coef).map(|(y, c)| 2.0 * c * y).collect();
        let mut grad = vec![0.0; net.param_count()];
        net.backward(&params, &cache, &d_out, &mut grad);
        let eps = 1e-5;
        for i in (0..net.param_count()).step_by(7) {
            let mut p = params.clone();
            p[i] += eps;
            let lp = loss(&p);
            p[i] -= 2.0 * eps;
            let lm = loss(&p);
            let fd = (lp - lm) / (2.0 * eps);
            let denom = fd.abs().max(grad[i].abs()).max(1e-6);
            assert!((fd - grad[i]).abs() / denom < 1e-3, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        central_diff_check(3);
    }
}
