use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Weights and geometry of a stride-1 2-D convolution.
///
/// `weight` is `[C_out, C_in, k, k]`, `bias` is `[C_out]`. Output spatial
/// size is `H + 2·padding − dilation·(k − 1)`; with `padding = dilation·(k−1)/2`
/// it equals the input size.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub dilation: usize,
    pub padding: usize,
}

impl<T: Scalar> Conv2dParams<T> {
    pub fn new(weight: Tensor<T>, bias: Tensor<T>, dilation: usize) -> Result<Self> {
        if weight.rank() != 4 || weight.dim(2) != weight.dim(3) {
            return Err(Error::shape(format!(
                "conv weight must be [C_out, C_in, k, k], got {:?}",
                weight.shape()
            )));
        }
        if bias.shape() != [weight.dim(0)] {
            return Err(Error::shape(format!(
                "conv bias must be [{}], got {:?}",
                weight.dim(0),
                bias.shape()
            )));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be positive"));
        }
        let k = weight.dim(2);
        if k % 2 == 0 {
            return Err(Error::config(format!("kernel size must be odd, got {k}")));
        }
        Ok(Self {
            padding: dilation * (k - 1) / 2,
            weight,
            bias,
            dilation,
        })
    }

    /// Zero weights and bias with "same" padding.
    pub fn zeros(c_out: usize, c_in: usize, k: usize, dilation: usize) -> Self {
        Self::new(
            Tensor::zeros(&[c_out, c_in, k, k]),
            Tensor::zeros(&[c_out]),
            dilation,
        )
        .expect("valid conv geometry")
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            weight: Tensor::zeros(self.weight.shape()),
            bias: Tensor::zeros(self.bias.shape()),
            dilation: self.dilation,
            padding: self.padding,
        }
    }

    pub fn c_out(&self) -> usize {
        self.weight.dim(0)
    }

    pub fn c_in(&self) -> usize {
        self.weight.dim(1)
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim(2)
    }

    fn out_size(&self, n: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel() - 1);
        (n + 2 * self.padding)
            .checked_sub(span)
            .ok_or_else(|| Error::shape("convolution footprint exceeds padded input"))
    }

    /// Range of output rows (or columns) whose tap at `offset` lands inside
    /// the input, plus the input index of the first one.
    fn tap_range(offset: isize, n_in: usize, n_out: usize) -> Option<(usize, usize, usize)> {
        let lo = (-offset).max(0) as usize;
        let hi = ((n_in as isize - offset).min(n_out as isize)).max(0) as usize;
        (lo < hi).then(|| (lo, hi, (lo as isize + offset) as usize))
    }
}

/// Cross-correlation with dilation and zero padding, stride 1.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, params: &Conv2dParams<T>) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape(format!(
            "conv2d input must be [C, H, W], got {:?}",
            input.shape()
        )));
    }
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    if c_in != params.c_in() {
        return Err(Error::shape(format!(
            "conv2d expects {} input channels, got {c_in}",
            params.c_in()
        )));
    }
    let (ho, wo) = (params.out_size(h)?, params.out_size(w)?);
    let (c_out, k) = (params.c_out(), params.kernel());
    let x = input.data();
    let wt = params.weight.data();
    let mut out = vec![T::zero(); c_out * ho * wo];
    for co in 0..c_out {
        let plane = &mut out[co * ho * wo..(co + 1) * ho * wo];
        plane.fill(params.bias.data()[co]);
        for ci in 0..c_in {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let oy = (ky * params.dilation) as isize - params.padding as isize;
                let Some((y0, y1, iy0)) = Conv2dParams::<T>::tap_range(oy, h, ho) else {
                    continue;
                };
                for kx in 0..k {
                    let ox = (kx * params.dilation) as isize - params.padding as isize;
                    let Some((x0, x1, ix0)) = Conv2dParams::<T>::tap_range(ox, w, wo) else {
                        continue;
                    };
                    let wv = wt[((co * c_in + ci) * k + ky) * k + kx];
                    for (dy, y) in (y0..y1).enumerate() {
                        let srow = &src[(iy0 + dy) * w + ix0..(iy0 + dy) * w + ix0 + (x1 - x0)];
                        let orow = &mut plane[y * wo + x0..y * wo + x1];
                        for (o, &s) in orow.iter_mut().zip(srow) {
                            *o = *o + wv * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[c_out, ho, wo], out)
}

/// Adjoint of [`conv2d`]: accumulates weight/bias gradients into `grads` and
/// returns the gradient with respect to `input`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    params: &Conv2dParams<T>,
    grad_out: &Tensor<T>,
    grads: &mut Conv2dParams<T>,
) -> Tensor<T> {
    let (c_in, h, w) = (input.dim(0), input.dim(1), input.dim(2));
    let (c_out, ho, wo) = (grad_out.dim(0), grad_out.dim(1), grad_out.dim(2));
    let k = params.kernel();
    let x = input.data();
    let g = grad_out.data();
    let wt = params.weight.data();
    let mut gx = vec![T::zero(); c_in * h * w];
    for co in 0..c_out {
        let gplane = &g[co * ho * wo..(co + 1) * ho * wo];
        let gb = &mut grads.bias.data_mut()[co];
        *gb = *gb + gplane.iter().copied().sum();
        for ci in 0..c_in {
            let src = &x[ci * h * w..(ci + 1) * h * w];
            let dst = &mut gx[ci * h * w..(ci + 1) * h * w];
            for ky in 0..k {
                let oy = (ky * params.dilation) as isize - params.padding as isize;
                let Some((y0, y1, iy0)) = Conv2dParams::<T>::tap_range(oy, h, ho) else {
                    continue;
                };
                for kx in 0..k {
                    let ox = (kx * params.dilation) as isize - params.padding as isize;
                    let Some((x0, x1, ix0)) = Conv2dParams::<T>::tap_range(ox, w, wo) else {
                        continue;
                    };
                    let widx = ((co * c_in + ci) * k + ky) * k + kx;
                    let wv = wt[widx];
                    let mut acc = T::zero();
                    for (dy, y) in (y0..y1).enumerate() {
                        let base = (iy0 + dy) * w + ix0;
                        let grow = &gplane[y * wo + x0..y * wo + x1];
                        let srow = &src[base..base + (x1 - x0)];
                        let drow = &mut dst[base..base + (x1 - x0)];
                        for ((&gv, &sv), d) in grow.iter().zip(srow).zip(drow) {
                            acc = acc + gv * sv;
                            *d = *d + wv * gv;
                        }
                    }
                    let gw = &mut grads.weight.data_mut()[widx];
                    *gw = *gw + acc;
                }
            }
        }
    }
    Tensor::new(input.shape(), gx).expect("input shape")
}

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Scalar>(input: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= input.rank() {
        return Err(Error::shape(format!(
            "softmax axis {axis} out of range for rank {}",
            input.rank()
        )));
    }
    let n = input.dim(axis);
    let inner: usize = input.shape()[axis + 1..].iter().product();
    let outer: usize = input.shape()[..axis].iter().product();
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - max).exp();
                out[at(j)] = e;
                total = total + e;
            }
            for j in 0..n {
                out[at(j)] = out[at(j)] / total;
            }
        }
    }
    Tensor::new(input.shape(), out)
}

/// Split `[N_t, D]` tokens into the `[CLS]` token `[1, 1, D]` and the patch
/// grid `[H, W, D]`, `H = W = sqrt(N_t − 1)`.
pub fn tokens_to_grid<T: Scalar>(tokens: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if tokens.rank() != 2 {
        return Err(Error::shape(format!(
            "tokens must be [N_t, D], got {:?}",
            tokens.shape()
        )));
    }
    let (nt, d) = (tokens.dim(0), tokens.dim(1));
    let side = grid_side(nt)?;
    let cls = Tensor::new(&[1, 1, d], tokens.data()[..d].to_vec())?;
    let grid = Tensor::new(&[side, side, d], tokens.data()[d..].to_vec())?;
    Ok((cls, grid))
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<T: Scalar>(cls: &Tensor<T>, grid: &Tensor<T>) -> Result<Tensor<T>> {
    if grid.rank() != 3 || cls.len() != grid.dim(2) {
        return Err(Error::shape(format!(
            "cls {:?} and grid {:?} do not match",
            cls.shape(),
            grid.shape()
        )));
    }
    let d = grid.dim(2);
    let mut data = Vec::with_capacity(cls.len() + grid.len());
    data.extend_from_slice(cls.data());
    data.extend_from_slice(grid.data());
    Tensor::new(&[1 + grid.dim(0) * grid.dim(1), d], data)
}

pub(crate) fn grid_side(n_tokens: usize) -> Result<usize> {
    let patches = n_tokens
        .checked_sub(1)
        .filter(|&p| p > 0)
        .ok_or_else(|| Error::config("need at least one patch token besides [CLS]"))?;
    let side = (patches as f64).sqrt().round() as usize;
    if side * side != patches {
        return Err(Error::config(format!(
            "{patches} patch tokens do not form a square grid"
        )));
    }
    Ok(side)
}

/// `[H, W, C]` → `[C, H, W]`.
pub fn hwc_to_chw<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (h, w, c) = (t.dim(0), t.dim(1), t.dim(2));
    let src = t.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, rest) = (i / (h * w), i % (h * w));
        src[rest * c + ch]
    })
}

/// `[C, H, W]` → `[H, W, C]`.
pub fn chw_to_hwc<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    let src = t.data();
    Tensor::from_fn(&[h, w, c], |i| {
        let (pos, ch) = (i / c, i % c);
        src[ch * h * w + pos]
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Sigmoid,
}

pub fn activation<T: Scalar>(input: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Gelu => input.map(gelu),
        Activation::Sigmoid => input.map(sigmoid),
    }
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// `d gelu / dx = Φ(x) + x·φ(x)`.
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let cdf = T::of(0.5) * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * T::of(0.5)).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `[m, k] × [k, n] → [m, n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0) {
        return Err(Error::shape(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
    let mut c = vec![T::zero(); m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
    Tensor::new(&[m, n], c)
}

/// Row-major `c (m×n) [+]= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)`
/// is `k×n`. A transposed operand is stored as its `k×m` / `n×k` original.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: sizes asserted above; strides describe the row-major layouts.
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

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, Init};
    use proptest::prelude::*;

    /// Direct nested-loop cross-correlation, written independently of the
    /// strided kernel above.
    fn conv_oracle(input: &Tensor<f64>, p: &Conv2dParams<f64>) -> Tensor<f64> {
        let (ci_n, h, w) = (input.dim(0), input.dim(1), input.dim(2));
        let (co_n, k) = (p.c_out(), p.kernel());
        let mut out = Tensor::zeros(&[co_n, h, w]);
        for co in 0..co_n {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = p.bias.data()[co];
                    for ci in 0..ci_n {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = y as isize + (ky * p.dilation) as isize - p.padding as isize;
                                let ix = x as isize + (kx * p.dilation) as isize - p.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += p.weight.data()[((co * ci_n + ci) * k + ky) * k + kx]
                                    * input.data()[(ci * h + iy as usize) * w + ix as usize];
                            }
                        }
                    }
                    out.data_mut()[(co * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    fn random_conv(c_out: usize, c_in: usize, k: usize, dil: usize, seed: u64) -> Conv2dParams<f64> {
        Conv2dParams::new(
            seeded_init(&[c_out, c_in, k, k], Init::TruncNormal { std: 0.5 }, seed),
            seeded_init(&[c_out], Init::TruncNormal { std: 0.5 }, seed + 1),
            dil,
        )
        .unwrap()
    }

    #[test]
    fn one_by_one_identity() {
        let p = Conv2dParams::new(
            Tensor::<f32>::full(&[1, 1, 1, 1], 1.0),
            Tensor::zeros(&[1]),
            1,
        )
        .unwrap();
        let x: Tensor<f32> = seeded_init(&[1, 5, 7], Init::TruncNormal { std: 1.0 }, 3);
        assert!(conv2d(&x, &p).unwrap().bit_eq(&x));
    }

    #[test]
    fn dilated_impulse_response() {
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3]);
        w.data_mut()[0] = 1.0; // top-left tap only
        let mut p = Conv2dParams::new(w, Tensor::zeros(&[1]), 3).unwrap();
        let mut x = Tensor::<f64>::zeros(&[1, 9, 9]);
        x.data_mut()[4 * 9 + 4] = 1.0;
        let out = conv2d(&x, &p).unwrap();
        let nz: Vec<(isize, isize)> = (0..81)
            .filter(|&i| out.data()[i] != 0.0)
            .map(|i| ((i / 9) as isize - 4, (i % 9) as isize - 4))
            .collect();
        // single tap at (−3,−3) in kernel space reads the impulse from (+3,+3)
        assert_eq!(nz, vec![(3, 3)]);

        // all taps on: responses exactly on the {−3,0,3}² lattice
        p.weight.fill(1.0);
        let out = conv2d(&x, &p).unwrap();
        for i in 0..81 {
            let (dy, dx) = ((i / 9) as isize - 4, (i % 9) as isize - 4);
            let on_lattice = [-3, 0, 3].contains(&dy) && [-3, 0, 3].contains(&dx);
            assert_eq!(out.data()[i] != 0.0, on_lattice, "offset ({dy},{dx})");
        }
    }

    #[test]
    fn ones_kernel_center_and_corner() {
        let p = Conv2dParams::new(
            Tensor::<f64>::full(&[1, 1, 3, 3], 1.0),
            Tensor::zeros(&[1]),
            1,
        )
        .unwrap();
        let out = conv2d(&Tensor::full(&[1, 5, 5], 1.0), &p).unwrap();
        assert_eq!(out.data()[2 * 5 + 2], 9.0);
        assert_eq!(out.data()[0], 4.0);
        assert_eq!(out.shape(), &[1, 5, 5]);
    }

    #[test]
    fn channel_mismatch_is_shape_error() {
        let p = Conv2dParams::<f32>::zeros(2, 3, 3, 1);
        let x = Tensor::<f32>::zeros(&[4, 5, 5]);
        assert!(matches!(conv2d(&x, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_matches_oracle_on_random_inputs() {
        for (seed, (h, w, dil)) in [(4, 4, 1), (6, 5, 3), (8, 8, 5), (7, 8, 2), (5, 6, 1)]
            .into_iter()
            .enumerate()
        {
            let seed = seed as u64 * 10;
            let p = random_conv(3, 2, 3, dil, seed);
            let x: Tensor<f64> = seeded_init(&[2, h, w], Init::TruncNormal { std: 1.0 }, seed + 7);
            let diff = conv2d(&x, &p).unwrap().max_abs_diff(&conv_oracle(&x, &p));
            assert!(diff < 1e-10, "diff {diff}");
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let p = random_conv(2, 3, 3, 2, 40);
        let x: Tensor<f64> = seeded_init(&[3, 5, 6], Init::TruncNormal { std: 1.0 }, 41);
        let g: Tensor<f64> = seeded_init(&[2, 5, 6], Init::TruncNormal { std: 1.0 }, 42);
        let loss = |x: &Tensor<f64>, p: &Conv2dParams<f64>| -> f64 {
            conv2d(x, p)
                .unwrap()
                .data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads = p.zeros_like();
        let gx = conv2d_backward(&x, &p, &g, &mut grads);
        let h = 1e-6;
        for i in [0, 7, 29, 60, 89] {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data_mut()[i] += h;
            xm.data_mut()[i] -= h;
            let num = (loss(&xp, &p) - loss(&xm, &p)) / (2.0 * h);
            assert!((num - gx.data()[i]).abs() < 1e-7);
        }
        for i in [0, 5, 17, 35, 53] {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp.weight.data_mut()[i] += h;
            pm.weight.data_mut()[i] -= h;
            let num = (loss(&x, &pp) - loss(&x, &pm)) / (2.0 * h);
            assert!((num - grads.weight.data()[i]).abs() < 1e-7);
        }
        let bias_num: f64 = g.data()[..30].iter().sum();
        assert!((grads.bias.data()[0] - bias_num).abs() < 1e-12);
    }

    #[test]
    fn softmax_examples() {
        let u = softmax(&Tensor::<f64>::full(&[4], 2.5), 0).unwrap();
        assert!(u.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let s = softmax(&Tensor::<f64>::new(&[2], vec![0.0, 2f64.ln()]).unwrap(), 0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-15);
        assert!(softmax(&s, 1).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4], |i| (i as f64 * 0.37).sin() * 3.0);
        let s = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                let sum: f64 = (0..3).map(|j| s.data()[(o * 3 + j) * 4 + i]).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tokens_to_grid_shapes_and_errors() {
        let t = Tensor::<f32>::zeros(&[65, 64]);
        let (cls, grid) = tokens_to_grid(&t).unwrap();
        assert_eq!(cls.shape(), &[1, 1, 64]);
        assert_eq!(grid.shape(), &[8, 8, 64]);
        let t = Tensor::<f32>::from_fn(&[17, 3], |i| i as f32);
        let (cls, grid) = tokens_to_grid(&t).unwrap();
        assert_eq!(grid.shape(), &[4, 4, 3]);
        assert!(grid_to_tokens(&cls, &grid).unwrap().bit_eq(&t));
        // 9 tokens leave 8 patches, which is not a square
        assert!(matches!(
            tokens_to_grid(&Tensor::<f32>::zeros(&[9, 4])),
            Err(Error::Config(_))
        ));
        assert_eq!(tokens_to_grid(&Tensor::<f32>::zeros(&[10, 4])).unwrap().1.shape(), &[3, 3, 4]);
    }

    #[test]
    fn activation_values() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((sigmoid(3f64.ln()) - 0.75).abs() < 1e-15);
        let t = activation(&Tensor::<f32>::from_fn(&[5], |i| i as f32 - 2.0), Activation::Sigmoid);
        assert!(t.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for x in [-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-9);
        }
    }

    #[test]
    fn layout_permutations_round_trip() {
        let t = Tensor::<f64>::from_fn(&[3, 4, 5], |i| i as f64);
        assert!(hwc_to_chw(&chw_to_hwc(&t)).bit_eq(&t));
        assert_eq!(chw_to_hwc(&t).shape(), &[4, 5, 3]);
    }

    #[test]
    fn gemm_transposes() {
        let a = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[3, 2], |i| (i * i) as f64);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[36.0, 59.0, 96.0, 164.0]);
        // (bᵀ aᵀ) = (a b)ᵀ
        let mut ct = vec![0.0; 4];
        gemm(2, 3, 2, b.data(), true, a.data(), true, &mut ct, false);
        assert_eq!(ct, vec![36.0, 96.0, 59.0, 164.0]);
    }

    proptest! {
        #[test]
        fn softmax_rows_normalized_and_shift_invariant(
            xs in proptest::collection::vec(-20.0f64..20.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let n = xs.len();
            let t = Tensor::new(&[n], xs.clone()).unwrap();
            let s = softmax(&t, 0).unwrap();
            prop_assert!((s.sum() - 1.0).abs() < 1e-12);
            prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            let shifted = softmax(&t.map(|v| v + c), 0).unwrap();
            prop_assert!(s.max_abs_diff(&shifted) < 1e-12);

            let t32: Tensor<f32> = t.cast();
            prop_assert!((softmax(&t32, 0).unwrap().sum() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn token_grid_round_trip(side in 1usize..7, d in 1usize..9) {
            let nt = side * side + 1;
            let t = Tensor::<f32>::from_fn(&[nt, d], |i| (i as f32).sin());
            let (cls, grid) = tokens_to_grid(&t).unwrap();
            prop_assert!(grid_to_tokens(&cls, &grid).unwrap().bit_eq(&t));
        }
    }
}
