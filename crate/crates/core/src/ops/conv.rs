//! 2-D convolution with stride, symmetric zero padding and dilation.
//!
//! Output position `p` sums `w(d) * x(s*p - pad + d*k)` over the kernel grid, so a
//! 3x3 kernel with dilation `d` samples offsets `{-d, 0, d}` around the centre tap
//! when `pad = d`.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Images per chunk when reducing per-image weight gradients. Fixed so the
/// summation order never depends on the thread count.
const GRAD_CHUNK: usize = 8;

/// Geometry of a convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize, padding: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            stride,
            dilation,
            padding,
        }
    }

    /// Square kernel with "same" padding for stride 1: `pad = d * (k - 1) / 2`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, dilation: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, stride, dilation, dilation * (kernel - 1) / 2)
    }

    /// Spatial extent covered by the dilated kernel along each axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            (self.kernel.0 - 1) * self.dilation + 1,
            (self.kernel.1 - 1) * self.dilation + 1,
        )
    }

    pub fn weight_shape(&self) -> Shape {
        Shape::new(self.out_channels, self.in_channels, self.kernel.0, self.kernel.1)
    }

    pub fn weight_count(&self) -> usize {
        self.weight_shape().numel()
    }

    fn validate(&self) -> Result<()> {
        if self.stride == 0 || self.dilation == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::Config(format!("conv: zero stride/dilation/kernel in {self:?}")));
        }
        if self.dilation > 2 {
            log::warn!("conv: dilation {} outside the usual {{1,2}} range", self.dilation);
        }
        Ok(())
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        self.validate()?;
        let (eh, ew) = self.effective_kernel();
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if eh > ph {
            return Err(Error::dim("conv: kernel extent exceeds padded input", "h", eh, ph));
        }
        if ew > pw {
            return Err(Error::dim("conv: kernel extent exceeds padded input", "w", ew, pw));
        }
        Ok(((ph - eh) / self.stride + 1, (pw - ew) / self.stride + 1))
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        if input.c != self.in_channels {
            return Err(Error::dim("conv input", "c", self.in_channels, input.c));
        }
        let (oh, ow) = self.output_hw(input.h, input.w)?;
        Ok(Shape::new(input.n, self.out_channels, oh, ow))
    }
}

/// Convolution weights plus geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T: Element = f32> {
    pub spec: ConvSpec,
    /// `(out, in, kh, kw)`
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

impl<T: Element> ConvParams<T> {
    pub fn new(spec: ConvSpec, weight: Tensor<T>, bias: Option<Vec<T>>) -> Result<Self> {
        weight.expect_shape(spec.weight_shape(), "conv weight")?;
        if let Some(b) = &bias {
            if b.len() != spec.out_channels {
                return Err(Error::dim("conv bias", "len", spec.out_channels, b.len()));
            }
        }
        spec.validate()?;
        Ok(ConvParams { spec, weight, bias })
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        ConvParams {
            spec,
            weight: Tensor::zeros(spec.weight_shape()),
            bias: None,
        }
    }
}

/// Gradients of a convolution with respect to its input, weights and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T: Element = f32> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Option<Vec<T>>,
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Input coordinate sampled by output index `o` and kernel tap `k`, if inside the image.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k * self.dilation) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

fn im2col<T: Element>(g: &Geometry, image: &[T], col: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let line = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    match g.src(oy, ki, g.h) {
                        None => line.iter_mut().for_each(|v| *v = T::zero()),
                        Some(iy) => {
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.src(ox, kj, g.w) {
                                    Some(ix) => plane[iy * g.w + ix],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Element>(g: &Geometry, col: &[T], image: &mut [T]) {
    let cols = g.cols();
    for c in 0..g.c {
        let plane = &mut image[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..g.oh {
                    let Some(iy) = g.src(oy, ki, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(ix) = g.src(ox, kj, g.w) {
                            plane[iy * g.w + ix] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn geometry<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<(Geometry, Shape)> {
    let out = p.spec.output_shape(x.shape())?;
    let s = x.shape();
    Ok((
        Geometry {
            c: s.c,
            h: s.h,
            w: s.w,
            kh: p.spec.kernel.0,
            kw: p.spec.kernel.1,
            oh: out.h,
            ow: out.w,
            stride: p.spec.stride,
            dilation: p.spec.dilation,
            pad: p.spec.padding,
        },
        out,
    ))
}

/// Forward convolution via patch gathering and one matrix product per image.
pub fn conv2d<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    x.check_finite("conv2d")?;
    let (g, out_shape) = geometry(x, p)?;
    let mut out = Tensor::zeros(out_shape);
    let out_len = out_shape.sample_len();
    let (rows, cols) = (g.rows(), g.cols());
    let weight = p.weight.data();
    out.data_mut()
        .par_chunks_mut(out_len)
        .enumerate()
        .for_each(|(n, y)| {
            let mut col = vec![T::zero(); rows * cols];
            im2col(&g, x.sample(n), &mut col);
            T::gemm(p.spec.out_channels, rows, cols, T::one(), weight, false, &col, false, T::zero(), y);
            if let Some(bias) = &p.bias {
                for (plane, &b) in y.chunks_mut(cols).zip(bias) {
                    plane.iter_mut().for_each(|v| *v += b);
                }
            }
        });
    Ok(out)
}

/// Reference convolution evaluated entry by entry with nested loops.
pub fn conv2d_direct<T: Element>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    x.check_finite("conv2d_direct")?;
    let (g, out_shape) = geometry(x, p)?;
    Ok(Tensor::from_fn(out_shape, |n, o, oy, ox| {
        let mut acc = p.bias.as_ref().map_or(T::zero(), |b| b[o]);
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    if let (Some(iy), Some(ix)) = (g.src(oy, ki, g.h), g.src(ox, kj, g.w)) {
                        acc += p.weight.at(o, c, ki, kj) * x.at(n, c, iy, ix);
                    }
                }
            }
        }
        acc
    }))
}

/// Adjoint of [`conv2d`].
///
/// `need_input` / `need_weight` skip work for gradients the caller will discard;
/// skipped gradients come back as zero tensors.
pub fn conv2d_backward_select<T: Element>(
    x: &Tensor<T>,
    p: &ConvParams<T>,
    upstream: &Tensor<T>,
    need_input: bool,
    need_weight: bool,
) -> Result<ConvGrads<T>> {
    let (g, out_shape) = geometry(x, p)?;
    upstream.expect_shape(out_shape, "conv2d_backward upstream")?;
    let (rows, cols) = (g.rows(), g.cols());
    let oc = p.spec.out_channels;
    let in_len = x.shape().sample_len();
    let out_len = out_shape.sample_len();

    let mut grad_x = Tensor::zeros(x.shape());
    if need_input {
        let weight = p.weight.data();
        grad_x
            .data_mut()
            .par_chunks_mut(in_len)
            .enumerate()
            .for_each(|(n, dx)| {
                let mut dcol = vec![T::zero(); rows * cols];
                let dy = &upstream.data()[n * out_len..(n + 1) * out_len];
                T::gemm(rows, oc, cols, T::one(), weight, true, dy, false, T::zero(), &mut dcol);
                col2im(&g, &dcol, dx);
            });
    }

    let mut grad_w = Tensor::zeros(p.spec.weight_shape());
    if need_weight {
        let batch = x.shape().n;
        let acc = grad_w.data_mut();
        for start in (0..batch).step_by(GRAD_CHUNK) {
            let end = (start + GRAD_CHUNK).min(batch);
            let partials: Vec<Vec<T>> = (start..end)
                .into_par_iter()
                .map(|n| {
                    let mut col = vec![T::zero(); rows * cols];
                    im2col(&g, x.sample(n), &mut col);
                    let dy = &upstream.data()[n * out_len..(n + 1) * out_len];
                    let mut dw = vec![T::zero(); oc * rows];
                    T::gemm(oc, cols, rows, T::one(), dy, false, &col, true, T::zero(), &mut dw);
                    dw
                })
                .collect();
            for dw in partials {
                for (a, b) in acc.iter_mut().zip(dw) {
                    *a += b;
                }
            }
        }
    }

    let grad_b = p.bias.as_ref().map(|_| {
        let mut gb = vec![T::zero(); oc];
        for n in 0..out_shape.n {
            let dy = &upstream.data()[n * out_len..(n + 1) * out_len];
            for (o, plane) in dy.chunks(cols).enumerate() {
                gb[o] += plane.iter().copied().sum();
            }
        }
        gb
    });

    Ok(ConvGrads {
        input: grad_x,
        weight: grad_w,
        bias: grad_b,
    })
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward<T: Element>(x: &Tensor<T>, p: &ConvParams<T>, upstream: &Tensor<T>) -> Result<ConvGrads<T>> {
    conv2d_backward_select(x, p, upstream, true, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn box_sum_of_ones() {
        let x = Tensor::<f32>::full(Shape::new(1, 1, 3, 3), 1.0);
        let p = ConvParams::new(ConvSpec::new(1, 1, 3, 1, 1, 1), Tensor::full(Shape::new(1, 1, 3, 3), 1.0), None).unwrap();
        let y = conv2d(&x, &p).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 3, 3));
        assert_eq!(y.at(0, 0, 1, 1), 9.0);
        for (h, w) in [(0, 0), (0, 2), (2, 0), (2, 2)] {
            assert_eq!(y.at(0, 0, h, w), 4.0);
        }
        assert_eq!(y.at(0, 0, 0, 1), 6.0);
    }

    #[test]
    fn stride_two_halves_56_to_28() {
        let spec = ConvSpec::same(64, 128, 3, 2, 1);
        assert_eq!(spec.output_shape(Shape::new(1, 64, 56, 56)).unwrap(), Shape::new(1, 128, 28, 28));
        let x = Tensor::<f32>::full(Shape::new(1, 64, 56, 56), 0.5);
        let y = conv2d(&x, &ConvParams::zeros(spec)).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 128, 28, 28));
    }

    #[test]
    fn dilated_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random(Shape::new(1, 1, 7, 7), &mut rng);
        let w = random(Shape::new(1, 1, 3, 3), &mut rng);
        let p = ConvParams::new(ConvSpec::new(1, 1, 3, 1, 2, 2), w, None).unwrap();
        let fast = conv2d(&x, &p).unwrap();
        assert_eq!(fast.shape(), Shape::new(1, 1, 7, 7));
        // grid {-2,0,2}^2 around each output position
        for py in 0..7isize {
            for px in 0..7isize {
                let mut acc = 0.0;
                for (i, dy) in [-2isize, 0, 2].iter().enumerate() {
                    for (j, dx) in [-2isize, 0, 2].iter().enumerate() {
                        let (yy, xx) = (py + dy, px + dx);
                        if (0..7).contains(&yy) && (0..7).contains(&xx) {
                            acc += p.weight.at(0, 0, i, j) * x.at(0, 0, yy as usize, xx as usize);
                        }
                    }
                }
                assert!((fast.at(0, 0, py as usize, px as usize) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_channel_mismatch_and_nan() {
        let p = ConvParams::<f32>::zeros(ConvSpec::same(3, 4, 3, 1, 1));
        let err = conv2d(&Tensor::zeros(Shape::new(1, 2, 5, 5)), &p).unwrap_err();
        assert!(matches!(err, Error::Dimension { axis: "c", .. }), "{err}");
        let mut x = Tensor::zeros(Shape::new(1, 3, 5, 5));
        x.data_mut()[3] = f32::NAN;
        assert!(matches!(conv2d(&x, &p), Err(Error::Numeric(_))));
    }

    #[test]
    fn kernel_larger_than_padded_input_is_rejected() {
        let spec = ConvSpec::new(1, 1, 3, 1, 2, 0);
        assert!(matches!(spec.output_hw(4, 4), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(Shape::new(2, 2, 5, 5), &mut rng);
        let p = ConvParams::new(ConvSpec::same(2, 3, 3, 1, 2), random(Shape::new(3, 2, 3, 3), &mut rng), Some(vec![0.1; 3])).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(Shape::new(2, 3, 5, 5))).unwrap();
        assert!(g.input.data().iter().all(|&v| v == 0.0));
        assert!(g.weight.data().iter().all(|&v| v == 0.0));
        assert!(g.bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel_passes_gradient_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(Shape::new(1, 1, 4, 4), &mut rng);
        let p = ConvParams::new(ConvSpec::new(1, 1, 1, 1, 1, 0), Tensor::full(Shape::new(1, 1, 1, 1), 1.0), None).unwrap();
        let up = random(Shape::new(1, 1, 4, 4), &mut rng);
        let g = conv2d_backward(&x, &p, &up).unwrap();
        assert_eq!(g.input.data(), up.data());
    }

    #[test]
    fn weight_grad_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(Shape::new(1, 1, 5, 5), &mut rng);
        let mut p = ConvParams::new(ConvSpec::same(1, 1, 3, 1, 2), random(Shape::new(1, 1, 3, 3), &mut rng), None).unwrap();
        let r = random(Shape::new(1, 1, 5, 5), &mut rng);
        let loss = |p: &ConvParams<f64>| -> f64 {
            conv2d_direct(&x, p).unwrap().data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
        };
        let g = conv2d_backward(&x, &p, &r).unwrap();
        let h = 1e-3;
        for i in 0..9 {
            let orig = p.weight.data()[i];
            p.weight.data_mut()[i] = orig + h;
            let plus = loss(&p);
            p.weight.data_mut()[i] = orig - h;
            let minus = loss(&p);
            p.weight.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = g.weight.data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel <= 1e-4, "tap {i}: {analytic} vs {numeric}");
        }
    }

    #[test]
    fn backward_is_independent_of_batch_chunking() {
        // 19 images span three reduction chunks; the result must equal the per-image sum.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(Shape::new(19, 2, 4, 4), &mut rng);
        let p = ConvParams::new(ConvSpec::same(2, 2, 3, 1, 1), random(Shape::new(2, 2, 3, 3), &mut rng), None).unwrap();
        let up = random(Shape::new(19, 2, 4, 4), &mut rng);
        let full = conv2d_backward(&x, &p, &up).unwrap();
        let mut sum = vec![0.0; 36];
        for n in 0..19 {
            let xs = Tensor::from_vec(Shape::new(1, 2, 4, 4), x.sample(n).to_vec()).unwrap();
            let us = Tensor::from_vec(Shape::new(1, 2, 4, 4), up.sample(n).to_vec()).unwrap();
            let g = conv2d_backward(&xs, &p, &us).unwrap();
            for (a, b) in sum.iter_mut().zip(g.weight.data()) {
                *a += b;
            }
        }
        for (a, b) in sum.iter().zip(full.weight.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
