use crate::error::{Error, Result};
use crate::tensor::{Element, Shape, Tensor};

/// Result of [`max_pool2x2`]: the pooled tensor and, for every output entry,
/// the flat input index that produced it.
#[derive(Clone, Debug)]
pub struct MaxPoolOutput<T: Element = f32> {
    pub output: Tensor<T>,
    pub argmax: Vec<usize>,
}

/// 2x2 max pooling with stride 2. Odd spatial sizes are rejected.
pub fn max_pool2x2<T: Element>(x: &Tensor<T>) -> Result<MaxPoolOutput<T>> {
    let s = x.shape();
    if s.h % 2 != 0 {
        return Err(Error::dim("max_pool2x2 needs even extent", "h", s.h + 1, s.h));
    }
    if s.w % 2 != 0 {
        return Err(Error::dim("max_pool2x2 needs even extent", "w", s.w + 1, s.w));
    }
    let out_shape = Shape::new(s.n, s.c, s.h / 2, s.w / 2);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = Vec::with_capacity(out_shape.numel());
    let src = x.data();
    let dst = out.data_mut();
    let mut k = 0;
    for n in 0..s.n {
        for c in 0..s.c {
            let base = (n * s.c + c) * s.h * s.w;
            for oy in 0..s.h / 2 {
                for ox in 0..s.w / 2 {
                    let top = base + 2 * oy * s.w + 2 * ox;
                    let mut best = top;
                    // first maximum in row-major window order wins ties
                    for idx in [top + 1, top + s.w, top + s.w + 1] {
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                    dst[k] = src[best];
                    argmax.push(best);
                    k += 1;
                }
            }
        }
    }
    Ok(MaxPoolOutput { output: out, argmax })
}

/// Routes each upstream entry back to the input position that won its window.
pub fn max_pool2x2_backward<T: Element>(input_shape: Shape, argmax: &[usize], upstream: &Tensor<T>) -> Result<Tensor<T>> {
    if upstream.len() != argmax.len() {
        return Err(Error::dim("max_pool2x2_backward upstream", "len", argmax.len(), upstream.len()));
    }
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(upstream.data()) {
        d[idx] += g;
    }
    Ok(dx)
}
