use rand::Rng;

use super::config::AugmentConfig;
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Rotates every plane clockwise by `turns` quarter turns. Pixel `(r, c)` of a
/// `W x W` plane moves to `(c, W - 1 - r)` per turn.
pub fn rotate_quarter(img: &Tensor<f32>, turns: u8) -> Result<Tensor<f32>> {
    let s = img.shape();
    let turns = turns % 4;
    if turns % 2 == 1 && s.h != s.w {
        return Err(Error::dim("quarter-turn rotation of non-square image", "w", s.h, s.w));
    }
    let mut out = img.clone();
    for _ in 0..turns {
        let src = out.clone();
        let n = s.h;
        for b in 0..s.n {
            for ch in 0..s.c {
                for r in 0..n {
                    for c in 0..n {
                        out.set(b, ch, c, n - 1 - r, src.at(b, ch, r, c));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Left-right flip.
pub fn mirror(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    Tensor::from_fn(s, |n, c, h, w| img.at(n, c, h, s.w - 1 - w))
}

/// Zooms about the image center by `factor` with bilinear sampling, keeping the
/// size: `factor > 1` crops, `factor < 1` shrinks and pads by edge replication.
pub fn scale(img: &Tensor<f32>, factor: f64) -> Tensor<f32> {
    let s = img.shape();
    if factor == 1.0 {
        return img.clone();
    }
    let (cy, cx) = ((s.h as f64 - 1.0) / 2.0, (s.w as f64 - 1.0) / 2.0);
    Tensor::from_fn(s, |n, c, h, w| {
        let y = ((h as f64 - cy) / factor + cy).clamp(0.0, s.h as f64 - 1.0);
        let x = ((w as f64 - cx) / factor + cx).clamp(0.0, s.w as f64 - 1.0);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(s.h - 1), (x0 + 1).min(s.w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let p = |yy, xx| img.at(n, c, yy, xx) as f64;
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        (top * (1.0 - fy) + bottom * fy) as f32
    })
}

/// One random rotation, optional mirror and one random scale.
pub fn augment(img: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<f32>> {
    let turns = cfg.rotations[rng.gen_range(0..cfg.rotations.len())];
    let flip = cfg.mirror && rng.gen_bool(0.5);
    let (lo, hi) = cfg.scale_range;
    let factor = if lo < hi { rng.gen_range(lo..=hi) } else { lo };
    let mut out = rotate_quarter(img, turns)?;
    if flip {
        out = mirror(&out);
    }
    Ok(scale(&out, factor))
}

pub(crate) fn check_square(shape: Shape, cfg: &AugmentConfig) -> Result<()> {
    if shape.h != shape.w && cfg.rotations.iter().any(|r| r % 2 == 1) {
        return Err(Error::Config(format!(
            "90/270 degree rotations need square inputs, images are {}x{}",
            shape.h, shape.w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(n: usize) -> Tensor<f32> {
        Tensor::from_fn(Shape::new(1, 2, n, n), |_, c, h, w| (c * 100 + h * n + w) as f32)
    }

    #[test]
    fn quarter_turn_index_oracle() {
        let img = ramp(4);
        let rot = rotate_quarter(&img, 1).unwrap();
        for c in 0..2 {
            for r in 0..4 {
                for col in 0..4 {
                    assert_eq!(rot.at(0, c, col, 3 - r), img.at(0, c, r, col));
                }
            }
        }
    }

    #[test]
    fn half_turn_twice_is_identity() {
        let img = ramp(5);
        let twice = rotate_quarter(&rotate_quarter(&img, 2).unwrap(), 2).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn identity_config_is_identity() {
        let img = ramp(6);
        let mut rng = crate::seed::rng(0);
        assert_eq!(augment(&img, &AugmentConfig::none(), &mut rng).unwrap(), img);
    }

    #[test]
    fn zoom_in_on_constant_stays_constant() {
        let img = Tensor::full(Shape::new(1, 3, 8, 8), 0.7f32);
        assert!(scale(&img, 1.3).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        assert!(scale(&img, 0.8).data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
    }

    #[test]
    fn odd_turn_of_rectangle_is_rejected() {
        let img = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 6));
        assert!(rotate_quarter(&img, 1).is_err());
        assert!(rotate_quarter(&img, 2).is_ok());
    }

    proptest! {
        #[test]
        fn augmentation_preserves_shape_and_range(seed in any::<u64>(), n in 2usize..9) {
            let mut rng = crate::seed::rng(seed);
            let img = Tensor::from_fn(Shape::new(1, 3, n, n), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
            let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
            let out = augment(&img, &AugmentConfig::default(), &mut rng).unwrap();
            prop_assert_eq!(out.shape(), img.shape());
            prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-6 && v <= hi + 1e-6));
        }

        #[test]
        fn four_quarter_turns_are_identity(n in 1usize..7) {
            let img = ramp(n);
            prop_assert_eq!(rotate_quarter(&img, 1).unwrap().shape(), img.shape());
            let mut out = img.clone();
            for _ in 0..4 {
                out = rotate_quarter(&out, 1).unwrap();
            }
            prop_assert_eq!(out, img);
        }
    }
}
