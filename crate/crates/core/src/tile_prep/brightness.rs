use image::RgbImage;

use crate::error::{Error, Result};
use crate::numeric::percentile_nearest_rank;

pub const TARGET_P90: f64 = 240.0;
/// A P90 this close to the target is treated as already standardized, which
/// makes the operation idempotent despite 8-bit rounding.
pub const P90_SLACK: f64 = 1.0;

pub fn luminance(px: [u8; 3]) -> f64 {
    0.299 * f64::from(px[0]) + 0.587 * f64::from(px[1]) + 0.114 * f64::from(px[2])
}

pub fn luminance_p90(img: &RgbImage) -> f64 {
    let lum: Vec<f64> = img.pixels().map(|p| luminance(p.0)).collect();
    percentile_nearest_rank(&lum, 90.0)
}

/// Scales all channels by `240 / P90(luminance)`, rounding and clamping to
/// 8 bits.
pub fn standardize_brightness(img: &RgbImage) -> Result<RgbImage> {
    let p90 = luminance_p90(img);
    if p90 <= 0.0 {
        return Err(Error::NoSignal("90th-percentile luminance is zero".into()));
    }
    if (p90 - TARGET_P90).abs() <= P90_SLACK {
        return Ok(img.clone());
    }
    let s = TARGET_P90 / p90;
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v = (f64::from(*v) * s).round().clamp(0.0, 255.0) as u8;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;
    use proptest::prelude::*;

    #[test]
    fn formula_examples() {
        let grey = RgbImage::from_pixel(224, 224, Rgb([120, 120, 120]));
        let out = standardize_brightness(&grey).unwrap();
        assert!(out.pixels().all(|p| *p == Rgb([240, 240, 240])));

        let at_target = RgbImage::from_fn(224, 224, |x, _| {
            if x < 200 {
                Rgb([100, 150, 90])
            } else {
                Rgb([240, 240, 240])
            }
        });
        assert_eq!(luminance_p90(&at_target), 240.0);
        assert_eq!(standardize_brightness(&at_target).unwrap(), at_target);

        let black = RgbImage::new(224, 224);
        assert!(matches!(standardize_brightness(&black), Err(Error::NoSignal(_))));
    }

    proptest! {
        #[test]
        fn idempotent_when_unclamped(seed in any::<u64>(), lo in 20u8..200) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = RgbImage::from_fn(32, 32, |_, _| {
                Rgb([rng.gen_range(lo..=lo + 12), rng.gen_range(lo..=lo + 12), rng.gen_range(lo..=lo + 12)])
            });
            let once = standardize_brightness(&img).unwrap();
            prop_assume!(once.iter().all(|&v| v < 255));
            let twice = standardize_brightness(&once).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
