use rand::Rng;

use super::ImageSample;

/// Decisions drawn by one call to [`augment_with_record`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRecord {
    pub flipped: bool,
    /// `(top, left, side)` of the square crop before resizing.
    pub crop: (usize, usize, usize),
}

/// Smallest crop side as a fraction of the image side.
const MIN_CROP: f64 = 0.85;

pub fn flip_horizontal(image: &ImageSample) -> ImageSample {
    let s = image.size;
    let mut pixels = vec![0.0; image.pixels.len()];
    for y in 0..s {
        for x in 0..s {
            for c in 0..3 {
                pixels[(y * s + x) * 3 + c] = image.at(y, s - 1 - x, c);
            }
        }
    }
    ImageSample {
        pixels,
        size: s,
        class_id: image.class_id,
    }
}

/// Crops the square `(top, left, side)` and resizes it back to the image size
/// with bilinear interpolation.
pub fn crop_resize(image: &ImageSample, top: usize, left: usize, side: usize) -> ImageSample {
    let s = image.size;
    if side == s {
        return image.clone();
    }
    let scale = side as f64 / s as f64;
    let mut pixels = vec![0.0; image.pixels.len()];
    for y in 0..s {
        let sy = ((y as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let wy = sy - y0 as f64;
        for x in 0..s {
            let sx = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let wx = sx - x0 as f64;
            for c in 0..3 {
                let p = |yy: usize, xx: usize| image.at(top + yy, left + xx, c) as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * p(y0, x0) + wx * p(y0, x1))
                    + wy * ((1.0 - wx) * p(y1, x0) + wx * p(y1, x1));
                pixels[(y * s + x) * 3 + c] = v as f32;
            }
        }
    }
    ImageSample {
        pixels,
        size: s,
        class_id: image.class_id,
    }
}

/// Random horizontal flip (p = 0.5) and random square crop resized back to the
/// original size. No color or geometric jitter.
pub fn augment_with_record(image: &ImageSample, rng: &mut impl Rng) -> (ImageSample, AugmentRecord) {
    let s = image.size;
    let flipped = rng.random_bool(0.5);
    let min_side = ((s as f64) * MIN_CROP).ceil() as usize;
    let side = rng.random_range(min_side..=s);
    let top = rng.random_range(0..=s - side);
    let left = rng.random_range(0..=s - side);
    let mut out = crop_resize(image, top, left, side);
    if flipped {
        out = flip_horizontal(&out);
    }
    (
        out,
        AugmentRecord {
            flipped,
            crop: (top, left, side),
        },
    )
}

pub fn augment(image: &ImageSample, rng: &mut impl Rng) -> ImageSample {
    augment_with_record(image, rng).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(size: usize) -> ImageSample {
        let mut pixels = Vec::new();
        for y in 0..size {
            for x in 0..size {
                pixels.extend([x as f32 / size as f32, y as f32 / size as f32, 0.25]);
            }
        }
        ImageSample {
            pixels,
            size,
            class_id: 0,
        }
    }

    #[test]
    fn flip_is_an_involution() {
        let img = ramp(7);
        assert_eq!(flip_horizontal(&flip_horizontal(&img)), img);
    }

    #[test]
    fn flip_reverses_columns() {
        let img = ramp(5);
        let f = flip_horizontal(&img);
        for y in 0..5 {
            for x in 0..5 {
                assert_eq!(f.at(y, x, 0), img.at(y, 4 - x, 0));
            }
        }
    }

    #[test]
    fn full_crop_is_identity() {
        let img = ramp(6);
        assert_eq!(crop_resize(&img, 0, 0, 6), img);
    }

    #[test]
    fn no_color_change_on_constant_images() {
        let img = ImageSample {
            pixels: vec![0.3; 8 * 8 * 3],
            size: 8,
            class_id: 1,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let out = augment(&img, &mut rng);
            assert!(out.pixels.iter().all(|v| (v - 0.3).abs() < 1e-6));
        }
    }

    #[test]
    fn flip_rate_near_half() {
        let img = ramp(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let flips = (0..10_000)
            .filter(|_| augment_with_record(&img, &mut rng).1.flipped)
            .count();
        let rate = flips as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&rate), "{rate}");
    }
}
