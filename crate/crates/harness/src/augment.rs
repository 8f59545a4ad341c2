//! Random crop from a zero-padded image plus horizontal flip.

use rand::Rng;

/// Zero padding added on every side before cropping.
pub const CROP_PAD: usize = 4;

/// One image's random draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentDraw {
    /// Crop origin in the padded image, each in `0..=2·pad`.
    pub dy: usize,
    pub dx: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// Leaves the image unchanged.
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        dy: CROP_PAD,
        dx: CROP_PAD,
        flip: false,
    };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            dy: rng.random_range(0..=2 * CROP_PAD),
            dx: rng.random_range(0..=2 * CROP_PAD),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Crops an `h×w` window at `(dy, dx)` of the image padded by `pad` zeros.
pub fn pad_crop(
    image: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    pad: usize,
    dy: usize,
    dx: usize,
) -> Vec<f32> {
    let mut out = vec![0.0; channels * h * w];
    for c in 0..channels {
        for y in 0..h {
            let sy = (y + dy) as isize - pad as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..w {
                let sx = (x + dx) as isize - pad as isize;
                if sx >= 0 && sx < w as isize {
                    out[(c * h + y) * w + x] = image[(c * h + sy as usize) * w + sx as usize];
                }
            }
        }
    }
    out
}

/// Mirrors every row in place.
pub fn hflip(image: &mut [f32], w: usize) {
    for row in image.chunks_exact_mut(w) {
        row.reverse();
    }
}

pub fn apply(image: &[f32], channels: usize, h: usize, w: usize, draw: AugmentDraw) -> Vec<f32> {
    let mut out = pad_crop(image, channels, h, w, CROP_PAD, draw.dy, draw.dx);
    if draw.flip {
        hflip(&mut out, w);
    }
    out
}

/// Augments a packed `[n, c, h, w]` batch in place, one draw per image.
pub fn augment_batch(batch: &mut [f32], channels: usize, h: usize, w: usize, rng: &mut impl Rng) {
    let len = channels * h * w;
    for image in batch.chunks_exact_mut(len) {
        let draw = AugmentDraw::sample(rng);
        let out = apply(image, channels, h, w, draw);
        image.copy_from_slice(&out);
    }
}
