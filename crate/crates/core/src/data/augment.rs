use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A 3-channel image stored channel-major (`[3, height, width]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for a 3x{height}x{width} image, got {}",
                Self::CHANNELS * height * width,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            pixels,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            pixels: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn at_mut(&mut self, c: usize, y: usize, x: usize) -> &mut f32 {
        &mut self.pixels[(c * self.height + y) * self.width + x]
    }

    fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Base (both agents) and sender-only augmentation settings.
///
/// Jitter strengths follow the usual colour-jitter convention: a factor is
/// drawn uniformly from `[max(0, 1 - p), 1 + p]` (hue: a shift in `[-p, p]`).
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    pub p_bri: f64,
    pub p_con: f64,
    pub p_sat: f64,
    pub p_hue: f64,
    pub p_grayscale: f64,
    pub p_hflip: f64,
    pub sender_noise: bool,
    pub noise_mean: f64,
    pub noise_variance: f64,
    pub sender_rotation: bool,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            p_bri: 0.1,
            p_con: 0.1,
            p_sat: 0.1,
            p_hue: 0.1,
            p_grayscale: 0.1,
            p_hflip: 0.5,
            sender_noise: false,
            noise_mean: 0.0,
            noise_variance: 0.1,
            sender_rotation: false,
        }
    }
}

impl AugmentationConfig {
    /// Every transform disabled; the pipeline is then the identity.
    pub fn identity() -> Self {
        AugmentationConfig {
            p_bri: 0.0,
            p_con: 0.0,
            p_sat: 0.0,
            p_hue: 0.0,
            p_grayscale: 0.0,
            p_hflip: 0.0,
            sender_noise: false,
            noise_mean: 0.0,
            noise_variance: 0.1,
            sender_rotation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_bri", self.p_bri),
            ("p_con", self.p_con),
            ("p_sat", self.p_sat),
            ("p_grayscale", self.p_grayscale),
            ("p_hflip", self.p_hflip),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        if !(0.0..=0.5).contains(&self.p_hue) {
            return Err(Error::Config(format!(
                "p_hue must lie in [0, 0.5], got {}",
                self.p_hue
            )));
        }
        if !(self.noise_variance >= 0.0) || !self.noise_mean.is_finite() {
            return Err(Error::Config(format!(
                "noise must have finite mean and nonnegative variance, got N({}, {})",
                self.noise_mean, self.noise_variance
            )));
        }
        Ok(())
    }
}

/// Per-channel mean/std normalization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

pub const IMAGENET_NORMALIZATION: Normalization = Normalization {
    mean: [0.485, 0.456, 0.406],
    std: [0.229, 0.224, 0.225],
};

pub const CIFAR10_NORMALIZATION: Normalization = Normalization {
    mean: [0.4914, 0.4822, 0.4465],
    std: [0.2470, 0.2435, 0.2616],
};

impl Normalization {
    pub fn apply(&self, image: &mut Image) {
        let plane = image.plane();
        for c in 0..3 {
            for v in &mut image.pixels[c * plane..(c + 1) * plane] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
    }
}

const LUMA: [f32; 3] = [0.2989, 0.587, 0.114];

/// ITU-R 601 luma replicated over the three channels.
pub fn grayscale(image: &Image) -> Image {
    let plane = image.plane();
    let mut out = image.clone();
    for i in 0..plane {
        let l = LUMA[0] * image.pixels[i]
            + LUMA[1] * image.pixels[plane + i]
            + LUMA[2] * image.pixels[2 * plane + i];
        for c in 0..3 {
            out.pixels[c * plane + i] = l;
        }
    }
    out
}

pub fn hflip(image: &Image) -> Image {
    let mut out = image.clone();
    for c in 0..3 {
        for y in 0..image.height {
            for x in 0..image.width {
                *out.at_mut(c, y, x) = image.at(c, y, image.width - 1 - x);
            }
        }
    }
    out
}

/// Rotate counter-clockwise by `k` right angles (`k` taken mod 4).
///
/// Right-angle rotations are pure index permutations, so they are exactly
/// invertible: `rotate(rotate(x, k), 4 - k) == x`.
pub fn rotate_quarter_turns(image: &Image, k: u8) -> Image {
    let (h, w) = (image.height, image.width);
    match k % 4 {
        0 => image.clone(),
        2 => {
            let mut out = Image::zeros(h, w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        *out.at_mut(c, y, x) = image.at(c, h - 1 - y, w - 1 - x);
                    }
                }
            }
            out
        }
        1 => {
            let mut out = Image::zeros(w, h);
            for c in 0..3 {
                for y in 0..w {
                    for x in 0..h {
                        *out.at_mut(c, y, x) = image.at(c, x, w - 1 - y);
                    }
                }
            }
            out
        }
        _ => {
            let mut out = Image::zeros(w, h);
            for c in 0..3 {
                for y in 0..w {
                    for x in 0..h {
                        *out.at_mut(c, y, x) = image.at(c, h - 1 - x, y);
                    }
                }
            }
            out
        }
    }
}

fn blend(image: &mut Image, other: impl Fn(usize) -> f32, factor: f32) {
    for (i, v) in image.pixels.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn adjust_brightness(image: &mut Image, factor: f32) {
    for v in &mut image.pixels {
        *v = (*v * factor).clamp(0.0, 1.0);
    }
}

fn adjust_contrast(image: &mut Image, factor: f32) {
    let gray = grayscale(image);
    let plane = image.plane();
    let mean = gray.pixels[..plane].iter().sum::<f32>() / plane as f32;
    blend(image, |_| mean, factor);
}

fn adjust_saturation(image: &mut Image, factor: f32) {
    let gray = grayscale(image);
    blend(image, |i| gray.pixels[i], factor);
}

fn adjust_hue(image: &mut Image, shift: f32) {
    let plane = image.plane();
    for i in 0..plane {
        let (r, g, b) = (
            image.pixels[i],
            image.pixels[plane + i],
            image.pixels[2 * plane + i],
        );
        let (h, s, v) = rgb_to_hsv(r, g, b);
        let (r, g, b) = hsv_to_rgb((h + shift).rem_euclid(1.0), s, v);
        image.pixels[i] = r;
        image.pixels[plane + i] = g;
        image.pixels[2 * plane + i] = b;
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let v = max;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, v);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, v)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match (sector as i32).rem_euclid(6) {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn jitter_factor(strength: f64, rng: &mut impl Rng) -> f32 {
    let lo = (1.0 - strength).max(0.0);
    rng.random_range(lo..=1.0 + strength) as f32
}

/// Colour jitter (random order), random grayscale, random horizontal flip.
///
/// Expects pixel values in `[0, 1]`. A transform whose strength or
/// probability is zero is skipped entirely, so the all-zero config is an exact
/// identity.
pub fn base_augment(image: &Image, config: &AugmentationConfig, rng: &mut impl Rng) -> Image {
    let mut out = image.clone();

    let mut order = [0u8, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 if config.p_bri > 0.0 => {
                let f = jitter_factor(config.p_bri, rng);
                adjust_brightness(&mut out, f);
            }
            1 if config.p_con > 0.0 => {
                let f = jitter_factor(config.p_con, rng);
                adjust_contrast(&mut out, f);
            }
            2 if config.p_sat > 0.0 => {
                let f = jitter_factor(config.p_sat, rng);
                adjust_saturation(&mut out, f);
            }
            3 if config.p_hue > 0.0 => {
                let shift = rng.random_range(-config.p_hue..=config.p_hue) as f32;
                adjust_hue(&mut out, shift);
            }
            _ => {}
        }
    }

    if config.p_grayscale > 0.0 && rng.random::<f64>() < config.p_grayscale {
        out = grayscale(&out);
    }
    if config.p_hflip > 0.0 && rng.random::<f64>() < config.p_hflip {
        out = hflip(&out);
    }
    out
}

/// Sender-only augmentation: a uniformly drawn right-angle rotation (when
/// enabled), then additive Gaussian noise (when enabled). Returns the rotation
/// label, 0 when rotation is off.
pub fn sender_augment(
    image: &Image,
    config: &AugmentationConfig,
    rng: &mut impl Rng,
) -> (Image, u8) {
    let label = if config.sender_rotation {
        rng.random_range(0..4u8)
    } else {
        0
    };
    (sender_augment_with(image, config, label, rng), label)
}

/// [`sender_augment`] with the rotation label fixed by the caller.
pub fn sender_augment_with(
    image: &Image,
    config: &AugmentationConfig,
    rotation_label: u8,
    rng: &mut impl Rng,
) -> Image {
    let mut out = if config.sender_rotation {
        rotate_quarter_turns(image, rotation_label)
    } else {
        image.clone()
    };
    if config.sender_noise {
        let normal = Normal::new(config.noise_mean, config.noise_variance.sqrt())
            .expect("validated noise parameters");
        for v in &mut out.pixels {
            *v += normal.sample(rng) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use proptest::prelude::*;
    use rand::Rng;

    fn ramp(h: usize, w: usize) -> Image {
        let pixels = (0..3 * h * w)
            .map(|i| ((i * 37) % 101) as f32 / 100.0)
            .collect();
        Image::new(h, w, pixels).unwrap()
    }

    #[test]
    fn zeroed_config_is_identity() {
        let img = ramp(32, 32);
        let cfg = AugmentationConfig::identity();
        let mut rng = seeded(1);
        for _ in 0..20 {
            assert_eq!(base_augment(&img, &cfg, &mut rng), img);
            let (s, label) = sender_augment(&img, &cfg, &mut rng);
            assert_eq!(s, img);
            assert_eq!(label, 0);
        }
    }

    #[test]
    fn certain_flip_mirrors_exactly() {
        let img = ramp(8, 5);
        let cfg = AugmentationConfig {
            p_hflip: 1.0,
            ..AugmentationConfig::identity()
        };
        let out = base_augment(&img, &cfg, &mut seeded(3));
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..5 {
                    assert_eq!(out.at(c, y, x), img.at(c, y, 4 - x));
                }
            }
        }
    }

    #[test]
    fn grayscale_frequency_near_configured_rate() {
        // Monte Carlo count over 10^4 draws; only grayscale is stochastic here
        // so detection is exact (equal channels on a colourful image).
        let img = ramp(4, 4);
        let cfg = AugmentationConfig {
            p_grayscale: 0.1,
            ..AugmentationConfig::identity()
        };
        let mut rng = seeded(42);
        let n = 10_000;
        let plane = 16;
        let hits = (0..n)
            .filter(|_| {
                let out = base_augment(&img, &cfg, &mut rng);
                out.pixels[..plane] == out.pixels[plane..2 * plane]
            })
            .count();
        let rate = hits as f64 / n as f64;
        assert!((rate - 0.1).abs() <= 0.01, "grayscale rate {rate}");
    }

    #[test]
    fn default_config_keeps_shape_and_range() {
        let img = ramp(32, 32);
        let cfg = AugmentationConfig::default();
        let mut rng = seeded(9);
        for _ in 0..50 {
            let out = base_augment(&img, &cfg, &mut rng);
            assert_eq!((out.height, out.width), (32, 32));
            assert!(out.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn half_turn_matches_index_formula() {
        let img = ramp(6, 6);
        let cfg = AugmentationConfig {
            sender_rotation: true,
            ..AugmentationConfig::identity()
        };
        let out = sender_augment_with(&img, &cfg, 2, &mut seeded(0));
        for c in 0..3 {
            for i in 0..6 {
                for j in 0..6 {
                    assert_eq!(out.at(c, i, j), img.at(c, 5 - i, 5 - j));
                }
            }
        }
    }

    #[test]
    fn quarter_turn_is_counter_clockwise() {
        // Top-right corner moves to the top-left.
        let mut img = Image::zeros(3, 3);
        *img.at_mut(0, 0, 2) = 1.0;
        let out = rotate_quarter_turns(&img, 1);
        assert_eq!(out.at(0, 0, 0), 1.0);
    }

    #[test]
    fn noise_moments_match_configuration() {
        let img = Image::zeros(100, 100);
        let cfg = AugmentationConfig {
            sender_noise: true,
            ..AugmentationConfig::identity()
        };
        let mut rng = seeded(17);
        let mut diffs = Vec::with_capacity(120_000);
        while diffs.len() < 100_000 {
            let (out, _) = sender_augment(&img, &cfg, &mut rng);
            diffs.extend(out.pixels.iter().zip(&img.pixels).map(|(a, b)| (a - b) as f64));
        }
        let n = diffs.len() as f64;
        let mean = diffs.iter().sum::<f64>() / n;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() <= 0.01, "noise mean {mean}");
        assert!((var - 0.1).abs() <= 0.01, "noise variance {var}");
    }

    #[test]
    fn rotation_labels_are_uniform() {
        let img = ramp(2, 2);
        let cfg = AugmentationConfig {
            sender_rotation: true,
            ..AugmentationConfig::identity()
        };
        let mut rng = seeded(5);
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[sender_augment(&img, &cfg, &mut rng).1 as usize] += 1;
        }
        let expected = n as f64 / 4.0;
        let sigma = (n as f64 * 0.25 * 0.75).sqrt();
        for c in counts {
            assert!((c as f64 - expected).abs() <= 3.0 * sigma, "{counts:?}");
        }
    }

    #[test]
    fn hsv_round_trip_is_close() {
        let mut rng = seeded(2);
        for _ in 0..1000 {
            let (r, g, b) = (rng.random(), rng.random(), rng.random());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn invalid_probabilities_rejected() {
        let cfg = AugmentationConfig {
            p_grayscale: -0.1,
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentationConfig {
            noise_variance: -1.0,
            ..AugmentationConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn inverse_rotation_recovers_input(k in 0u8..4, h in 1usize..7, w in 1usize..7, seed in 0u64..1000) {
            let mut rng = seeded(seed);
            let pixels = (0..3 * h * w).map(|_| rng.random::<f32>()).collect();
            let img = Image::new(h, w, pixels).unwrap();
            let cfg = AugmentationConfig { sender_rotation: true, ..AugmentationConfig::identity() };
            let (rotated, label) = sender_augment(&img, &cfg, &mut rng);
            let back = rotate_quarter_turns(&rotated, (4 - label) % 4);
            prop_assert_eq!(back, img.clone());
            prop_assert_eq!(rotate_quarter_turns(&rotate_quarter_turns(&img, k), (4 - k) % 4), img);
        }
    }
}
