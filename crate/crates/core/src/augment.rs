//! Image preprocessing and seeded training-time augmentation.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pixels::{PixelTensor, CHANNELS};

/// Channel statistics of the 1000-class pretraining corpus the backbones
/// were trained on.
pub const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JitterConfig {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl JitterConfig {
    pub const OFF: JitterConfig = JitterConfig {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
            ("hue", self.hue),
        ] {
            if !(f >= 0.0 && f.is_finite()) {
                return Err(Error::arg(format!("jitter {name} factor must be >= 0, got {f}")));
            }
        }
        if self.hue > 0.5 {
            return Err(Error::arg(format!("jitter hue factor must be <= 0.5, got {}", self.hue)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlurConfig {
    pub enabled: bool,
    pub radius: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
}

impl Default for BlurConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            radius: 2,
            sigma_min: 0.1,
            sigma_max: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub target_size: usize,
    pub flip_probability: f64,
    pub jitter: JitterConfig,
    pub blur: BlurConfig,
    pub rotation_degrees: f64,
    pub seed: u64,
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            target_size: 300,
            flip_probability: 0.5,
            jitter: JitterConfig::default(),
            blur: BlurConfig::default(),
            rotation_degrees: 10.0,
            seed: 0,
            mean: IMAGENET_MEAN,
            std: IMAGENET_STD,
        }
    }
}

impl AugmentationConfig {
    /// Same sizing and normalization with every random transform switched off.
    pub fn without_augmentation(&self) -> Self {
        Self {
            flip_probability: 0.0,
            jitter: JitterConfig::OFF,
            blur: BlurConfig {
                enabled: false,
                ..self.blur
            },
            rotation_degrees: 0.0,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 {
            return Err(Error::arg("target_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::arg(format!(
                "flip_probability must lie in [0, 1], got {}",
                self.flip_probability
            )));
        }
        self.jitter.validate()?;
        if self.blur.enabled {
            let b = &self.blur;
            if b.radius == 0 || !(b.sigma_min > 0.0) || b.sigma_max < b.sigma_min {
                return Err(Error::arg(format!(
                    "blur needs radius >= 1 and 0 < sigma_min <= sigma_max, got {b:?}"
                )));
            }
        }
        if !(self.rotation_degrees >= 0.0 && self.rotation_degrees.is_finite()) {
            return Err(Error::arg(format!(
                "rotation_degrees must be >= 0, got {}",
                self.rotation_degrees
            )));
        }
        if self.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::arg("normalization deviations must be positive"));
        }
        Ok(())
    }
}

/// Bilinear resize to `size`x`size`. Aspect ratio is not preserved.
pub fn resize(img: &PixelTensor, size: usize) -> Result<PixelTensor> {
    resize_to(img, size, size)
}

pub fn resize_to(img: &PixelTensor, width: usize, height: usize) -> Result<PixelTensor> {
    if width == 0 || height == 0 {
        return Err(Error::arg(format!("resize target must be positive, got {width}x{height}")));
    }
    if (width, height) == (img.width(), img.height()) {
        return Ok(img.clone());
    }
    let sx = img.width() as f32 / width as f32;
    let sy = img.height() as f32 / height as f32;
    let xs: Vec<_> = (0..width).map(|x| sample_axis(x, sx, img.width())).collect();
    let ys: Vec<_> = (0..height).map(|y| sample_axis(y, sy, img.height())).collect();
    Ok(PixelTensor::from_fn(width, height, |x, y| {
        let (x0, x1, fx) = xs[x];
        let (y0, y1, fy) = ys[y];
        let mut out = [0f32; 3];
        let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        for ch in 0..CHANNELS {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bottom = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bottom - top) * fy;
        }
        out
    }))
}

// Half-pixel-centre source coordinate, clamped to the image.
fn sample_axis(dst: usize, scale: f32, len: usize) -> (usize, usize, f32) {
    let src = ((dst as f32 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f32);
    let i0 = src.floor() as usize;
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f32)
}

pub fn flip_horizontal(img: &PixelTensor) -> PixelTensor {
    let w = img.width();
    PixelTensor::from_fn(w, img.height(), |x, y| img.pixel(w - 1 - x, y))
}

/// Mirrors the image left-right with the given probability.
pub fn horizontal_flip<R: Rng + ?Sized>(img: &PixelTensor, probability: f64, rng: &mut R) -> Result<PixelTensor> {
    if !(0.0..=1.0).contains(&probability) {
        return Err(Error::arg(format!("flip probability must lie in [0, 1], got {probability}")));
    }
    let draw: f64 = rng.random();
    Ok(if draw < probability {
        flip_horizontal(img)
    } else {
        img.clone()
    })
}

/// Concrete multiplicative factors (and hue offset) for one jitter call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterDraws {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue_shift: f32,
}

impl JitterDraws {
    pub const IDENTITY: JitterDraws = JitterDraws {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue_shift: 0.0,
    };

    pub fn sample<R: Rng + ?Sized>(cfg: &JitterConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let mut factor = |f: f64| -> f32 {
            if f == 0.0 {
                1.0
            } else {
                rng.random_range((1.0 - f).max(0.0)..=1.0 + f) as f32
            }
        };
        let brightness = factor(cfg.brightness);
        let contrast = factor(cfg.contrast);
        let saturation = factor(cfg.saturation);
        let hue_shift = if cfg.hue == 0.0 {
            0.0
        } else {
            rng.random_range(-cfg.hue..=cfg.hue) as f32
        };
        Ok(Self {
            brightness,
            contrast,
            saturation,
            hue_shift,
        })
    }
}

pub fn color_jitter<R: Rng + ?Sized>(img: &PixelTensor, cfg: &JitterConfig, rng: &mut R) -> Result<PixelTensor> {
    let draws = JitterDraws::sample(cfg, rng)?;
    Ok(apply_jitter(img, &draws))
}

/// Applies brightness, contrast, saturation and hue in that order, clamping
/// to `[0, 1]` after each step.
pub fn apply_jitter(img: &PixelTensor, draws: &JitterDraws) -> PixelTensor {
    let mut out = img.clone();
    if draws.brightness != 1.0 {
        for v in out.data_mut() {
            *v = (*v * draws.brightness).clamp(0.0, 1.0);
        }
    }
    if draws.contrast != 1.0 {
        let n = (out.width() * out.height()) as f64;
        let mean = (out.data().chunks_exact(CHANNELS).map(|p| f64::from(luma(p))).sum::<f64>() / n) as f32;
        blend_toward(&mut out, draws.contrast, |_| mean);
    }
    if draws.saturation != 1.0 {
        blend_toward(&mut out, draws.saturation, luma);
    }
    if draws.hue_shift != 0.0 {
        for px in out.data_mut().chunks_exact_mut(CHANNELS) {
            let (h, s, v) = rgb_to_hsv(px[0], px[1], px[2]);
            let (r, g, b) = hsv_to_rgb((h + draws.hue_shift).rem_euclid(1.0), s, v);
            px[0] = r.clamp(0.0, 1.0);
            px[1] = g.clamp(0.0, 1.0);
            px[2] = b.clamp(0.0, 1.0);
        }
    }
    out
}

fn luma(px: &[f32]) -> f32 {
    0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2]
}

fn blend_toward(img: &mut PixelTensor, factor: f32, anchor: impl Fn(&[f32]) -> f32) {
    for px in img.data_mut().chunks_exact_mut(CHANNELS) {
        let a = anchor(px);
        for v in px.iter_mut() {
            *v = (factor * *v + (1.0 - factor) * a).clamp(0.0, 1.0);
        }
    }
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let s = if max > 0.0 { delta / max } else { 0.0 };
    if delta == 0.0 {
        return (0.0, s, max);
    }
    let h = if max == r {
        ((g - b) / delta).rem_euclid(6.0)
    } else if max == g {
        (b - r) / delta + 2.0
    } else {
        (r - g) / delta + 4.0
    };
    (h / 6.0, s, max)
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

/// Normalized 1-D Gaussian weights for offsets `-radius..=radius`.
pub fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f32> {
    let weights: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total) as f32).collect()
}

/// Mirror index into `0..len` with the edge sample repeated
/// (`-1 -> 0`, `len -> len - 1`). With a symmetric kernel this keeps the
/// channel sums of the blurred image equal to the input's.
pub fn reflect_index(i: i64, len: usize) -> usize {
    let period = 2 * len as i64;
    let m = i.rem_euclid(period);
    if m < len as i64 {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with mirrored borders.
pub fn gaussian_blur(img: &PixelTensor, radius: usize, sigma: f64) -> Result<PixelTensor> {
    if radius == 0 || !(sigma > 0.0) {
        return Err(Error::arg(format!("blur needs radius >= 1 and sigma > 0, got {radius}, {sigma}")));
    }
    let kernel = gaussian_kernel(radius, sigma);
    let r = radius as i64;
    let (w, h) = (img.width(), img.height());
    let horizontal = PixelTensor::from_fn(w, h, |x, y| {
        let mut acc = [0f32; 3];
        for (k, wt) in kernel.iter().enumerate() {
            let px = img.pixel(reflect_index(x as i64 + k as i64 - r, w), y);
            for c in 0..CHANNELS {
                acc[c] += wt * px[c];
            }
        }
        acc
    });
    Ok(PixelTensor::from_fn(w, h, |x, y| {
        let mut acc = [0f32; 3];
        for (k, wt) in kernel.iter().enumerate() {
            let px = horizontal.pixel(x, reflect_index(y as i64 + k as i64 - r, h));
            for c in 0..CHANNELS {
                acc[c] += wt * px[c];
            }
        }
        acc
    }))
}

/// Rotates counter-clockwise by `degrees` about the image centre with
/// bilinear resampling; samples outside the frame take the nearest edge value.
pub fn rotate(img: &PixelTensor, degrees: f64) -> PixelTensor {
    if degrees == 0.0 {
        return img.clone();
    }
    let (w, h) = (img.width(), img.height());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    PixelTensor::from_fn(w, h, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = (cx + dx * cos - dy * sin).clamp(0.0, (w - 1) as f64);
        let sy = (cy + dx * sin + dy * cos).clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = ((sx - x0 as f64) as f32, (sy - y0 as f64) as f32);
        let (a, b, c, d) = (img.pixel(x0, y0), img.pixel(x1, y0), img.pixel(x0, y1), img.pixel(x1, y1));
        let mut out = [0f32; 3];
        for ch in 0..CHANNELS {
            let top = a[ch] + (b[ch] - a[ch]) * fx;
            let bottom = c[ch] + (d[ch] - c[ch]) * fx;
            out[ch] = top + (bottom - top) * fy;
        }
        out
    })
}

pub fn random_rotation<R: Rng + ?Sized>(img: &PixelTensor, max_degrees: f64, rng: &mut R) -> Result<PixelTensor> {
    if !(max_degrees >= 0.0 && max_degrees.is_finite()) {
        return Err(Error::arg(format!("max rotation must be >= 0, got {max_degrees}")));
    }
    if max_degrees == 0.0 {
        return Ok(img.clone());
    }
    let angle = rng.random_range(-max_degrees..=max_degrees);
    Ok(rotate(img, angle))
}

pub fn normalize(img: &PixelTensor, mean: [f32; 3], std: [f32; 3]) -> PixelTensor {
    let mut out = img.clone();
    for px in out.data_mut().chunks_exact_mut(CHANNELS) {
        for c in 0..CHANNELS {
            px[c] = (px[c] - mean[c]) / std[c];
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Step {
    Resize(usize),
    Flip(f64),
    Jitter(JitterConfig),
    Blur(BlurConfig),
    Rotate(f64),
    Normalize { mean: [f32; 3], std: [f32; 3] },
}

/// A composed transform owning its random stream. Give each worker its own
/// instance with a distinct seed.
#[derive(Debug, Clone)]
pub struct Pipeline {
    steps: Vec<Step>,
    rng: ChaCha8Rng,
}

pub fn build_pipeline(cfg: &AugmentationConfig, mode: Mode) -> Result<Pipeline> {
    cfg.validate()?;
    let mut steps = vec![Step::Resize(cfg.target_size)];
    if mode == Mode::Train {
        steps.extend([
            Step::Flip(cfg.flip_probability),
            Step::Jitter(cfg.jitter),
            Step::Blur(cfg.blur),
            Step::Rotate(cfg.rotation_degrees),
        ]);
    }
    steps.push(Step::Normalize {
        mean: cfg.mean,
        std: cfg.std,
    });
    Ok(Pipeline {
        steps,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    })
}

impl Pipeline {
    pub fn steps(&self) -> &[Step] {
        &self.steps
    }

    pub fn reseed(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
    }

    pub fn apply(&mut self, img: &PixelTensor) -> Result<PixelTensor> {
        let mut cur = img.clone();
        for step in &self.steps {
            cur = match step {
                Step::Resize(size) => resize(&cur, *size)?,
                Step::Flip(p) => horizontal_flip(&cur, *p, &mut self.rng)?,
                Step::Jitter(j) => color_jitter(&cur, j, &mut self.rng)?,
                Step::Blur(b) if b.enabled => {
                    let sigma = self.rng.random_range(b.sigma_min..=b.sigma_max);
                    gaussian_blur(&cur, b.radius, sigma)?
                }
                Step::Blur(_) => cur,
                Step::Rotate(max) => random_rotation(&cur, *max, &mut self.rng)?,
                Step::Normalize { mean, std } => normalize(&cur, *mean, *std),
            };
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(w: usize, h: usize) -> PixelTensor {
        PixelTensor::from_fn(w, h, |x, y| {
            let v = (x * 7 + y * 13) as f32;
            [(v % 17.0) / 17.0, (v % 5.0) / 5.0, ((x * y) % 11) as f32 / 11.0]
        })
    }

    #[test]
    fn resize_shapes() {
        let img = ramp(600, 600);
        let out = resize(&img, 300).unwrap();
        assert_eq!((out.width(), out.height()), (300, 300));
        let out = resize(&ramp(400, 200), 300).unwrap();
        assert_eq!((out.width(), out.height()), (300, 300));
        assert!(resize(&img, 0).is_err());
    }

    #[test]
    fn resize_same_size_is_identity() {
        let img = ramp(30, 30);
        assert_eq!(resize(&img, 30).unwrap(), img);
        // The generic path at scale 1 also reproduces the input exactly.
        assert_eq!(sample_axis(4, 1.0, 30), (4, 5, 0.0));
    }

    #[test]
    fn flip_definition_and_involution() {
        let img = PixelTensor::new(2, 1, vec![0.1, 0.2, 0.3, 0.7, 0.8, 0.9]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let flipped = horizontal_flip(&img, 1.0, &mut rng).unwrap();
        assert_eq!(flipped.data(), &[0.7, 0.8, 0.9, 0.1, 0.2, 0.3]);
        assert_eq!(horizontal_flip(&flipped, 1.0, &mut rng).unwrap(), img);
        let big = ramp(9, 4);
        assert_eq!(horizontal_flip(&big, 0.0, &mut rng).unwrap(), big);
        assert!(horizontal_flip(&big, 1.5, &mut rng).is_err());
    }

    #[test]
    fn jitter_zero_is_identity() {
        let img = ramp(12, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert_eq!(color_jitter(&img, &JitterConfig::OFF, &mut rng).unwrap(), img);
    }

    #[test]
    fn jitter_pinned_brightness() {
        let img = PixelTensor::filled(4, 4, [0.5; 3]);
        let f = 0.3f32;
        let out = apply_jitter(
            &img,
            &JitterDraws {
                brightness: 1.0 + f,
                ..JitterDraws::IDENTITY
            },
        );
        assert!(out.data().iter().all(|&v| v == 0.5 * (1.0 + f)));
        let bright = PixelTensor::filled(2, 2, [0.9; 3]);
        let out = apply_jitter(
            &bright,
            &JitterDraws {
                brightness: 1.5,
                ..JitterDraws::IDENTITY
            },
        );
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn jitter_rejects_large_hue() {
        let cfg = JitterConfig {
            hue: 0.6,
            ..JitterConfig::OFF
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(color_jitter(&ramp(2, 2), &cfg, &mut rng).is_err());
    }

    #[test]
    fn hsv_round_trip() {
        for &(r, g, b) in &[(0.2f32, 0.4, 0.9), (0.9, 0.1, 0.1), (0.5, 0.5, 0.5), (0.0, 1.0, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-6 && (g - g2).abs() < 1e-6 && (b - b2).abs() < 1e-6);
        }
    }

    #[test]
    fn blur_constant_and_mean() {
        let flat = PixelTensor::filled(10, 7, [0.25, 0.5, 0.75]);
        let out = gaussian_blur(&flat, 3, 1.5).unwrap();
        assert!(out.max_abs_diff(&flat) < 1e-6);
        let img = ramp(23, 17);
        let out = gaussian_blur(&img, 4, 2.0).unwrap();
        let (a, b) = (img.channel_means(), out.channel_means());
        for c in 0..3 {
            assert!((a[c] - b[c]).abs() < 1e-6, "channel {c}: {} vs {}", a[c], b[c]);
        }
        assert!(gaussian_blur(&img, 0, 1.0).is_err());
        assert!(gaussian_blur(&img, 1, 0.0).is_err());
    }

    #[test]
    fn reflect_index_mirrors_with_edge_repeat() {
        let got: Vec<usize> = (-4..8).map(|i| reflect_index(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 0, 1, 2, 3, 3, 2, 1, 0]);
        assert_eq!(reflect_index(-3, 1), 0);
    }

    #[test]
    fn rotation_zero_and_half_turn() {
        let img = ramp(11, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_rotation(&img, 0.0, &mut rng).unwrap(), img);
        // Point-symmetric image: value depends on distance from the centre.
        let sym = PixelTensor::from_fn(11, 11, |x, y| {
            let d = ((x as f32 - 5.0).abs() + (y as f32 - 5.0).abs()) / 10.0;
            [d, 1.0 - d, d * 0.5]
        });
        assert!(rotate(&sym, 180.0).max_abs_diff(&sym) < 1e-5);
    }

    #[test]
    fn pipelines() {
        let cfg = AugmentationConfig {
            target_size: 32,
            ..Default::default()
        };
        let img = ramp(50, 40);
        let mut eval = build_pipeline(&cfg, Mode::Eval).unwrap();
        let a = eval.apply(&img).unwrap();
        assert_eq!(a, eval.apply(&img).unwrap());
        assert_eq!((a.width(), a.height()), (32, 32));

        let mut plain = build_pipeline(&cfg.without_augmentation(), Mode::Train).unwrap();
        assert_eq!(plain.apply(&img).unwrap(), a);

        let mut t1 = build_pipeline(&cfg, Mode::Train).unwrap();
        let mut t2 = build_pipeline(&cfg, Mode::Train).unwrap();
        for _ in 0..3 {
            let x = t1.apply(&img).unwrap();
            assert_eq!(x, t2.apply(&img).unwrap());
            assert_eq!((x.width(), x.height()), (32, 32));
            assert!(x.data().iter().all(|v| v.is_finite()));
        }
    }
}
