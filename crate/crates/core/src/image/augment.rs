//! Photometric training augmentation: contrast about the image mean,
//! brightness offset, Gaussian read noise, and probabilistic fixed-pattern
//! noise injection.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{apply_fpn, synthesize_column_fpn, FpnPattern, RadiometricImage, MAX_COUNT};

/// Ranges and probabilities for [`photometric_augment`].
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationConfig {
    /// Contrast gain interval (unitless), applied about the image mean.
    pub gain_range: (f64, f64),
    /// Brightness offset interval in counts.
    pub offset_range: (f64, f64),
    /// Probability of injecting a fixed-pattern noise field.
    pub fpn_probability: f64,
    /// Column-offset amplitude in counts for synthesized patterns.
    pub fpn_amplitude: f64,
    /// Standard deviation of per-pixel Gaussian noise in counts.
    pub noise_sigma: f64,
}

impl AugmentationConfig {
    /// Identity configuration: augment returns the input untouched.
    pub fn identity() -> Self {
        Self {
            gain_range: (1.0, 1.0),
            offset_range: (0.0, 0.0),
            fpn_probability: 0.0,
            fpn_amplitude: 0.0,
            noise_sigma: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        let ordered = self.gain_range.0 <= self.gain_range.1
            && self.offset_range.0 <= self.offset_range.1;
        if !ordered {
            return Err(AugmentError::EmptyRange);
        }
        if !(0.0..=1.0).contains(&self.fpn_probability) {
            return Err(AugmentError::BadProbability(self.fpn_probability));
        }
        if self.noise_sigma < 0.0 || self.fpn_amplitude < 0.0 {
            return Err(AugmentError::NegativeAmplitude);
        }
        Ok(())
    }
}

impl Default for AugmentationConfig {
    /// Training defaults: mild contrast/brightness jitter, strong stripe
    /// noise when triggered.
    fn default() -> Self {
        Self {
            gain_range: (0.7, 1.3),
            offset_range: (-2000.0, 2000.0),
            fpn_probability: 0.5,
            fpn_amplitude: 400.0,
            noise_sigma: 30.0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("gain or offset range is empty (min > max)")]
    EmptyRange,
    #[error("fpn probability {0} outside [0, 1]")]
    BadProbability(f64),
    #[error("noise sigma and fpn amplitude must be non-negative")]
    NegativeAmplitude,
}

// Sub-stream ids. Each augmentation stage draws from its own ChaCha stream of
// the caller's seed so that toggling one stage (for example the FPN branch)
// never shifts the draws of another.
const STREAM_PHOTO: u64 = 1;
const STREAM_FPN: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Applies contrast/brightness jitter, optional synthesized column FPN, and
/// Gaussian noise. Deterministic per seed.
pub fn photometric_augment(
    image: &RadiometricImage,
    cfg: &AugmentationConfig,
    seed: u64,
) -> RadiometricImage {
    photometric_augment_with_bank(image, cfg, &[], seed)
}

/// Like [`photometric_augment`] but drawing injected FPN from `bank` when it
/// is non-empty (synthesizing a column pattern otherwise). Bank patterns with
/// mismatched dimensions are skipped.
pub fn photometric_augment_with_bank(
    image: &RadiometricImage,
    cfg: &AugmentationConfig,
    bank: &[FpnPattern],
    seed: u64,
) -> RadiometricImage {
    debug_assert!(cfg.validate().is_ok(), "augmentation config must be validated");

    let mut photo = stream_rng(seed, STREAM_PHOTO);
    let gain = if cfg.gain_range.0 == cfg.gain_range.1 {
        cfg.gain_range.0
    } else {
        photo.gen_range(cfg.gain_range.0..=cfg.gain_range.1)
    };
    let offset = if cfg.offset_range.0 == cfg.offset_range.1 {
        cfg.offset_range.0
    } else {
        photo.gen_range(cfg.offset_range.0..=cfg.offset_range.1)
    };

    let mean = image.mean();
    let mut out = if gain == 1.0 && offset == 0.0 {
        image.clone()
    } else {
        let data = image
            .as_slice()
            .iter()
            .map(|&v| (gain * (v - mean) + mean + offset).clamp(0.0, MAX_COUNT))
            .collect();
        RadiometricImage::new(image.width(), image.height(), image.timestamp(), data)
            .expect("clamped values are in range")
    };

    if cfg.noise_sigma > 0.0 {
        let mut noise_rng = stream_rng(seed, STREAM_NOISE);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("sigma validated non-negative");
        let data = out
            .as_slice()
            .iter()
            .map(|&v| (v + normal.sample(&mut noise_rng)).clamp(0.0, MAX_COUNT))
            .collect();
        out = RadiometricImage::new(image.width(), image.height(), image.timestamp(), data)
            .expect("clamped values are in range");
    }

    let mut fpn_rng = stream_rng(seed, STREAM_FPN);
    if cfg.fpn_probability > 0.0 && fpn_rng.gen::<f64>() < cfg.fpn_probability {
        let usable: Vec<&FpnPattern> = bank
            .iter()
            .filter(|p| p.width() == image.width() && p.height() == image.height())
            .collect();
        let pattern = if usable.is_empty() {
            synthesize_column_fpn(image.width(), image.height(), cfg.fpn_amplitude, fpn_rng.gen())
        } else {
            usable[fpn_rng.gen_range(0..usable.len())].clone()
        };
        out = apply_fpn(&out, &pattern).expect("pattern dims match by construction");
    }

    out
}
