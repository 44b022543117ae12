//! Detector repeatability under a known homography.

use nalgebra::{Matrix3, Vector2, Vector3};

use super::EvalError;

/// Protocol constants for repeatability runs. The point lists handed to
/// [`repeatability`] are expected to be NMS-filtered and capped already
/// (the detector's decode step owns that); `max_points` and `nms_radius`
/// travel here so one config names the whole protocol.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RepeatabilityConfig {
    pub max_points: usize,
    pub nms_radius: usize,
    /// Correctness threshold in pixels: a point counts as repeated when
    /// its mapped position lies within this distance of the other list.
    pub epsilon_px: f64,
}

impl Default for RepeatabilityConfig {
    fn default() -> Self {
        Self { max_points: 500, nms_radius: 8, epsilon_px: 3.0 }
    }
}

impl RepeatabilityConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if !(self.epsilon_px > 0.0) {
            return Err(EvalError::Config {
                reason: format!("epsilon_px must be positive, got {}", self.epsilon_px),
            });
        }
        Ok(())
    }
}

fn map_point(h: &Matrix3<f64>, p: &Vector2<f64>) -> Option<Vector2<f64>> {
    let v = h * Vector3::new(p.x, p.y, 1.0);
    if v.z.abs() < 1e-12 || !v.x.is_finite() || !v.y.is_finite() || !v.z.is_finite() {
        return None;
    }
    Some(Vector2::new(v.x / v.z, v.y / v.z))
}

fn inside(p: &Vector2<f64>, width: usize, height: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= (width - 1) as f64 && p.y <= (height - 1) as f64
}

/// Fraction of `from` points that, mapped by `h`, land within epsilon of
/// some `to` point. Points mapping outside the image (or to infinity) are
/// excluded from the denominator; an empty denominator means the direction
/// is undefined.
fn directional_fraction(
    from: &[Vector2<f64>],
    to: &[Vector2<f64>],
    h: &Matrix3<f64>,
    image_size: (usize, usize),
    epsilon_px: f64,
) -> Option<f64> {
    let mut counted = 0usize;
    let mut matched = 0usize;
    for point in from {
        let Some(mapped) = map_point(h, point) else { continue };
        if !inside(&mapped, image_size.0, image_size.1) {
            continue;
        }
        counted += 1;
        if to.iter().any(|q| (q - mapped).norm() <= epsilon_px) {
            matched += 1;
        }
    }
    (counted > 0).then(|| matched as f64 / counted as f64)
}

/// Symmetric repeatability of two detection lists related by a homography
/// mapping image A coordinates into image B: the A-to-B matched fraction
/// averaged with the B-to-A fraction under the inverse map. Directions
/// with an empty denominator drop out of the average; when both are empty
/// the score is undefined and `None` is returned rather than zero.
pub fn repeatability(
    a: &[Vector2<f64>],
    b: &[Vector2<f64>],
    homography: &Matrix3<f64>,
    image_size: (usize, usize),
    config: &RepeatabilityConfig,
) -> Result<Option<f64>, EvalError> {
    config.validate()?;
    let inverse = homography.try_inverse().ok_or(EvalError::SingularHomography)?;
    let forward = directional_fraction(a, b, homography, image_size, config.epsilon_px);
    let reverse = directional_fraction(b, a, &inverse, image_size, config.epsilon_px);
    Ok(match (forward, reverse) {
        (Some(f), Some(r)) => Some(0.5 * (f + r)),
        (Some(f), None) => Some(f),
        (None, Some(r)) => Some(r),
        (None, None) => None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const IMAGE: (usize, usize) = (100, 80);

    fn config() -> RepeatabilityConfig {
        RepeatabilityConfig::default()
    }

    fn translation(dx: f64, dy: f64) -> Matrix3<f64> {
        Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0)
    }

    #[test]
    fn exactly_mapped_list_scores_one() {
        let h = translation(5.0, -3.0);
        let a = vec![
            Vector2::new(10.0, 10.0),
            Vector2::new(40.0, 55.0),
            Vector2::new(70.0, 20.0),
        ];
        let b: Vec<_> = a.iter().map(|p| map_point(&h, p).unwrap()).collect();
        let score = repeatability(&a, &b, &h, IMAGE, &config()).unwrap();
        assert_eq!(score, Some(1.0));
    }

    #[test]
    fn disjoint_lists_score_zero() {
        let a = vec![Vector2::new(10.0, 10.0)];
        let b = vec![Vector2::new(90.0, 70.0)];
        let score = repeatability(&a, &b, &Matrix3::identity(), IMAGE, &config()).unwrap();
        assert_eq!(score, Some(0.0));
    }

    #[test]
    fn hand_counted_asymmetric_case() {
        // Forward: (10,10) matches (12,10) at distance 2, (50,50) matches
        // nothing, so 1/2. Reverse: (12,10) matches (10,10), so 1/1.
        // Average 0.75.
        let a = vec![Vector2::new(10.0, 10.0), Vector2::new(50.0, 50.0)];
        let b = vec![Vector2::new(12.0, 10.0)];
        let score = repeatability(&a, &b, &Matrix3::identity(), IMAGE, &config()).unwrap();
        assert_eq!(score, Some(0.75));
    }

    #[test]
    fn both_empty_is_undefined_not_zero() {
        let score = repeatability(&[], &[], &Matrix3::identity(), IMAGE, &config()).unwrap();
        assert_eq!(score, None);
    }

    #[test]
    fn one_empty_list_scores_zero() {
        let a = vec![Vector2::new(10.0, 10.0)];
        let score = repeatability(&a, &[], &Matrix3::identity(), IMAGE, &config()).unwrap();
        assert_eq!(score, Some(0.0));
    }

    #[test]
    fn points_mapping_outside_leave_the_denominator() {
        // (95,40) maps to x = 105, off the 100-wide image: it must not
        // count against the forward fraction.
        let h = translation(10.0, 0.0);
        let a = vec![Vector2::new(10.0, 10.0), Vector2::new(95.0, 40.0)];
        let b = vec![Vector2::new(20.0, 10.0)];
        let score = repeatability(&a, &b, &h, IMAGE, &config()).unwrap();
        assert_eq!(score, Some(1.0));
    }

    #[test]
    fn swapping_lists_and_inverting_h_is_symmetric() {
        let h = Matrix3::new(1.2, 0.0, 3.0, 0.0, 0.9, -2.0, 0.0, 0.0, 1.0);
        let a = vec![
            Vector2::new(11.0, 17.0),
            Vector2::new(33.0, 41.0),
            Vector2::new(62.0, 25.0),
            Vector2::new(48.0, 60.0),
        ];
        let b = vec![
            Vector2::new(16.0, 13.0),
            Vector2::new(43.5, 35.0),
            Vector2::new(77.0, 21.0),
        ];
        let ab = repeatability(&a, &b, &h, IMAGE, &config()).unwrap();
        let ba = repeatability(&b, &a, &h.try_inverse().unwrap(), IMAGE, &config()).unwrap();
        assert_eq!(ab, ba);
        assert!(ab.is_some());
    }

    #[test]
    fn invalid_epsilon_is_rejected() {
        let bad = RepeatabilityConfig { epsilon_px: 0.0, ..config() };
        let result = repeatability(&[], &[], &Matrix3::identity(), IMAGE, &bad);
        assert!(matches!(result, Err(EvalError::Config { .. })));
    }

    #[test]
    fn singular_homography_is_rejected() {
        let result = repeatability(&[], &[], &Matrix3::zeros(), IMAGE, &config());
        assert!(matches!(result, Err(EvalError::SingularHomography)));
    }
}
