//! Small geometric primitives shared across modules.

use nalgebra::{Matrix3, UnitQuaternion, Vector2, Vector3};

/// A plane-to-plane projective map acting on pixel coordinates.
///
/// Stored as a 3x3 matrix applied to homogeneous `(x, y, 1)` columns. The
/// matrix must be invertible; constructors reject singular input so `invert`
/// cannot fail downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    m: Matrix3<f64>,
}

/// Error raised by [`Homography`] constructors.
#[derive(Debug, Clone, thiserror::Error)]
pub enum HomographyError {
    #[error("homography matrix is singular or near-singular (|det| = {det:.3e})")]
    Singular { det: f64 },
    #[error("homography matrix contains non-finite entries")]
    NonFinite,
}

impl Homography {
    /// Wraps a raw matrix, rejecting singular or non-finite input.
    pub fn from_matrix(m: Matrix3<f64>) -> Result<Self, HomographyError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(HomographyError::NonFinite);
        }
        let det = m.determinant();
        if det.abs() < 1e-12 {
            return Err(HomographyError::Singular { det });
        }
        Ok(Self { m })
    }

    pub fn identity() -> Self {
        Self { m: Matrix3::identity() }
    }

    /// Pure pixel translation.
    pub fn translation(tx: f64, ty: f64) -> Self {
        let mut m = Matrix3::identity();
        m[(0, 2)] = tx;
        m[(1, 2)] = ty;
        Self { m }
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.m
    }

    /// Applies the map to a pixel position. Returns `None` when the point
    /// maps to infinity (homogeneous w of zero).
    pub fn apply(&self, p: Vector2<f64>) -> Option<Vector2<f64>> {
        let q = self.m * Vector3::new(p.x, p.y, 1.0);
        if q.z.abs() < 1e-12 {
            return None;
        }
        Some(Vector2::new(q.x / q.z, q.y / q.z))
    }

    /// Composition `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Self {
        Self { m: self.m * other.m }
    }

    pub fn inverse(&self) -> Self {
        // Constructors guarantee invertibility.
        let inv = self.m.try_inverse().expect("homography is invertible by construction");
        Self { m: inv }
    }
}

/// Skew-symmetric cross-product matrix `[v]x` with `[v]x * w = v × w`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn quat_exp(theta: &Vector3<f64>) -> UnitQuaternion<f64> {
    UnitQuaternion::from_scaled_axis(*theta)
}

/// Logarithm map: rotation vector of `q`, with angle in `[0, pi]`.
pub fn quat_log(q: &UnitQuaternion<f64>) -> Vector3<f64> {
    q.scaled_axis()
}

/// 4x4 matrix L(q) with `L(q) * r.coords = (q ⊗ r).coords` in nalgebra's
/// `[x, y, z, w]` coefficient order.
pub fn quat_left_matrix(q: &UnitQuaternion<f64>) -> nalgebra::Matrix4<f64> {
    let w = q.w;
    let v = q.imag();
    let mut m = nalgebra::Matrix4::zeros();
    // Vector part rows: w*rv + rw*v + v × rv
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * w + skew(&v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    // Scalar row: w*rw − v · rv
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m[(3, 3)] = w;
    m
}

/// 4x4 matrix R(q) with `R(q) * l.coords = (l ⊗ q).coords` in nalgebra's
/// `[x, y, z, w]` coefficient order.
pub fn quat_right_matrix(q: &UnitQuaternion<f64>) -> nalgebra::Matrix4<f64> {
    let w = q.w;
    let v = q.imag();
    let mut m = nalgebra::Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(Matrix3::identity() * w - skew(&v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m[(3, 3)] = w;
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector4;

    #[test]
    fn translation_apply_round_trip() {
        let h = Homography::translation(3.5, -2.0);
        let p = Vector2::new(10.0, 20.0);
        let q = h.apply(p).unwrap();
        assert_relative_eq!(q.x, 13.5);
        assert_relative_eq!(q.y, 18.0);
        let back = h.inverse().apply(q).unwrap();
        assert_relative_eq!(back.x, p.x, epsilon = 1e-12);
        assert_relative_eq!(back.y, p.y, epsilon = 1e-12);
    }

    #[test]
    fn singular_matrix_rejected() {
        let m = Matrix3::new(1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 0.0, 1.0);
        assert!(matches!(Homography::from_matrix(m), Err(HomographyError::Singular { .. })));
    }

    #[test]
    fn quat_product_matrices_match_quaternion_multiply() {
        let a = UnitQuaternion::from_scaled_axis(Vector3::new(0.3, -0.2, 0.9));
        let b = UnitQuaternion::from_scaled_axis(Vector3::new(-0.1, 0.5, 0.2));
        let prod = a * b;
        let via_left = quat_left_matrix(&a) * Vector4::new(b.i, b.j, b.k, b.w);
        let via_right = quat_right_matrix(&b) * Vector4::new(a.i, a.j, a.k, a.w);
        for (got, want) in [via_left, via_right]
            .iter()
            .flat_map(|v| v.iter().copied().zip([prod.i, prod.j, prod.k, prod.w]))
            .collect::<Vec<_>>()
        {
            assert_relative_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn exp_log_round_trip() {
        let theta = Vector3::new(0.2, -0.7, 0.4);
        let q = quat_exp(&theta);
        assert_relative_eq!((quat_log(&q) - theta).norm(), 0.0, epsilon = 1e-12);
    }
}
