//! Marginalization: folding the oldest frame and its exclusive landmarks
//! into a dense square-root prior on the remaining frames.

use nalgebra::{DMatrix, DVector};

use super::factors::{state_difference, FRAME_DIM};
use super::{
    huber, imu_factor, reprojection_residual, scatter_anchor, scatter_imu, scatter_prior,
    scatter_reprojection, EstimatorError, LandmarkStatus, SlidingWindow, SolverConfig,
    LANDMARK_DIM,
};
use crate::camera::CameraModel;
use crate::imu::FrameState;

/// Relative eigenvalue cutoff below which a direction of the eliminated
/// block is treated as informationless (pseudo-inverse semantics).
const PSEUDO_INVERSE_CUTOFF: f64 = 1e-12;
/// Absolute eigenvalue floor below which a direction of the reduced
/// information matrix is dropped from the square-root prior.
const SQRT_EIGEN_FLOOR: f64 = 1e-8;

/// Symmetric pseudo-inverse: eigendirections at or below
/// `PSEUDO_INVERSE_CUTOFF` times the largest eigenvalue contribute zero.
fn psd_pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = 0.5 * (m + m.transpose());
    let eig = sym.symmetric_eigen();
    let largest = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = PSEUDO_INVERSE_CUTOFF * largest.max(1.0);
    let n = m.nrows();
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for i in 0..n {
        let lambda = eig.eigenvalues[i];
        if lambda <= cutoff {
            continue;
        }
        let v = eig.eigenvectors.column(i);
        inv += v * v.transpose() / lambda;
    }
    0.5 * (&inv + inv.transpose())
}

/// Eliminates the first `marg_dim` variables of the quadratic
/// `q(x) = x^T H x - 2 b^T x` by minimizing over them, returning the
/// reduced pair `(H', b')` over the remaining variables. `H` must be
/// symmetric PSD; informationless directions of the eliminated block are
/// handled by pseudo-inversion.
pub fn schur_marginalize(
    h: &DMatrix<f64>,
    b: &DVector<f64>,
    marg_dim: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    assert_eq!(h.nrows(), h.ncols(), "information matrix must be square");
    assert_eq!(h.nrows(), b.len(), "information vector length mismatch");
    assert!(marg_dim < h.nrows(), "must keep at least one variable");
    if marg_dim == 0 {
        return (h.clone(), b.clone());
    }
    let keep = h.nrows() - marg_dim;
    let hmm = h.view((0, 0), (marg_dim, marg_dim)).into_owned();
    let hmr = h.view((0, marg_dim), (marg_dim, keep)).into_owned();
    let hrm = h.view((marg_dim, 0), (keep, marg_dim)).into_owned();
    let hrr = h.view((marg_dim, marg_dim), (keep, keep)).into_owned();
    let bm = b.rows(0, marg_dim).into_owned();
    let br = b.rows(marg_dim, keep).into_owned();
    let hmm_inv = psd_pseudo_inverse(&hmm);
    let coupling = &hrm * &hmm_inv;
    let reduced_h = hrr - &coupling * &hmr;
    let reduced_h = 0.5 * (&reduced_h + reduced_h.transpose());
    let reduced_b = br - coupling * bm;
    (reduced_h, reduced_b)
}

/// Dense prior left behind by marginalization. The residual is
/// `J * (x [-] x0) - r0` with an identity (first-estimates) Jacobian in
/// the error state, entering the cost un-robustified as a plain squared
/// norm: the prior is already whitened by construction.
#[derive(Debug, Clone)]
pub struct MarginalPrior {
    pub(crate) jacobian: DMatrix<f64>,
    pub(crate) offset: DVector<f64>,
    /// Frame ids and the states the prior was linearized at, oldest first.
    pub(crate) linearization: Vec<(u64, FrameState)>,
}

impl MarginalPrior {
    /// Rows of the whitened prior residual.
    pub fn dimension(&self) -> usize {
        self.jacobian.nrows()
    }

    pub fn frame_ids(&self) -> Vec<u64> {
        self.linearization.iter().map(|(id, _)| *id).collect()
    }

    pub(crate) fn residual(&self, window: &SlidingWindow) -> Result<DVector<f64>, EstimatorError> {
        let mut delta = DVector::<f64>::zeros(FRAME_DIM * self.linearization.len());
        for (chunk, (frame_id, reference)) in self.linearization.iter().enumerate() {
            let current = window
                .frame_state(*frame_id)
                .ok_or(EstimatorError::UnknownFrame { frame_id: *frame_id })?;
            let difference = state_difference(current, reference);
            for (i, value) in difference.iter().enumerate() {
                delta[FRAME_DIM * chunk + i] = *value;
            }
        }
        Ok(&self.jacobian * delta - &self.offset)
    }
}

impl SlidingWindow {
    /// Removes the oldest frame, absorbing its factors (the previous
    /// prior, the gauge anchor, the first IMU factor, and reprojection
    /// factors of landmarks seen only by that frame) into a new dense
    /// prior on the remaining frames. Observations of the departing frame
    /// on shared landmarks are dropped; triangulated landmarks left with
    /// fewer than two observations are demoted to pending, and landmarks
    /// left with none are removed.
    pub fn marginalize_oldest(
        &mut self,
        camera: &CameraModel,
        config: &SolverConfig,
    ) -> Result<(), EstimatorError> {
        config.validate()?;
        if self.frames.len() < 2 {
            return Err(EstimatorError::TooFewFrames { got: self.frames.len(), needed: 2 });
        }
        let (old_id, old_state) = self.frames[0];
        let exclusive: Vec<u64> = self
            .landmarks
            .values()
            .filter(|l| {
                l.status == LandmarkStatus::Triangulated
                    && !l.observations.is_empty()
                    && l.observations.iter().all(|(frame, _)| *frame == old_id)
            })
            .map(|l| l.id)
            .collect();

        // Variable order: exclusive landmarks, then frames oldest-first,
        // so the eliminated block is exactly the leading columns.
        let landmark_dim = LANDMARK_DIM * exclusive.len();
        let marg_dim = landmark_dim + FRAME_DIM;
        let dim = landmark_dim + FRAME_DIM * self.frames.len();
        let frame_col = |index: usize| landmark_dim + FRAME_DIM * index;
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut b = DVector::<f64>::zeros(dim);

        if let Some(prior) = &self.prior {
            let residual = prior.residual(self)?;
            scatter_prior(&mut h, &mut b, prior, &residual, |id| {
                self.frame_index(id).map(frame_col)
            })?;
        }
        if let Some(anchor) = &self.anchor {
            let index = self
                .frame_index(anchor.frame_id)
                .ok_or(EstimatorError::UnknownFrame { frame_id: anchor.frame_id })?;
            let state = &self.frames[index].1;
            scatter_anchor(&mut h, &mut b, anchor, state, frame_col(index));
        }
        let factor = imu_factor(&self.frames[0].1, &self.frames[1].1, &self.deltas[0]);
        scatter_imu(
            &mut h,
            &mut b,
            &factor,
            &self.deltas[0].weight_matrix(),
            frame_col(0),
            frame_col(1),
        );
        let sigma = config.reprojection_sigma_px;
        for (slot, id) in exclusive.iter().enumerate() {
            let landmark = &self.landmarks[id];
            for (_, pixel) in &landmark.observations {
                match reprojection_residual(&old_state, landmark.position, *pixel, camera) {
                    Ok(factor) => {
                        let u = factor.residual.norm() / sigma;
                        let weight =
                            huber(u, config.huber_threshold_sigma).1 / (sigma * sigma);
                        scatter_reprojection(
                            &mut h,
                            &mut b,
                            &factor,
                            weight,
                            frame_col(0),
                            LANDMARK_DIM * slot,
                        );
                    }
                    Err(EstimatorError::CheiralityViolation { .. }) => {}
                    Err(other) => return Err(other),
                }
            }
        }

        let (reduced_h, reduced_b) = schur_marginalize(&h, &b, marg_dim);

        // Square root of the reduced information: keep eigendirections
        // above the floor so the prior Jacobian stays well-scaled.
        let keep_dim = reduced_h.nrows();
        let eig = reduced_h.symmetric_eigen();
        let kept: Vec<usize> =
            (0..keep_dim).filter(|&i| eig.eigenvalues[i] > SQRT_EIGEN_FLOOR).collect();
        let mut jacobian = DMatrix::<f64>::zeros(kept.len(), keep_dim);
        let mut offset = DVector::<f64>::zeros(kept.len());
        for (row, &i) in kept.iter().enumerate() {
            let sqrt_lambda = eig.eigenvalues[i].sqrt();
            let v = eig.eigenvectors.column(i);
            for col in 0..keep_dim {
                jacobian[(row, col)] = sqrt_lambda * v[col];
            }
            offset[row] = v.dot(&reduced_b) / sqrt_lambda;
        }
        self.prior = Some(MarginalPrior {
            jacobian,
            offset,
            linearization: self.frames[1..].to_vec(),
        });
        self.anchor = None;

        self.frames.remove(0);
        self.deltas.remove(0);
        for id in &exclusive {
            self.landmarks.remove(id);
        }
        self.landmarks.retain(|_, landmark| {
            landmark.observations.retain(|(frame, _)| *frame != old_id);
            if landmark.status == LandmarkStatus::Triangulated && landmark.observations.len() < 2
            {
                landmark.status = LandmarkStatus::Pending;
            }
            !landmark.observations.is_empty()
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::fixtures::{
        constant_accel_window, excited_window, landmark_grid, perturb, truth_state,
    };
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schur_reduction_preserves_the_minimizer() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let j = DMatrix::<f64>::from_fn(30, 12, |_, _| rng.gen_range(-1.0..1.0));
        let h = j.transpose() * &j + DMatrix::identity(12, 12) * 0.5;
        let b = DVector::<f64>::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
        let full = nalgebra::Cholesky::new(h.clone()).unwrap().solve(&b);
        let (reduced_h, reduced_b) = schur_marginalize(&h, &b, 5);
        assert!((&reduced_h - reduced_h.transpose()).norm() < 1e-12);
        let min_eig = reduced_h.clone().symmetric_eigen().eigenvalues.min();
        assert!(min_eig > 0.0, "reduced information must stay PD, min eig {min_eig}");
        let tail = nalgebra::Cholesky::new(reduced_h).unwrap().solve(&reduced_b);
        assert!((tail - full.rows(5, 7)).norm() < 1e-8);
    }

    #[test]
    fn informationless_blocks_do_not_poison_the_reduction() {
        // The eliminated block carries no information at all; the kept
        // block must come through untouched.
        let mut h = DMatrix::<f64>::zeros(5, 5);
        let kept = DMatrix::<f64>::from_row_slice(
            3,
            3,
            &[4.0, 1.0, 0.0, 1.0, 3.0, 0.5, 0.0, 0.5, 2.0],
        );
        h.view_mut((2, 2), (3, 3)).copy_from(&kept);
        let mut b = DVector::<f64>::zeros(5);
        b[2] = 1.0;
        b[4] = -2.0;
        let (reduced_h, reduced_b) = schur_marginalize(&h, &b, 2);
        assert!((reduced_h - kept).norm() < 1e-12);
        assert!((reduced_b - b.rows(2, 3).into_owned()).norm() < 1e-12);
    }

    #[test]
    fn imu_only_prior_matches_a_directly_reduced_system() {
        let (mut window, _, camera) = constant_accel_window(2);
        window.landmarks.clear();
        // Push the second frame slightly off the propagated state so the
        // residuals (and the prior offset) are nonzero.
        window.frames[1].1.position += Vector3::new(0.002, -0.001, 0.0015);

        let mut reference_h = DMatrix::<f64>::zeros(30, 30);
        let mut reference_b = DVector::<f64>::zeros(30);
        let anchor = window.anchor.clone().unwrap();
        scatter_anchor(&mut reference_h, &mut reference_b, &anchor, &window.frames[0].1, 0);
        let factor = imu_factor(&window.frames[0].1, &window.frames[1].1, &window.deltas[0]);
        scatter_imu(
            &mut reference_h,
            &mut reference_b,
            &factor,
            &window.deltas[0].weight_matrix(),
            0,
            15,
        );
        let (reduced_h, reduced_b) = schur_marginalize(&reference_h, &reference_b, 15);

        window.marginalize_oldest(&camera, &SolverConfig::default()).unwrap();
        let prior = window.prior().unwrap();
        assert_eq!(prior.frame_ids(), vec![1]);
        assert!(!window.is_anchored());
        assert_eq!(window.len(), 1);

        let reconstructed_h = prior.jacobian.transpose() * &prior.jacobian;
        let reconstructed_b = prior.jacobian.transpose() * &prior.offset;
        let h_gap = (&reconstructed_h - &reduced_h).norm();
        let b_gap = (&reconstructed_b - &reduced_b).norm();
        assert!(h_gap < 1e-6 * (1.0 + reduced_h.norm()), "H gap {h_gap}");
        assert!(b_gap < 1e-6 * (1.0 + reduced_b.norm()), "b gap {b_gap}");
    }

    #[test]
    fn consistent_marginalization_leaves_the_window_at_rest() {
        let (mut window, _, camera) = constant_accel_window(3);
        let config = SolverConfig::default();
        window.marginalize_oldest(&camera, &config).unwrap();
        let before: Vec<_> = window.frames().to_vec();
        let report = window.solve(&camera, &config).unwrap();
        assert_eq!(report.iterations, 0, "cost at the linearization point: {report:?}");
        assert!(report.converged);
        for ((_, a), (_, b)) in window.frames().iter().zip(&before) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn recovery_still_works_after_marginalization() {
        let (mut window, truth, camera) = excited_window(4);
        let config = SolverConfig::default();
        window.marginalize_oldest(&camera, &config).unwrap();
        perturb(&mut window, 0.01, 0.5_f64.to_radians(), 0.005);
        let report = window.solve(&camera, &config).unwrap();
        assert!(report.converged, "{report:?}");
        for (offset, (_, state)) in window.frames().iter().enumerate() {
            let reference = &truth[offset + 1];
            assert!((state.position - reference.position).norm() < 1e-3);
            assert!(state.orientation.angle_to(&reference.orientation) < 0.01_f64.to_radians());
        }
    }

    #[test]
    fn sliding_reduction_matches_the_batch_solution_on_a_linear_chain() {
        // Scalar chain x0..x4 with an absolute prior on x0 and unit-weight
        // odometry factors x_{k+1} - x_k = m_k. Linear-Gaussian, so
        // repeated marginalization must reproduce the batch answer.
        let measurements = [1.0, -0.5, 2.0, 0.25];
        let n = measurements.len() + 1;
        let mut batch_h = DMatrix::<f64>::zeros(n, n);
        let mut batch_b = DVector::<f64>::zeros(n);
        batch_h[(0, 0)] += 4.0; // prior on x0 = 0 with weight 4
        for (k, m) in measurements.iter().enumerate() {
            batch_h[(k, k)] += 1.0;
            batch_h[(k + 1, k + 1)] += 1.0;
            batch_h[(k, k + 1)] -= 1.0;
            batch_h[(k + 1, k)] -= 1.0;
            batch_b[k] -= m;
            batch_b[k + 1] += m;
        }
        let batch = nalgebra::Cholesky::new(batch_h).unwrap().solve(&batch_b);

        // Sliding: carry a one-variable prior forward through the chain.
        let mut prior_h = 4.0;
        let mut prior_b = 0.0;
        for m in measurements {
            let mut h = DMatrix::<f64>::zeros(2, 2);
            let mut b = DVector::<f64>::zeros(2);
            h[(0, 0)] = prior_h + 1.0;
            h[(1, 1)] = 1.0;
            h[(0, 1)] = -1.0;
            h[(1, 0)] = -1.0;
            b[0] = prior_b - m;
            b[1] = m;
            let (reduced_h, reduced_b) = schur_marginalize(&h, &b, 1);
            prior_h = reduced_h[(0, 0)];
            prior_b = reduced_b[0];
        }
        let sliding_tail = prior_b / prior_h;
        assert!(
            (sliding_tail - batch[n - 1]).abs() < 1e-10,
            "sliding {sliding_tail} vs batch {}",
            batch[n - 1]
        );
    }

    #[test]
    fn bookkeeping_follows_the_departing_frame() {
        let (mut window, _, camera) = constant_accel_window(3);
        let config = SolverConfig::default();
        // Landmark 0 becomes exclusive to frame 0; landmark 1 will drop to
        // a single observation; landmark 99 is pending with only frame-0
        // support and must vanish.
        window.landmarks.get_mut(&0).unwrap().observations.retain(|(f, _)| *f == 0);
        window.landmarks.get_mut(&1).unwrap().observations.retain(|(f, _)| *f != 2);
        let state0 = window.frames()[0].1;
        let pixel = super::super::fixtures::exact_pixel(&camera, &state0, landmark_grid()[2]);
        window.observe(99, 0, pixel).unwrap();

        window.marginalize_oldest(&camera, &config).unwrap();

        let ids: Vec<u64> = window.frames().iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, vec![1, 2]);
        assert_eq!(window.deltas.len(), 1);
        assert!(window.landmark(0).is_none(), "exclusive landmark is marginalized away");
        assert!(window.landmark(99).is_none(), "unsupported pending landmark is dropped");
        let demoted = window.landmark(1).unwrap();
        assert_eq!(demoted.status, LandmarkStatus::Pending);
        assert_eq!(demoted.observations.len(), 1);
        assert_eq!(demoted.observations[0].0, 1);
        let survivor = window.landmark(2).unwrap();
        assert_eq!(survivor.status, LandmarkStatus::Triangulated);
        assert_eq!(survivor.observations.len(), 2);
        assert!(!window.is_anchored());
        let prior = window.prior().unwrap();
        assert_eq!(prior.frame_ids(), vec![1, 2]);
        assert!(prior.dimension() > 0 && prior.dimension() <= 30);
    }

    #[test]
    fn marginalizing_a_single_frame_window_is_rejected() {
        let mut window = SlidingWindow::new();
        window.push_frame(0, truth_state(0), None).unwrap();
        let camera = super::super::fixtures::rig();
        assert!(matches!(
            window.marginalize_oldest(&camera, &SolverConfig::default()),
            Err(EstimatorError::TooFewFrames { got: 1, needed: 2 })
        ));
    }
}
