//! Synthetic thermal scene: textured planes enclosing the camera.
//!
//! Each plane carries a discrete temperature-count grid sampled bilinearly,
//! built from smooth cosine gradients plus localized Gaussian hot and cold
//! spots. The fields live on a fixed grid (rather than being evaluated
//! analytically per ray) so a rendered view is exactly reproducible and
//! cheap to sample.

use nalgebra::Vector3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

use crate::image::MAX_COUNT;

/// Discrete scalar field over the unit square, bilinear interpolation.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneTexture {
    cols: usize,
    rows: usize,
    data: Vec<f64>,
}

impl PlaneTexture {
    pub fn new(cols: usize, rows: usize, data: Vec<f64>) -> Option<Self> {
        if cols < 2 || rows < 2 || data.len() != cols * rows {
            return None;
        }
        Some(Self { cols, rows, data })
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Bilinear sample at texture coordinates in [0, 1] x [0, 1].
    /// Coordinates outside the square clamp to the border.
    pub fn sample(&self, u: f64, v: f64) -> f64 {
        let x = (u.clamp(0.0, 1.0)) * (self.cols - 1) as f64;
        let y = (v.clamp(0.0, 1.0)) * (self.rows - 1) as f64;
        let x0 = (x.floor() as usize).min(self.cols - 1);
        let y0 = (y.floor() as usize).min(self.rows - 1);
        let x1 = (x0 + 1).min(self.cols - 1);
        let y1 = (y0 + 1).min(self.rows - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let at = |c: usize, r: usize| self.data[r * self.cols + c];
        let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
        let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }
}

/// A finite textured rectangle: center plus two orthonormal in-plane axes.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenePlane {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    pub half_u: f64,
    pub half_v: f64,
    pub texture: PlaneTexture,
}

impl ScenePlane {
    fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v)
    }

    /// Ray-rectangle intersection. Returns (ray parameter, texture value)
    /// for the hit point, or None if the ray misses. Both faces intersect.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let hit = origin + dir * t;
        let rel = hit - self.center;
        let u = rel.dot(&self.axis_u);
        let v = rel.dot(&self.axis_v);
        if u.abs() > self.half_u || v.abs() > self.half_v {
            return None;
        }
        let tu = (u / self.half_u + 1.0) * 0.5;
        let tv = (v / self.half_v + 1.0) * 0.5;
        Some((t, self.texture.sample(tu, tv)))
    }
}

/// A collection of textured planes plus the background level returned for
/// rays that escape the geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneModel {
    pub planes: Vec<ScenePlane>,
    pub ambient: f64,
}

/// Geometry and texture statistics for [`SceneModel::room`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoomParams {
    /// Walls sit at x = +-half_size and y = +-half_size.
    pub half_size: f64,
    pub floor_z: f64,
    pub ceiling_z: f64,
    /// Texture resolution, texels per meter.
    pub texels_per_meter: f64,
    /// Baseline radiometric level, counts.
    pub ambient: f64,
    /// Gaussian spots per square meter.
    pub blob_density: f64,
}

impl Default for RoomParams {
    fn default() -> Self {
        Self {
            half_size: 9.0,
            floor_z: -3.0,
            ceiling_z: 3.0,
            texels_per_meter: 64.0,
            ambient: 22_000.0,
            blob_density: 1.1,
        }
    }
}

impl SceneModel {
    /// Ray cast against every plane, keeping the nearest hit. Rays that
    /// miss everything return the ambient level.
    pub fn radiance(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let mut best: Option<(f64, f64)> = None;
        for plane in &self.planes {
            if let Some((t, value)) = plane.intersect(origin, dir) {
                if best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, value));
                }
            }
        }
        best.map_or(self.ambient, |(_, v)| v)
    }

    /// Closed rectangular room: four walls, floor, and ceiling, each with
    /// an independently synthesized texture. Deterministic in `seed`.
    pub fn room(params: RoomParams, seed: u64) -> Self {
        let l = params.half_size;
        let zc = 0.5 * (params.floor_z + params.ceiling_z);
        let hz = 0.5 * (params.ceiling_z - params.floor_z);
        let x = Vector3::x();
        let y = Vector3::y();
        let z = Vector3::z();
        // (center, axis_u, axis_v, half_u, half_v)
        let specs = [
            (Vector3::new(l, 0.0, zc), y, z, l, hz),
            (Vector3::new(-l, 0.0, zc), -y, z, l, hz),
            (Vector3::new(0.0, l, zc), -x, z, l, hz),
            (Vector3::new(0.0, -l, zc), x, z, l, hz),
            (Vector3::new(0.0, 0.0, params.floor_z), x, y, l, l),
            (Vector3::new(0.0, 0.0, params.ceiling_z), x, -y, l, l),
        ];
        let planes = specs
            .iter()
            .enumerate()
            .map(|(i, &(center, axis_u, axis_v, half_u, half_v))| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64 + 1);
                let texture = synthesize_texture(
                    2.0 * half_u,
                    2.0 * half_v,
                    params.texels_per_meter,
                    params.ambient,
                    params.blob_density,
                    &mut rng,
                );
                ScenePlane { center, axis_u, axis_v, half_u, half_v, texture }
            })
            .collect();
        Self { planes, ambient: params.ambient }
    }
}

/// Smooth cosine gradients plus compact Gaussian spots over a
/// `extent_u` x `extent_v` meter rectangle.
fn synthesize_texture(
    extent_u: f64,
    extent_v: f64,
    texels_per_meter: f64,
    ambient: f64,
    blob_density: f64,
    rng: &mut ChaCha8Rng,
) -> PlaneTexture {
    let cols = ((extent_u * texels_per_meter).round() as usize).max(2);
    let rows = ((extent_v * texels_per_meter).round() as usize).max(2);
    let mut data = vec![ambient; cols * rows];
    let du = extent_u / (cols - 1) as f64;
    let dv = extent_v / (rows - 1) as f64;

    // Three large-scale cosine temperature gradients.
    for _ in 0..3 {
        let amp: f64 = rng.gen_range(300.0..1200.0);
        let wavelength: f64 = rng.gen_range(1.2..4.0);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let k = std::f64::consts::TAU / wavelength;
        let (kx, ky) = (k * theta.cos(), k * theta.sin());
        for r in 0..rows {
            let vm = r as f64 * dv;
            for c in 0..cols {
                let um = c as f64 * du;
                data[r * cols + c] += amp * (kx * um + ky * vm + phase).cos();
            }
        }
    }

    // Gaussian spots, rasterized only inside their 4-sigma support.
    let count = (extent_u * extent_v * blob_density).round() as usize;
    for _ in 0..count {
        let cu: f64 = rng.gen_range(0.0..extent_u);
        let cv: f64 = rng.gen_range(0.0..extent_v);
        let sigma: f64 = rng.gen_range(0.06..0.4);
        let warm = rng.gen_bool(0.75);
        let amp: f64 = rng.gen_range(1500.0..9000.0) * if warm { 1.0 } else { -0.4 };
        let reach = 4.0 * sigma;
        let c0 = (((cu - reach) / du).floor().max(0.0)) as usize;
        let c1 = ((((cu + reach) / du).ceil()) as usize).min(cols - 1);
        let r0 = (((cv - reach) / dv).floor().max(0.0)) as usize;
        let r1 = ((((cv + reach) / dv).ceil()) as usize).min(rows - 1);
        let inv = 1.0 / (2.0 * sigma * sigma);
        for r in r0..=r1 {
            let dy = r as f64 * dv - cv;
            for c in c0..=c1 {
                let dx = c as f64 * du - cu;
                data[r * cols + c] += amp * (-(dx * dx + dy * dy) * inv).exp();
            }
        }
    }

    for v in &mut data {
        *v = v.clamp(0.0, MAX_COUNT);
    }
    PlaneTexture { cols, rows, data }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn texture_sampling_interpolates() {
        let tex = PlaneTexture::new(2, 2, vec![0.0, 100.0, 200.0, 300.0]).unwrap();
        assert_eq!(tex.sample(0.0, 0.0), 0.0);
        assert_eq!(tex.sample(1.0, 0.0), 100.0);
        assert_eq!(tex.sample(0.5, 0.5), 150.0);
        // Outside coordinates clamp.
        assert_eq!(tex.sample(-2.0, 0.0), 0.0);
        assert_eq!(tex.sample(2.0, 3.0), 300.0);
    }

    #[test]
    fn plane_intersection_hits_and_misses() {
        let tex = PlaneTexture::new(2, 2, vec![5.0; 4]).unwrap();
        let plane = ScenePlane {
            center: Vector3::new(2.0, 0.0, 0.0),
            axis_u: Vector3::y(),
            axis_v: Vector3::z(),
            half_u: 1.0,
            half_v: 1.0,
            texture: tex,
        };
        let origin = Vector3::zeros();
        let (t, v) = plane.intersect(&origin, &Vector3::x()).unwrap();
        assert_eq!(t, 2.0);
        assert_eq!(v, 5.0);
        // Parallel ray and out-of-bounds hit both miss.
        assert!(plane.intersect(&origin, &Vector3::y()).is_none());
        let steep = Vector3::new(1.0, 0.9, 0.0).normalize();
        assert!(plane.intersect(&origin, &steep).is_none());
    }

    #[test]
    fn room_encloses_interior_rays() {
        let scene = SceneModel::room(RoomParams::default(), 7);
        assert_eq!(scene.planes.len(), 6);
        let origin = Vector3::new(1.0, -2.0, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let dir = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            if dir.norm() < 1e-3 {
                continue;
            }
            let v = scene.radiance(&origin, &dir.normalize());
            assert!(v.is_finite() && (0.0..=MAX_COUNT).contains(&v));
        }
    }

    #[test]
    fn nearest_plane_wins() {
        let tex_near = PlaneTexture::new(2, 2, vec![10.0; 4]).unwrap();
        let tex_far = PlaneTexture::new(2, 2, vec![99.0; 4]).unwrap();
        let mk = |x: f64, tex: PlaneTexture| ScenePlane {
            center: Vector3::new(x, 0.0, 0.0),
            axis_u: Vector3::y(),
            axis_v: Vector3::z(),
            half_u: 1.0,
            half_v: 1.0,
            texture: tex,
        };
        let scene = SceneModel {
            planes: vec![mk(5.0, tex_far), mk(2.0, tex_near)],
            ambient: 0.0,
        };
        assert_eq!(scene.radiance(&Vector3::zeros(), &Vector3::x()), 10.0);
    }

    #[test]
    fn room_is_deterministic_in_seed() {
        let a = SceneModel::room(RoomParams::default(), 11);
        let b = SceneModel::room(RoomParams::default(), 11);
        let c = SceneModel::room(RoomParams::default(), 12);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
