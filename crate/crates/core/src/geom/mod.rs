//! Point cloud representation, rigid transforms, and perturbation injection.
//!
//! Coordinates are unitless; clouds are expected (but not required) to be
//! normalized to the unit sphere before entering the encoders.

mod lra;
mod query;

pub use lra::{compute_lra, compute_lra_table, sym_eigen3, Lra};
pub use query::{ball_query, farthest_point_sample, knn, knn3};

use crate::rng::Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeomError {
    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,
    #[error("bad count: requested {requested} from {available} points")]
    BadCount { requested: usize, available: usize },
    #[error("bad angle {0}: must lie in [0, 180] degrees")]
    BadAngle(f64),
    #[error("negative sigma {0}")]
    NegativeSigma(f64),
    #[error("bad fraction {0}: must lie in [0, 1]")]
    BadFraction(f64),
    #[error("transform is not a proper rotation (orthonormality or determinant violated)")]
    NonOrthonormal,
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("non-finite coordinate in point cloud")]
    NonFiniteCoord,
}

/// A labeled point cloud: `n` points in background space.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    pub label: Option<usize>,
    /// Per-point part labels; carried through transforms, currently unused
    /// by the classifiers.
    pub per_point_labels: Option<Vec<usize>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>, label: Option<usize>) -> Result<Self, GeomError> {
        if points.is_empty() {
            return Err(GeomError::EmptyCloud);
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeomError::NonFiniteCoord);
        }
        Ok(PointCloud {
            points,
            label,
            per_point_labels: None,
        })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                c[a] += p[a];
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    fn with_points(&self, points: Vec<[f64; 3]>) -> PointCloud {
        PointCloud {
            points,
            label: self.label,
            per_point_labels: self.per_point_labels.clone(),
        }
    }
}

/// A patch: one center plus an ordered neighbor list, at a given encoder
/// level. Neighbor order is only meaningful after canonical azimuthal
/// ordering (see [`crate::invariant::order_neighbors`]).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Patch {
    pub center_index: usize,
    pub neighbor_indices: Vec<usize>,
    pub level: usize,
}

/// A proper rigid motion: rotation followed by translation.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidTransform {
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    /// Validates: `R^T R = I` and `det R = 1`, both within `1e-9`.
    pub fn new(rotation: [[f64; 3]; 3], translation: [f64; 3]) -> Result<Self, GeomError> {
        let t = RigidTransform {
            rotation,
            translation,
        };
        if !t.is_proper() {
            return Err(GeomError::NonOrthonormal);
        }
        Ok(t)
    }

    pub fn is_proper(&self) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for a in 0..3 {
                    dot += r[a][i] * r[a][j];
                }
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > 1e-9 {
                    return false;
                }
            }
        }
        (det3(r) - 1.0).abs() <= 1e-9
    }

    /// Rodrigues' rotation about a unit axis, zero translation.
    pub fn from_axis_angle(axis: [f64; 3], angle_rad: f64) -> Self {
        let [x, y, z] = axis;
        let (s, c) = angle_rad.sin_cos();
        let t = 1.0 - c;
        RigidTransform {
            rotation: [
                [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
                [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
                [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
            ],
            translation: [0.0; 3],
        }
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2] + t[0],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2] + t[1],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2] + t[2],
        ]
    }

    /// Inverse motion: `R^T, -R^T t`.
    pub fn inverse(&self) -> Self {
        let r = &self.rotation;
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let t = &self.translation;
        let nt = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        RigidTransform {
            rotation: rt,
            translation: nt,
        }
    }

    /// Rotation angle in degrees, recovered from the trace.
    pub fn angle_deg(&self) -> f64 {
        let tr = self.rotation[0][0] + self.rotation[1][1] + self.rotation[2][2];
        let c = ((tr - 1.0) / 2.0).clamp(-1.0, 1.0);
        c.acos().to_degrees()
    }
}

pub(crate) fn det3(r: &[[f64; 3]; 3]) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
        - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

pub(crate) fn sub3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn norm3(a: [f64; 3]) -> f64 {
    dot3(a, a).sqrt()
}

pub(crate) fn scale3(a: [f64; 3], s: f64) -> [f64; 3] {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// Center the cloud at the origin and scale the farthest point to distance 1.
pub fn normalize_to_unit_sphere(cloud: &PointCloud) -> Result<PointCloud, GeomError> {
    let c = cloud.centroid();
    let centered: Vec<[f64; 3]> = cloud.points().iter().map(|&p| sub3(p, c)).collect();
    let max_norm = centered
        .iter()
        .map(|&p| norm3(p))
        .fold(0.0_f64, f64::max);
    if max_norm <= 0.0 {
        return Err(GeomError::DegenerateCloud);
    }
    let inv = 1.0 / max_norm;
    Ok(cloud.with_points(centered.into_iter().map(|p| scale3(p, inv)).collect()))
}

/// Apply a rigid motion to every point. Labels are preserved.
pub fn apply_transform(cloud: &PointCloud, t: &RigidTransform) -> Result<PointCloud, GeomError> {
    if !t.is_proper() {
        return Err(GeomError::NonOrthonormal);
    }
    Ok(cloud.with_points(cloud.points().iter().map(|&p| t.apply_point(p)).collect()))
}

/// Rotation with sphere-uniform axis and angle uniform in
/// `[0, max_angle_deg]`; zero translation.
pub fn random_rotation(max_angle_deg: f64, rng: &mut Rng) -> Result<RigidTransform, GeomError> {
    if !(0.0..=180.0).contains(&max_angle_deg) || !max_angle_deg.is_finite() {
        return Err(GeomError::BadAngle(max_angle_deg));
    }
    let z = rng.uniform(-1.0, 1.0);
    let phi = rng.uniform(0.0, 2.0 * std::f64::consts::PI);
    let r = (1.0 - z * z).max(0.0).sqrt();
    let axis = [r * phi.cos(), r * phi.sin(), z];
    let angle = rng.uniform(0.0, max_angle_deg).to_radians();
    Ok(RigidTransform::from_axis_angle(axis, angle))
}

/// Add independent zero-mean Gaussian noise per coordinate.
///
/// `sigma == 0` returns the cloud unchanged without consuming the generator.
pub fn add_gaussian_noise(
    cloud: &PointCloud,
    sigma: f64,
    rng: &mut Rng,
) -> Result<PointCloud, GeomError> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(GeomError::NegativeSigma(sigma));
    }
    if sigma == 0.0 {
        return Ok(cloud.clone());
    }
    let points = cloud
        .points()
        .iter()
        .map(|&p| {
            [
                p[0] + sigma * rng.normal(),
                p[1] + sigma * rng.normal(),
                p[2] + sigma * rng.normal(),
            ]
        })
        .collect();
    Ok(cloud.with_points(points))
}

/// Displace `round(fraction * n)` distinct, uniformly chosen points by
/// Gaussian noise of the given sigma; all other points are untouched.
pub fn inject_outliers(
    cloud: &PointCloud,
    fraction: f64,
    sigma: f64,
    rng: &mut Rng,
) -> Result<PointCloud, GeomError> {
    if !(0.0..=1.0).contains(&fraction) || !fraction.is_finite() {
        return Err(GeomError::BadFraction(fraction));
    }
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(GeomError::NegativeSigma(sigma));
    }
    let n = cloud.len();
    let count = (fraction * n as f64).round() as usize;
    if count == 0 {
        return Ok(cloud.clone());
    }
    let mut chosen = rng.sample_without_replacement(n, count);
    // Displacement applied in ascending index order, independent of draw order.
    chosen.sort_unstable();
    let mut points = cloud.points().to_vec();
    for &i in &chosen {
        for a in 0..3 {
            points[i][a] += sigma * rng.normal();
        }
    }
    Ok(cloud.with_points(points))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new(pts.to_vec(), None).unwrap()
    }

    #[test]
    fn normalize_symmetric_pair() {
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let n = normalize_to_unit_sphere(&c).unwrap();
        assert_eq!(n.points(), &[[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_is_degenerate() {
        let c = cloud(&[[0.3, -0.2, 0.9]]);
        assert_eq!(
            normalize_to_unit_sphere(&c).unwrap_err(),
            GeomError::DegenerateCloud
        );
    }

    #[test]
    fn normalize_random_cloud_postconditions() {
        let mut rng = Rng::new(17);
        let pts: Vec<[f64; 3]> = (0..64)
            .map(|_| {
                [
                    rng.uniform(-3.0, 5.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(0.0, 9.0),
                ]
            })
            .collect();
        let n = normalize_to_unit_sphere(&cloud(&pts)).unwrap();
        let c = n.centroid();
        assert!(norm3(c) < 1e-9, "centroid {c:?}");
        let max_norm = n.points().iter().map(|&p| norm3(p)).fold(0.0, f64::max);
        assert!((max_norm - 1.0).abs() < 1e-9, "max norm {max_norm}");
    }

    #[test]
    fn apply_identity_and_quarter_turn() {
        let c = cloud(&[[1.0, 0.0, 0.0]]);
        let id = RigidTransform::identity();
        assert_eq!(apply_transform(&c, &id).unwrap(), c);

        let quarter =
            RigidTransform::from_axis_angle([0.0, 0.0, 1.0], std::f64::consts::FRAC_PI_2);
        let rotated = apply_transform(&c, &quarter).unwrap();
        let p = rotated.points()[0];
        assert!((p[0]).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12 && p[2].abs() < 1e-12);
    }

    #[test]
    fn transform_round_trip() {
        let mut rng = Rng::new(23);
        let pts: Vec<[f64; 3]> = (0..20)
            .map(|_| {
                [
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                    rng.uniform(-1.0, 1.0),
                ]
            })
            .collect();
        let c = cloud(&pts);
        let mut t = random_rotation(180.0, &mut rng).unwrap();
        t.translation = [0.2, -0.7, 0.05];
        let back = apply_transform(&apply_transform(&c, &t).unwrap(), &t.inverse()).unwrap();
        for (a, b) in c.points().iter().zip(back.points()) {
            assert!(norm3(sub3(*a, *b)) < 1e-9);
        }
    }

    #[test]
    fn non_orthonormal_rejected() {
        let bad = RigidTransform {
            rotation: [[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        let c = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(
            apply_transform(&c, &bad).unwrap_err(),
            GeomError::NonOrthonormal
        );
        // Reflections (det = -1) are rejected too.
        let refl = RigidTransform {
            rotation: [[-1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        };
        assert!(!refl.is_proper());
    }

    #[test]
    fn random_rotation_zero_angle_is_identity() {
        let mut rng = Rng::new(4);
        let t = random_rotation(0.0, &mut rng).unwrap();
        assert!(t.angle_deg() < 1e-9);
    }

    #[test]
    fn random_rotation_respects_bound_and_invariants() {
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let t = random_rotation(30.0, &mut rng).unwrap();
            assert!(t.is_proper());
            assert!(t.angle_deg() <= 30.0 + 1e-6, "angle {}", t.angle_deg());
        }
        assert_eq!(
            random_rotation(181.0, &mut rng).unwrap_err(),
            GeomError::BadAngle(181.0)
        );
    }

    #[test]
    fn noise_zero_sigma_identity_and_labels_kept() {
        let mut c = cloud(&[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        c.label = Some(3);
        let mut rng = Rng::new(2);
        let same = add_gaussian_noise(&c, 0.0, &mut rng).unwrap();
        assert_eq!(same, c);
        let noisy = add_gaussian_noise(&c, 0.1, &mut rng).unwrap();
        assert_eq!(noisy.label, Some(3));
        assert_eq!(
            add_gaussian_noise(&c, -0.5, &mut rng).unwrap_err(),
            GeomError::NegativeSigma(-0.5)
        );
    }

    #[test]
    fn noise_sample_std_matches() {
        let n = 100_000;
        let pts = vec![[0.0, 0.0, 0.0]; n];
        let c = cloud(&pts);
        let mut rng = Rng::new(8);
        let noisy = add_gaussian_noise(&c, 0.1, &mut rng).unwrap();
        let mut sq = 0.0;
        for p in noisy.points() {
            sq += p[0] * p[0] + p[1] * p[1] + p[2] * p[2];
        }
        let std = (sq / (3.0 * n as f64)).sqrt();
        assert!((std - 0.1).abs() < 0.002, "std {std}");
    }

    #[test]
    fn outliers_counts() {
        let mut rng = Rng::new(10);
        let pts: Vec<[f64; 3]> = (0..1000)
            .map(|i| [i as f64, 0.0, 0.0])
            .collect();
        let c = cloud(&pts);

        let same = inject_outliers(&c, 0.0, 0.1, &mut rng).unwrap();
        assert_eq!(same, c);

        let moved = inject_outliers(&c, 0.05, 0.1, &mut rng).unwrap();
        let differing = moved
            .points()
            .iter()
            .zip(c.points())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(differing, 50);

        let all = inject_outliers(&c, 1.0, 0.1, &mut rng).unwrap();
        let differing = all
            .points()
            .iter()
            .zip(c.points())
            .filter(|(a, b)| a != b)
            .count();
        assert_eq!(differing, 1000);

        assert_eq!(
            inject_outliers(&c, 1.5, 0.1, &mut rng).unwrap_err(),
            GeomError::BadFraction(1.5)
        );
    }
}
