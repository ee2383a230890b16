//! Synthetic labeled shape generation and corruption pipelines.
//!
//! Five primitive surfaces with distinct curvature signatures (sphere,
//! cube, cylinder, torus, cone) are sampled uniformly by area in canonical
//! pose, jittered, scaled, and normalized to the unit sphere. Canonical
//! poses are axis-aligned on purpose: a student trained only on them can
//! overfit orientation, which is exactly the failure mode the evaluation
//! protocols measure.

mod io;

pub use io::{load_cloud, load_manifest, save_cloud, save_manifest, DataError};

use crate::geom::{
    add_gaussian_noise, apply_transform, inject_outliers, normalize_to_unit_sphere,
    random_rotation, PointCloud,
};
use crate::rng::Rng;

const STREAM_TRAIN: u64 = 0x7472_6169; // "trai"
const STREAM_TEST: u64 = 0x7465_7374; // "test"
const STREAM_CORRUPT: u64 = 0x636f_7272; // "corr"

/// Shape classes available to the generator.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 5] = [
        ShapeClass::Sphere,
        ShapeClass::Cube,
        ShapeClass::Cylinder,
        ShapeClass::Torus,
        ShapeClass::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeClass::Sphere => "sphere",
            ShapeClass::Cube => "cube",
            ShapeClass::Cylinder => "cylinder",
            ShapeClass::Torus => "torus",
            ShapeClass::Cone => "cone",
        }
    }

    pub fn parse(s: &str) -> Option<ShapeClass> {
        ShapeClass::ALL.iter().copied().find(|c| c.name() == s)
    }
}

/// Generator settings.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: Vec<ShapeClass>,
    pub points_per_cloud: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub jitter_sigma: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            classes: vec![
                ShapeClass::Sphere,
                ShapeClass::Cube,
                ShapeClass::Cylinder,
                ShapeClass::Torus,
            ],
            points_per_cloud: 256,
            train_per_class: 200,
            test_per_class: 100,
            jitter_sigma: 0.01,
            scale_min: 0.8,
            scale_max: 1.2,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.classes.len() < 2 {
            return Err(DataError::BadSpec("need at least 2 classes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !self.classes.iter().all(|c| seen.insert(*c)) {
            return Err(DataError::BadSpec("duplicate class".into()));
        }
        if self.points_per_cloud < 32 {
            return Err(DataError::BadSpec(format!(
                "points_per_cloud {} below 32",
                self.points_per_cloud
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::BadSpec("per-class counts must be >= 1".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return Err(DataError::BadSpec("bad scale range".into()));
        }
        if self.jitter_sigma < 0.0 {
            return Err(DataError::BadSpec("negative jitter".into()));
        }
        Ok(())
    }
}

/// One point drawn uniformly by area from the canonical surface.
fn sample_surface(class: ShapeClass, rng: &mut Rng) -> [f64; 3] {
    match class {
        ShapeClass::Sphere => {
            let z = rng.uniform(-1.0, 1.0);
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            [r * phi.cos(), r * phi.sin(), z]
        }
        ShapeClass::Cube => {
            // Faces of [-1, 1]^3, equal areas.
            let face = rng.below(6);
            let a = rng.uniform(-1.0, 1.0);
            let b = rng.uniform(-1.0, 1.0);
            match face {
                0 => [1.0, a, b],
                1 => [-1.0, a, b],
                2 => [a, 1.0, b],
                3 => [a, -1.0, b],
                4 => [a, b, 1.0],
                _ => [a, b, -1.0],
            }
        }
        ShapeClass::Cylinder => {
            // Radius 0.6, axis z, half-height 1; caps and lateral surface
            // weighted by area.
            let r = 0.6;
            let h = 1.0;
            let lateral = std::f64::consts::TAU * r * 2.0 * h;
            let caps = 2.0 * std::f64::consts::PI * r * r;
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            if rng.uniform(0.0, lateral + caps) < lateral {
                [r * theta.cos(), r * theta.sin(), rng.uniform(-h, h)]
            } else {
                let z = if rng.below(2) == 0 { h } else { -h };
                let rad = r * rng.next_f64().sqrt();
                [rad * theta.cos(), rad * theta.sin(), z]
            }
        }
        ShapeClass::Torus => {
            // Major radius 0.75, minor 0.3, in the xy-plane. Area-weighted
            // rejection on the poloidal angle avoids inner-rim
            // oversampling.
            let major = 0.75;
            let minor = 0.3;
            loop {
                let theta = rng.uniform(0.0, std::f64::consts::TAU);
                let phi = rng.uniform(0.0, std::f64::consts::TAU);
                let accept = (major + minor * phi.cos()) / (major + minor);
                if rng.next_f64() < accept {
                    let ring = major + minor * phi.cos();
                    return [
                        ring * theta.cos(),
                        ring * theta.sin(),
                        minor * phi.sin(),
                    ];
                }
            }
        }
        ShapeClass::Cone => {
            // Apex at (0, 0, 1), base disc of radius 0.9 at z = -1;
            // lateral surface and base weighted by area.
            let rb: f64 = 0.9;
            let h: f64 = 2.0;
            let slant = (rb * rb + h * h).sqrt();
            let lateral = std::f64::consts::PI * rb * slant;
            let base = std::f64::consts::PI * rb * rb;
            let theta = rng.uniform(0.0, std::f64::consts::TAU);
            if rng.uniform(0.0, lateral + base) < lateral {
                // Uniform by area: fractional distance from apex ~ sqrt(U).
                let t = rng.next_f64().sqrt();
                [t * rb * theta.cos(), t * rb * theta.sin(), 1.0 - t * h]
            } else {
                let rad = rb * rng.next_f64().sqrt();
                [rad * theta.cos(), rad * theta.sin(), -1.0]
            }
        }
    }
}

fn generate_cloud(
    class: ShapeClass,
    label: usize,
    spec: &SyntheticSpec,
    rng: &mut Rng,
) -> Result<PointCloud, DataError> {
    let scale = rng.uniform(spec.scale_min, spec.scale_max);
    let points: Vec<[f64; 3]> = (0..spec.points_per_cloud)
        .map(|_| {
            let p = sample_surface(class, rng);
            [
                p[0] * scale + spec.jitter_sigma * rng.normal(),
                p[1] * scale + spec.jitter_sigma * rng.normal(),
                p[2] * scale + spec.jitter_sigma * rng.normal(),
            ]
        })
        .collect();
    let cloud = PointCloud::new(points, Some(label))?;
    Ok(normalize_to_unit_sphere(&cloud)?)
}

/// Generate disjoint train and test sets in canonical (unrotated) pose.
/// Each cloud gets its own generator stream keyed by (seed, split, class,
/// instance), so generation order never matters.
pub fn generate(spec: &SyntheticSpec) -> Result<(Vec<PointCloud>, Vec<PointCloud>), DataError> {
    spec.validate()?;
    let make_split = |stream: u64, per_class: usize| -> Result<Vec<PointCloud>, DataError> {
        let mut out = Vec::with_capacity(per_class * spec.classes.len());
        for (label, &class) in spec.classes.iter().enumerate() {
            for inst in 0..per_class {
                let mut rng =
                    Rng::from_streams(&[spec.seed, stream, label as u64, inst as u64]);
                out.push(generate_cloud(class, label, spec, &mut rng)?);
            }
        }
        Ok(out)
    };
    let train = make_split(STREAM_TRAIN, spec.train_per_class)?;
    let test = make_split(STREAM_TEST, spec.test_per_class)?;
    Ok((train, test))
}

/// Evaluation corruption protocols.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Protocol {
    /// `level` = max rotation angle in degrees; each cloud gets a random
    /// rotation with angle in `[0, level]`.
    Rotation,
    /// `level` = Gaussian noise sigma per coordinate.
    Noise,
    /// `level` = fraction of points displaced by sigma-0.1 noise.
    Outlier,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::Rotation => "rotation",
            Protocol::Noise => "noise",
            Protocol::Outlier => "outlier",
        }
    }

    pub fn parse(s: &str) -> Option<Protocol> {
        [Protocol::Rotation, Protocol::Noise, Protocol::Outlier]
            .into_iter()
            .find(|p| p.name() == s)
    }

    /// Default sweep grid.
    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Protocol::Rotation => vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0],
            Protocol::Noise => vec![0.0, 0.02, 0.04, 0.06, 0.08, 0.1],
            Protocol::Outlier => (0..=10).map(|p| p as f64 / 100.0).collect(),
        }
    }
}

/// Corrupt one cloud deterministically from `(seed, index)`. Level 0 is the
/// identity for every protocol.
pub fn corrupt_cloud(
    cloud: &PointCloud,
    index: usize,
    protocol: Protocol,
    level: f64,
    seed: u64,
) -> Result<PointCloud, DataError> {
    if level == 0.0 {
        return Ok(cloud.clone());
    }
    let mut rng = Rng::from_streams(&[seed, STREAM_CORRUPT, protocol as u64, index as u64]);
    let out = match protocol {
        Protocol::Rotation => {
            let t = random_rotation(level, &mut rng)?;
            apply_transform(cloud, &t)?
        }
        Protocol::Noise => add_gaussian_noise(cloud, level, &mut rng)?,
        Protocol::Outlier => inject_outliers(cloud, level, 0.1, &mut rng)?,
    };
    Ok(out)
}

/// A lazily corrupted dataset view; the underlying set is untouched.
pub struct CorruptedView<'a> {
    set: &'a [PointCloud],
    protocol: Protocol,
    level: f64,
    seed: u64,
}

impl<'a> CorruptedView<'a> {
    pub fn new(set: &'a [PointCloud], protocol: Protocol, level: f64, seed: u64) -> Self {
        CorruptedView {
            set,
            protocol,
            level,
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.set.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.is_empty()
    }

    pub fn get(&self, index: usize) -> Result<PointCloud, DataError> {
        corrupt_cloud(&self.set[index], index, self.protocol, self.level, self.seed)
    }

    pub fn materialize(&self) -> Result<Vec<PointCloud>, DataError> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::norm3;

    #[test]
    fn sphere_sampler_on_surface() {
        let mut rng = Rng::new(1);
        for _ in 0..500 {
            let p = sample_surface(ShapeClass::Sphere, &mut rng);
            assert!((norm3(p) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generate_counts_labels_and_normalization() {
        let spec = SyntheticSpec {
            train_per_class: 5,
            test_per_class: 3,
            points_per_cloud: 64,
            ..SyntheticSpec::default()
        };
        let (train, test) = generate(&spec).unwrap();
        assert_eq!(train.len(), 5 * 4);
        assert_eq!(test.len(), 3 * 4);
        for (ci, _) in spec.classes.iter().enumerate() {
            assert_eq!(
                train.iter().filter(|c| c.label == Some(ci)).count(),
                5,
                "class {ci}"
            );
        }
        for c in train.iter().chain(&test) {
            assert!(norm3(c.centroid()) < 1e-9);
            let maxn = c.points().iter().map(|&p| norm3(p)).fold(0.0, f64::max);
            assert!((maxn - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = SyntheticSpec {
            train_per_class: 2,
            test_per_class: 2,
            points_per_cloud: 32,
            ..SyntheticSpec::default()
        };
        let (a_train, a_test) = generate(&spec).unwrap();
        let (b_train, b_test) = generate(&spec).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
    }

    #[test]
    fn bad_specs_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.classes = vec![ShapeClass::Sphere];
        assert!(matches!(generate(&spec), Err(DataError::BadSpec(_))));
        let mut spec = SyntheticSpec::default();
        spec.points_per_cloud = 16;
        assert!(matches!(generate(&spec), Err(DataError::BadSpec(_))));
    }

    #[test]
    fn corruption_level_zero_is_identity() {
        let spec = SyntheticSpec {
            train_per_class: 1,
            test_per_class: 1,
            points_per_cloud: 64,
            ..SyntheticSpec::default()
        };
        let (_, test) = generate(&spec).unwrap();
        for proto in [Protocol::Rotation, Protocol::Noise, Protocol::Outlier] {
            let view = CorruptedView::new(&test, proto, 0.0, 3);
            for i in 0..test.len() {
                assert_eq!(view.get(i).unwrap(), test[i]);
            }
        }
    }

    #[test]
    fn rotation_protocol_angle_bound() {
        let spec = SyntheticSpec {
            train_per_class: 1,
            test_per_class: 4,
            points_per_cloud: 32,
            ..SyntheticSpec::default()
        };
        let (_, test) = generate(&spec).unwrap();
        // Recover each per-cloud rotation by replaying its stream.
        for (i, _) in test.iter().enumerate() {
            let mut rng = Rng::from_streams(&[
                9,
                STREAM_CORRUPT,
                Protocol::Rotation as u64,
                i as u64,
            ]);
            let t = random_rotation(25.0, &mut rng).unwrap();
            assert!(t.angle_deg() <= 25.0 + 1e-6);
            let direct = corrupt_cloud(&test[i], i, Protocol::Rotation, 25.0, 9).unwrap();
            let replayed = apply_transform(&test[i], &t).unwrap();
            assert_eq!(direct, replayed);
        }
    }

    #[test]
    fn corruption_is_deterministic_per_index() {
        let spec = SyntheticSpec {
            train_per_class: 1,
            test_per_class: 2,
            points_per_cloud: 32,
            ..SyntheticSpec::default()
        };
        let (_, test) = generate(&spec).unwrap();
        for proto in [Protocol::Rotation, Protocol::Noise, Protocol::Outlier] {
            let a = CorruptedView::new(&test, proto, 0.05, 11).materialize().unwrap();
            let b = CorruptedView::new(&test, proto, 0.05, 11).materialize().unwrap();
            assert_eq!(a, b);
            // Original set untouched.
            assert_eq!(test[0].label, Some(0));
        }
    }
}
