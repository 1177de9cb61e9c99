//! Random particle-reinforced cell (RVE) generation and phase queries.
//!
//! A sample is a set of non-overlapping ellipses (2D) or ellipsoids (3D)
//! placed by random sequential addition inside a square/cubic cell. Each
//! particle is described by its semi-axes, center and orientation angles,
//! all drawn from uniform laws. Placement rejects overlap and boundary
//! protrusion, so particles always lie fully inside the cell.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Material phase at a point of the cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Particle,
    Matrix,
}

/// One ellipse/ellipsoid. The third components are ignored in 2D.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleGeometry {
    pub semi_axes: [f64; 3],
    pub center: [f64; 3],
    /// Rotation angle about the out-of-plane axis in 2D; intrinsic
    /// Z-Y-X angles in 3D.
    pub angles: [f64; 3],
}

impl ParticleGeometry {
    /// Row-major rotation matrix mapping local (axis-aligned) coordinates
    /// to cell coordinates.
    fn rotation(&self, dim: usize) -> [[f64; 3]; 3] {
        if dim == 2 {
            let (s, c) = self.angles[0].sin_cos();
            [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
        } else {
            let (s1, c1) = self.angles[0].sin_cos();
            let (s2, c2) = self.angles[1].sin_cos();
            let (s3, c3) = self.angles[2].sin_cos();
            // Rz(psi1) * Ry(psi2) * Rx(psi3)
            [
                [c1 * c2, c1 * s2 * s3 - s1 * c3, c1 * s2 * c3 + s1 * s3],
                [s1 * c2, s1 * s2 * s3 + c1 * c3, s1 * s2 * c3 - c1 * s3],
                [-s2, c2 * s3, c2 * c3],
            ]
        }
    }

    /// Value of the rotated quadratic form; <= 1 means the point is inside.
    pub fn quadratic_form(&self, point: [f64; 3], dim: usize) -> f64 {
        let r = self.rotation(dim);
        let d = [
            point[0] - self.center[0],
            point[1] - self.center[1],
            point[2] - self.center[2],
        ];
        let mut q = 0.0;
        for k in 0..dim {
            // local_k = (R^T d)_k
            let local = r[0][k] * d[0] + r[1][k] * d[1] + r[2][k] * d[2];
            q += (local / self.semi_axes[k]).powi(2);
        }
        q
    }

    pub fn contains(&self, point: [f64; 3], dim: usize) -> bool {
        self.quadratic_form(point, dim) <= 1.0
    }

    /// Area (2D) or volume (3D).
    pub fn measure(&self, dim: usize) -> f64 {
        if dim == 2 {
            std::f64::consts::PI * self.semi_axes[0] * self.semi_axes[1]
        } else {
            4.0 / 3.0 * std::f64::consts::PI
                * self.semi_axes[0]
                * self.semi_axes[1]
                * self.semi_axes[2]
        }
    }

    /// Radius of the circumscribing circle/sphere.
    pub fn bounding_radius(&self, dim: usize) -> f64 {
        self.semi_axes[..dim]
            .iter()
            .cloned()
            .fold(0.0f64, f64::max)
    }
}

/// Uniform range for one random parameter; `min == max` pins it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamRange {
    pub min: f64,
    pub max: f64,
}

impl ParamRange {
    pub fn fixed(v: f64) -> Self {
        ParamRange { min: v, max: v }
    }

    pub fn mean(&self) -> f64 {
        0.5 * (self.min + self.max)
    }

    fn draw(&self, rng: &mut impl Rng) -> f64 {
        if self.min == self.max {
            self.min
        } else {
            rng.random_range(self.min..self.max)
        }
    }
}

/// How many particles to place.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ParticleTarget {
    Count(usize),
    VolumeFraction(f64),
}

/// Probability laws and placement policy for one family of samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub dim: usize,
    pub side: f64,
    pub semi_axes: [ParamRange; 3],
    pub target: ParticleTarget,
    pub seed: u64,
    pub max_attempts: usize,
}

impl DistributionSpec {
    pub fn new(dim: usize, side: f64, semi_axes: [ParamRange; 3], target: ParticleTarget, seed: u64) -> Self {
        DistributionSpec {
            dim,
            side,
            semi_axes,
            target,
            seed,
            max_attempts: 100_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim != 2 && self.dim != 3 {
            return Err(Error::config("dim", "dimension must be 2 or 3"));
        }
        if self.side <= 0.0 {
            return Err(Error::config("side", "cell side must be positive"));
        }
        for (k, r) in self.semi_axes[..self.dim].iter().enumerate() {
            if r.min <= 0.0 || r.max < r.min {
                return Err(Error::config(
                    format!("semi_axes[{k}]"),
                    "range must satisfy 0 < min <= max",
                ));
            }
        }
        if let ParticleTarget::VolumeFraction(vf) = self.target {
            if !(0.0..0.5).contains(&vf) {
                return Err(Error::config(
                    "target_vf",
                    "volume fraction must lie in [0, 0.5) for sequential placement",
                ));
            }
        }
        Ok(())
    }

    fn mean_measure(&self) -> f64 {
        let a = self.semi_axes[0].mean();
        let b = self.semi_axes[1].mean();
        if self.dim == 2 {
            std::f64::consts::PI * a * b
        } else {
            4.0 / 3.0 * std::f64::consts::PI * a * b * self.semi_axes[2].mean()
        }
    }

    fn particle_count(&self) -> (usize, f64) {
        match self.target {
            ParticleTarget::Count(n) => (n, f64::NAN),
            ParticleTarget::VolumeFraction(vf) => {
                let cell = self.side.powi(self.dim as i32);
                ((vf * cell / self.mean_measure()).round() as usize, vf)
            }
        }
    }
}

/// One realization of the random geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RveSample {
    pub index: usize,
    pub dim: usize,
    pub side: f64,
    pub seed: u64,
    pub particles: Vec<ParticleGeometry>,
    pub achieved_vf: f64,
    pub target_vf: f64,
}

impl RveSample {
    /// Phase at a point in cell coordinates `[0, side]^dim`.
    pub fn phase_at(&self, point: [f64; 3]) -> Phase {
        debug_assert!(point[..self.dim]
            .iter()
            .all(|&x| (-1e-12..=self.side + 1e-12).contains(&x)));
        if self
            .particles
            .iter()
            .any(|p| p.contains(point, self.dim))
        {
            Phase::Particle
        } else {
            Phase::Matrix
        }
    }

    /// Analytic particle volume fraction (particles never overlap).
    pub fn volume_fraction(&self) -> f64 {
        let cell = self.side.powi(self.dim as i32);
        self.particles.iter().map(|p| p.measure(self.dim)).sum::<f64>() / cell
    }

    /// Structured text record, parseable by [`RveSample::from_text`].
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# periscale rve sample\n");
        s.push_str(&format!("index = {}\n", self.index));
        s.push_str(&format!("dim = {}\n", self.dim));
        s.push_str(&format!("side = {}\n", self.side));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!("target_vf = {}\n", self.target_vf));
        s.push_str(&format!("achieved_vf = {}\n", self.achieved_vf));
        s.push_str(&format!("particles = {}\n", self.particles.len()));
        s.push_str("# a b c x y z psi1 psi2 psi3\n");
        for p in &self.particles {
            s.push_str(&format!(
                "{} {} {} {} {} {} {} {} {}\n",
                p.semi_axes[0],
                p.semi_axes[1],
                p.semi_axes[2],
                p.center[0],
                p.center[1],
                p.center[2],
                p.angles[0],
                p.angles[1],
                p.angles[2]
            ));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<RveSample> {
        let bad = |m: &str| Error::config("rve record", m.to_string());
        let mut fields = std::collections::HashMap::new();
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                fields.insert(k.trim().to_string(), v.trim().to_string());
            } else {
                let nums: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("malformed particle row"))?;
                if nums.len() != 9 {
                    return Err(bad("particle row must have 9 columns"));
                }
                rows.push(ParticleGeometry {
                    semi_axes: [nums[0], nums[1], nums[2]],
                    center: [nums[3], nums[4], nums[5]],
                    angles: [nums[6], nums[7], nums[8]],
                });
            }
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| bad(&format!("missing field {k}")))
        };
        let count: usize = get("particles")?.parse().map_err(|_| bad("particles"))?;
        if count != rows.len() {
            return Err(bad("particle count does not match rows"));
        }
        Ok(RveSample {
            index: get("index")?.parse().map_err(|_| bad("index"))?,
            dim: get("dim")?.parse().map_err(|_| bad("dim"))?,
            side: get("side")?.parse().map_err(|_| bad("side"))?,
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            target_vf: get("target_vf")?.parse().map_err(|_| bad("target_vf"))?,
            achieved_vf: get("achieved_vf")?
                .parse()
                .map_err(|_| bad("achieved_vf"))?,
            particles: rows,
        })
    }
}

fn sample_rng(seed: u64, m: usize) -> ChaCha8Rng {
    // splitmix-style stream separation per sample index
    let mut z = seed ^ (m as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

/// Generate sample `m` by random sequential addition. Deterministic for a
/// fixed `(spec, m)`.
pub fn generate_rve(spec: &DistributionSpec, m: usize) -> Result<RveSample> {
    spec.validate()?;
    let (count, target_vf) = spec.particle_count();
    let mut rng = sample_rng(spec.seed, m);
    let mut particles: Vec<ParticleGeometry> = Vec::with_capacity(count);
    let two_pi = 2.0 * std::f64::consts::PI;
    let n_angles = if spec.dim == 2 { 1 } else { 3 };

    for _ in 0..count {
        let mut attempts = 0usize;
        loop {
            if attempts >= spec.max_attempts {
                let achieved = particles
                    .iter()
                    .map(|p| p.measure(spec.dim))
                    .sum::<f64>()
                    / spec.side.powi(spec.dim as i32);
                return Err(Error::PlacementFailure {
                    attempts,
                    achieved_vf: achieved,
                    target_vf: if target_vf.is_nan() { achieved } else { target_vf },
                });
            }
            attempts += 1;

            let mut semi_axes = [0.0; 3];
            for k in 0..spec.dim {
                semi_axes[k] = spec.semi_axes[k].draw(&mut rng);
            }
            let mut angles = [0.0; 3];
            for a in angles.iter_mut().take(n_angles) {
                *a = rng.random_range(0.0..two_pi);
            }
            let r_bound = semi_axes[..spec.dim]
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            if 2.0 * r_bound >= spec.side {
                continue; // cannot fit fully inside the cell
            }
            let mut center = [0.0; 3];
            for c in center.iter_mut().take(spec.dim) {
                *c = rng.random_range(r_bound..spec.side - r_bound);
            }
            let candidate = ParticleGeometry {
                semi_axes,
                center,
                angles,
            };
            // conservative circumscribing-circle/sphere test, touching rejected
            let clear = particles.iter().all(|p| {
                let d2: f64 = (0..spec.dim)
                    .map(|k| (p.center[k] - center[k]).powi(2))
                    .sum();
                let rr = p.bounding_radius(spec.dim) + r_bound;
                d2 > rr * rr
            });
            if clear {
                particles.push(candidate);
                break;
            }
        }
    }

    let achieved_vf = particles
        .iter()
        .map(|p| p.measure(spec.dim))
        .sum::<f64>()
        / spec.side.powi(spec.dim as i32);
    Ok(RveSample {
        index: m,
        dim: spec.dim,
        side: spec.side,
        seed: spec.seed,
        particles,
        achieved_vf,
        target_vf: if target_vf.is_nan() { achieved_vf } else { target_vf },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle_spec(radius: f64, target: ParticleTarget) -> DistributionSpec {
        DistributionSpec::new(
            2,
            1.0,
            [
                ParamRange::fixed(radius),
                ParamRange::fixed(radius),
                ParamRange::fixed(radius),
            ],
            target,
            42,
        )
    }

    #[test]
    fn empty_target_gives_empty_sample() {
        let rve = generate_rve(&circle_spec(0.1, ParticleTarget::Count(0)), 0).unwrap();
        assert!(rve.particles.is_empty());
        assert_eq!(rve.achieved_vf, 0.0);
    }

    #[test]
    fn single_circle_volume_fraction() {
        let rve = generate_rve(&circle_spec(0.0522, ParticleTarget::Count(1)), 0).unwrap();
        let expected = std::f64::consts::PI * 0.0522 * 0.0522;
        assert!((rve.achieved_vf - expected).abs() < 1e-12);
        assert!((expected - 0.008560).abs() < 1e-6);
    }

    #[test]
    fn count_from_volume_fraction() {
        // N = round(vf / (pi r^2)) and the achieved fraction is the analytic sum
        let spec = circle_spec(0.0522, ParticleTarget::VolumeFraction(0.14));
        let area = std::f64::consts::PI * 0.0522 * 0.0522;
        let expected_n = (0.14 / area).round() as usize;
        assert_eq!(expected_n, 16);
        let rve = generate_rve(&spec, 0).unwrap();
        assert_eq!(rve.particles.len(), 16);
        assert!((rve.achieved_vf - 16.0 * area).abs() < 1e-12);
        assert!((rve.achieved_vf - 0.137).abs() < 5e-4);
    }

    #[test]
    fn deterministic_under_fixed_seed() {
        let spec = circle_spec(0.05, ParticleTarget::VolumeFraction(0.2));
        let a = generate_rve(&spec, 3).unwrap();
        let b = generate_rve(&spec, 3).unwrap();
        assert_eq!(a.to_text(), b.to_text());
        let c = generate_rve(&spec, 4).unwrap();
        assert_ne!(a.to_text(), c.to_text());
    }

    #[test]
    fn record_round_trips() {
        let spec = DistributionSpec::new(
            3,
            1.0,
            [
                ParamRange { min: 0.05, max: 0.08 },
                ParamRange { min: 0.04, max: 0.06 },
                ParamRange { min: 0.04, max: 0.06 },
            ],
            ParticleTarget::Count(5),
            7,
        );
        let rve = generate_rve(&spec, 1).unwrap();
        let text = rve.to_text();
        let back = RveSample::from_text(&text).unwrap();
        assert_eq!(rve, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn phase_queries() {
        let rve = generate_rve(&circle_spec(0.1, ParticleTarget::Count(3)), 0).unwrap();
        for p in &rve.particles {
            assert_eq!(rve.phase_at(p.center), Phase::Particle);
        }
        // particles are interior-contained, so corners are matrix
        assert_eq!(rve.phase_at([0.0, 0.0, 0.0]), Phase::Matrix);
        assert_eq!(rve.phase_at([1.0, 1.0, 0.0]), Phase::Matrix);
    }

    #[test]
    fn rotated_ellipse_membership() {
        // ellipse a=0.2, b=0.1, psi=pi/4 centered at (0.5,0.5); the point
        // (0.6,0.6) lies on the long axis: q = (sqrt(2)*0.1/0.2)^2 = 0.5
        let p = ParticleGeometry {
            semi_axes: [0.2, 0.1, 0.0],
            center: [0.5, 0.5, 0.0],
            angles: [std::f64::consts::FRAC_PI_4, 0.0, 0.0],
        };
        let q = p.quadratic_form([0.6, 0.6, 0.0], 2);
        assert!((q - 0.5).abs() < 1e-12, "q = {q}");
        assert!(p.contains([0.6, 0.6, 0.0], 2));
        // perpendicular offset of the same length exceeds the short axis
        let q_perp = p.quadratic_form([0.6, 0.4, 0.0], 2);
        assert!(q_perp > 1.0, "q_perp = {q_perp}");
    }

    #[test]
    fn no_overlap_by_dense_sampling() {
        let rve = generate_rve(&circle_spec(0.08, ParticleTarget::VolumeFraction(0.25)), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(999);
        for _ in 0..200_000 {
            let pt = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                0.0,
            ];
            let inside = rve
                .particles
                .iter()
                .filter(|p| p.contains(pt, 2))
                .count();
            assert!(inside <= 1, "point {pt:?} inside {inside} particles");
        }
    }

    #[test]
    fn monte_carlo_volume_fraction_agrees() {
        let rve = generate_rve(&circle_spec(0.07, ParticleTarget::VolumeFraction(0.2)), 11).unwrap();
        let n = 1_000_000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut hits = 0usize;
        for _ in 0..n {
            let pt = [
                rng.random_range(0.0..1.0),
                rng.random_range(0.0..1.0),
                0.0,
            ];
            if rve.phase_at(pt) == Phase::Particle {
                hits += 1;
            }
        }
        let estimate = hits as f64 / n as f64;
        let p = rve.achieved_vf;
        let stderr = (p * (1.0 - p) / n as f64).sqrt();
        assert!(
            (estimate - p).abs() <= 3.0 * stderr,
            "estimate {estimate}, analytic {p}, stderr {stderr}"
        );
    }

    #[test]
    fn jamming_guard_rejects_high_vf() {
        let err = generate_rve(&circle_spec(0.05, ParticleTarget::VolumeFraction(0.55)), 0)
            .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn placement_failure_reports_achieved() {
        // particles bigger than the cell can never be placed
        let mut spec = circle_spec(0.6, ParticleTarget::Count(1));
        spec.max_attempts = 50;
        let err = generate_rve(&spec, 0).unwrap_err();
        match err {
            Error::PlacementFailure {
                attempts,
                achieved_vf,
                ..
            } => {
                assert_eq!(attempts, 50);
                assert_eq!(achieved_vf, 0.0);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }
}
