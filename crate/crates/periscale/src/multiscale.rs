//! Statistical upscaling: per-sample critical stretch extraction, sample
//! aggregation, and the equivalent micromodulus fit.
//!
//! The fracture of each random cell yields an effective critical stretch
//! per stretch direction; sample means converge by the strong law of large
//! numbers. The homogenized stiffness tensors are averaged entrywise, and
//! the averaged tensor is inverted into bond-law coefficients through the
//! peridynamic stiffness integral over a continuum horizon ball.

use nalgebra::{DMatrix, DVector};

use crate::ccm::{voigt_pairs, voigt_size, ElasticTensor};
use crate::grid::{directional_scale, BondSet, MicromodulusCoeffs, NodeSet};
use crate::solver::{quasi_static_run, LoadProgram, PdOptions, SimState, StepRecord};
use crate::{Error, Result};

/// Upscaled quantities of one random sample.
#[derive(Debug, Clone)]
pub struct SampleResult {
    pub index: usize,
    pub seed: u64,
    pub volume_fraction: f64,
    /// effective critical stretch per stretch direction
    pub critical_stretch: [f64; 3],
    pub homogenized: ElasticTensor,
}

/// Mean with dispersion; the standard error is `None` for a single sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarAggregate {
    pub count: usize,
    pub mean: f64,
    pub std_dev: Option<f64>,
    pub std_error: Option<f64>,
}

/// Arithmetic mean with running dispersion estimates.
pub fn aggregate_scalar(samples: &[f64]) -> ScalarAggregate {
    assert!(!samples.is_empty(), "aggregation needs at least one sample");
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return ScalarAggregate {
            count: n,
            mean,
            std_dev: None,
            std_error: None,
        };
    }
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    let std_dev = var.sqrt();
    ScalarAggregate {
        count: n,
        mean,
        std_dev: Some(std_dev),
        std_error: Some(std_dev / (n as f64).sqrt()),
    }
}

/// Standard error of the running mean for M = 2..=len, for convergence
/// studies.
pub fn running_std_errors(samples: &[f64]) -> Vec<(usize, f64)> {
    (2..=samples.len())
        .map(|m| {
            let agg = aggregate_scalar(&samples[..m]);
            (m, agg.std_error.unwrap())
        })
        .collect()
}

/// Least-squares slope of `log(y)` vs `log(x)`.
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = (x as f64).ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

/// Direction-interpolated critical stretch for a bond along `xi`.
pub fn directional_critical_stretch(s0: &[f64; 3], xi: [f64; 3], dim: usize) -> f64 {
    let norm = (xi[0] * xi[0] + xi[1] * xi[1] + xi[2] * xi[2]).sqrt();
    debug_assert!(norm > 0.0);
    let unit = [xi[0] / norm, xi[1] / norm, xi[2] / norm];
    directional_scale(s0, &unit, dim)
}

/// Entrywise mean of homogenized tensors, symmetrized.
pub fn aggregate_tensor(samples: &[ElasticTensor]) -> ElasticTensor {
    assert!(!samples.is_empty());
    let dim = samples[0].dim;
    let mut acc = DMatrix::zeros(voigt_size(dim), voigt_size(dim));
    for s in samples {
        assert_eq!(s.dim, dim);
        acc += &s.voigt;
    }
    ElasticTensor {
        dim,
        voigt: acc / samples.len() as f64,
    }
    .symmetrized()
}

/// Stiffness tensor produced by a micromodulus law through the bond
/// stiffness integral over the continuum horizon ball (radius `delta`),
/// evaluated by Gauss-Legendre (radius, polar) and trapezoid (azimuth)
/// quadrature.
pub fn micromodulus_stiffness_integral(
    coeffs: &MicromodulusCoeffs,
    delta: f64,
    dim: usize,
) -> ElasticTensor {
    let pairs = voigt_pairs(dim);
    let nv = voigt_size(dim);
    let (rad_pts, rad_wts) = gauss_legendre_01(48);
    let mut voigt = DMatrix::zeros(nv, nv);
    let angular = 128usize;

    let mut add = |n: [f64; 3], c_ang: f64, w_ang: f64, radial_moment: f64| {
        for (p, &(i, j)) in pairs.iter().enumerate() {
            for (q, &(k, l)) in pairs.iter().enumerate() {
                voigt[(p, q)] +=
                    0.5 * c_ang * w_ang * radial_moment * n[i] * n[j] * n[k] * n[l];
            }
        }
    };

    if dim == 2 {
        // ∫0^δ r^3 e^{-r/l} dr from the r^2 kernel factor and the area element
        let radial: f64 = rad_pts
            .iter()
            .zip(&rad_wts)
            .map(|(&t, &w)| {
                let r = t * delta;
                w * delta * r.powi(3) * (-r / coeffs.length_scale).exp()
            })
            .sum();
        for a in 0..angular {
            let phi = 2.0 * std::f64::consts::PI * a as f64 / angular as f64;
            let w_ang = 2.0 * std::f64::consts::PI / angular as f64;
            let n = [phi.cos(), phi.sin(), 0.0];
            let c2 = 2.0 * n[0] * n[0] - 1.0;
            let c4 = 2.0 * c2 * c2 - 1.0;
            let c_ang = coeffs.a[0] + coeffs.a[1] * c2 + coeffs.a[2] * c4;
            add(n, c_ang, w_ang, radial);
        }
    } else {
        let radial: f64 = rad_pts
            .iter()
            .zip(&rad_wts)
            .map(|(&t, &w)| {
                let r = t * delta;
                w * delta * r.powi(4) * (-r / coeffs.length_scale).exp()
            })
            .sum();
        let (u_pts, u_wts) = gauss_legendre_01(32);
        for (ui, &t) in u_pts.iter().enumerate() {
            let u = 2.0 * t - 1.0; // cos of the angle from the 1-axis
            let w_u = 2.0 * u_wts[ui];
            let s = (1.0 - u * u).max(0.0).sqrt();
            let c2 = 2.0 * u * u - 1.0;
            let c4 = 2.0 * c2 * c2 - 1.0;
            let c_ang = coeffs.a[0] + coeffs.a[1] * c2 + coeffs.a[2] * c4;
            for a in 0..angular {
                let psi = 2.0 * std::f64::consts::PI * a as f64 / angular as f64;
                let w_ang = w_u * 2.0 * std::f64::consts::PI / angular as f64;
                let n = [u, s * psi.cos(), s * psi.sin()];
                add(n, c_ang, w_ang, radial);
            }
        }
    }
    ElasticTensor { dim, voigt }
}

/// Result of the equivalent micromodulus fit.
#[derive(Debug, Clone)]
pub struct MicromodulusFit {
    pub coeffs: MicromodulusCoeffs,
    /// relative residual of the overdetermined Voigt-entry system
    pub relative_residual: f64,
}

/// Invert the stiffness integral: find `(a0, a1, a2)` whose integral best
/// reproduces the effective tensor, by least squares over all Voigt
/// entries. The fit fails when the tensor violates the bond-based
/// representability constraints by more than 5%.
pub fn fit_equivalent_micromodulus(
    a_bar: &ElasticTensor,
    delta: f64,
    l_bar: f64,
) -> Result<MicromodulusFit> {
    let dim = a_bar.dim;
    let nv = voigt_size(dim);
    // columns of the linear map from coefficients to Voigt entries
    let mut m = DMatrix::zeros(nv * nv, 3);
    for k in 0..3 {
        let mut unit = MicromodulusCoeffs {
            a: [0.0; 3],
            length_scale: l_bar,
        };
        unit.a[k] = 1.0;
        let t = micromodulus_stiffness_integral(&unit, delta, dim);
        for (idx, v) in t.voigt.iter().enumerate() {
            m[(idx, k)] = *v;
        }
    }
    let b = DVector::from_iterator(nv * nv, a_bar.voigt.iter().cloned());
    let norm_b = b.norm();
    if norm_b == 0.0 {
        return Ok(MicromodulusFit {
            coeffs: MicromodulusCoeffs {
                a: [0.0; 3],
                length_scale: l_bar,
            },
            relative_residual: 0.0,
        });
    }
    let svd = m.clone().svd(true, true);
    let a = svd
        .solve(&b, 1e-14)
        .map_err(|e| Error::SingularSystem(format!("micromodulus fit: {e}")))?;
    let residual = (&m * &a - &b).norm() / norm_b;
    if residual > 0.05 {
        return Err(Error::Representability { residual });
    }
    Ok(MicromodulusFit {
        coeffs: MicromodulusCoeffs {
            a: [a[0], a[1], a[2]],
            length_scale: l_bar,
        },
        relative_residual: residual,
    })
}

/// Imposed displacement at which the body "breaks completely": the first
/// step whose reaction magnitude falls below `threshold` times the running
/// peak. Returns the critical stretch `imposed / side`.
pub fn critical_stretch_from_history(
    history: &[StepRecord],
    side: f64,
    threshold: f64,
    axis: usize,
) -> Result<f64> {
    let mut peak = 0.0f64;
    for rec in history {
        let r = rec.reaction_stress.abs();
        if peak > 0.0 && r < threshold * peak {
            return Ok(rec.imposed / side);
        }
        peak = peak.max(r);
    }
    Err(Error::NoFailure {
        axis,
        steps: history.len(),
        threshold,
    })
}

/// Fracture the cell along one axis and extract its effective critical
/// stretch. Bond health starts fresh; the corrected micromodulus is
/// reused unchanged.
pub fn rve_critical_stretch(
    bonds: &BondSet,
    nodes: &NodeSet,
    axis: usize,
    per_side_increment: f64,
    steps: usize,
    threshold: f64,
    opts: &PdOptions,
) -> Result<(f64, SimState)> {
    let program = LoadProgram::stretch_axis(nodes, axis, per_side_increment, steps);
    let state = quasi_static_run(bonds, &program, opts)?;
    let s = critical_stretch_from_history(&state.history, nodes.extent[axis], threshold, axis)?;
    Ok((s, state))
}

/// The upscaled material: statistical critical stretch, effective tensor,
/// and the fitted bond-law coefficients. This is the single artifact handed
/// from the microscale pipeline to the macroscale simulation.
#[derive(Debug, Clone)]
pub struct EffectiveProperties {
    pub dim: usize,
    pub samples: usize,
    pub s0_mean: [f64; 3],
    pub s0_std_error: [f64; 3],
    pub a_bar: ElasticTensor,
    pub coeffs: MicromodulusCoeffs,
    pub fit_residual: f64,
}

impl EffectiveProperties {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# periscale effective properties\n");
        s.push_str(&format!("dim = {}\n", self.dim));
        s.push_str(&format!("samples = {}\n", self.samples));
        let join = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        s.push_str(&format!("s0_mean = {}\n", join(&self.s0_mean[..self.dim])));
        s.push_str(&format!(
            "s0_std_error = {}\n",
            join(&self.s0_std_error[..self.dim])
        ));
        s.push_str(&format!("a0 = {}\n", self.coeffs.a[0]));
        s.push_str(&format!("a1 = {}\n", self.coeffs.a[1]));
        s.push_str(&format!("a2 = {}\n", self.coeffs.a[2]));
        s.push_str(&format!("length_scale = {}\n", self.coeffs.length_scale));
        s.push_str(&format!("fit_residual = {}\n", self.fit_residual));
        s.push_str("a_bar_voigt =\n");
        let nv = voigt_size(self.dim);
        for r in 0..nv {
            let row: Vec<String> = (0..nv).map(|c| format!("{}", self.a_bar.voigt[(r, c)])).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<EffectiveProperties> {
        let bad = |m: &str| Error::config("effective properties record", m.to_string());
        let mut fields = std::collections::HashMap::new();
        let mut matrix_rows: Vec<Vec<f64>> = Vec::new();
        let mut in_matrix = false;
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if in_matrix {
                let row: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("malformed tensor row"))?;
                matrix_rows.push(row);
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let k = k.trim();
                if k == "a_bar_voigt" {
                    in_matrix = true;
                } else {
                    fields.insert(k.to_string(), v.trim().to_string());
                }
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| bad(&format!("missing {k}")));
        let dim: usize = get("dim")?.parse().map_err(|_| bad("dim"))?;
        let nv = voigt_size(dim);
        if matrix_rows.len() != nv || matrix_rows.iter().any(|r| r.len() != nv) {
            return Err(bad("tensor block has wrong shape"));
        }
        let parse_vec = |k: &str| -> Result<[f64; 3]> {
            let mut out = [f64::NAN; 3];
            for (i, tok) in fields
                .get(k)
                .ok_or_else(|| bad(&format!("missing {k}")))?
                .split_whitespace()
                .enumerate()
            {
                if i < 3 {
                    out[i] = tok.parse().map_err(|_| bad(k))?;
                }
            }
            Ok(out)
        };
        let mut voigt = DMatrix::zeros(nv, nv);
        for (r, row) in matrix_rows.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                voigt[(r, c)] = *v;
            }
        }
        Ok(EffectiveProperties {
            dim,
            samples: get("samples")?.parse().map_err(|_| bad("samples"))?,
            s0_mean: parse_vec("s0_mean")?,
            s0_std_error: parse_vec("s0_std_error")?,
            a_bar: ElasticTensor { dim, voigt },
            coeffs: MicromodulusCoeffs {
                a: [
                    get("a0")?.parse().map_err(|_| bad("a0"))?,
                    get("a1")?.parse().map_err(|_| bad("a1"))?,
                    get("a2")?.parse().map_err(|_| bad("a2"))?,
                ],
                length_scale: get("length_scale")?
                    .parse()
                    .map_err(|_| bad("length_scale"))?,
            },
            fit_residual: get("fit_residual")?
                .parse()
                .map_err(|_| bad("fit_residual"))?,
        })
    }
}

/// Gauss-Legendre nodes and weights on [0, 1].
fn gauss_legendre_01(n: usize) -> (Vec<f64>, Vec<f64>) {
    // Newton iteration on Legendre polynomials over [-1, 1]
    let mut pts = vec![0.0; n];
    let mut wts = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        loop {
            let (mut p0, mut p1) = (1.0f64, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                let w = 2.0 / ((1.0 - x * x) * dp * dp);
                pts[i] = x;
                wts[i] = w;
                pts[n - 1 - i] = -x;
                wts[n - 1 - i] = w;
                break;
            }
        }
    }
    // map to [0, 1]
    for i in 0..n {
        pts[i] = 0.5 * (pts[i] + 1.0);
        wts[i] *= 0.5;
    }
    (pts, wts)
}
