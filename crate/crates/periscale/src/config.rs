//! Pipeline configuration: a single TOML file with nested sections.
//!
//! Units are not enforced; the shipped defaults use mm and GPa. See
//! `configs/default2d.toml` for a commented template.

use serde::{Deserialize, Serialize};

use crate::grid::{BoxRegion, CriticalStretches};
use crate::microstructure::{DistributionSpec, ParamRange, ParticleTarget};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub dimension: usize,
    pub rve: RveConfig,
    pub materials: MaterialsConfig,
    pub critical_stretch: CriticalStretchConfig,
    pub micro_load: MicroLoadConfig,
    pub samples: SamplesConfig,
    #[serde(rename = "macro")]
    pub macro_model: MacroConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RveConfig {
    /// cell side length
    pub side: f64,
    /// grid cells per side
    pub grid_n: usize,
    pub particles: ParticlesConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticlesConfig {
    /// per-axis semi-axis range minima (length = dimension)
    pub semi_axes_min: Vec<f64>,
    pub semi_axes_max: Vec<f64>,
    /// either a particle count or a target volume fraction
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub volume_fraction: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaterialsConfig {
    pub matrix_youngs: f64,
    pub particle_youngs: f64,
    /// shared Poisson ratio; must match the bond-based value (1/3 in 2D,
    /// 1/4 in 3D)
    pub poisson: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CriticalStretchConfig {
    pub particle: f64,
    pub matrix: f64,
    pub interface: f64,
}

impl CriticalStretchConfig {
    pub fn stretches(&self) -> CriticalStretches {
        CriticalStretches {
            particle: self.particle,
            matrix: self.matrix,
            interface: self.interface,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicroLoadConfig {
    /// number of displacement increments
    pub steps: usize,
    /// displacement applied to each loaded face at the final step
    pub max_displacement_per_side: f64,
    /// "breaks completely" reaction threshold as a fraction of the peak
    #[serde(default = "default_break_threshold")]
    pub break_threshold: f64,
}

fn default_break_threshold() -> f64 {
    0.05
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesConfig {
    pub count: usize,
    pub base_seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MacroConfig {
    /// domain extents (length = dimension)
    pub extent: Vec<f64>,
    /// grid cells along the first axis (spacing carries to the others)
    pub grid_n: usize,
    #[serde(default)]
    pub notches: Vec<NotchConfig>,
    pub steps: usize,
    pub program: Vec<ProgramEntry>,
    #[serde(default)]
    pub fixed_points: Vec<FixedPoint>,
    /// write a VTK snapshot every k steps (0 disables)
    #[serde(default)]
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NotchConfig {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProgramEntry {
    /// face selector: "+x", "-x", "+y", "-y", "+z", "-z"
    pub face: String,
    /// driven displacement component: "x", "y" or "z"
    pub component: String,
    /// displacement added per step
    pub increment: f64,
    /// reactions on this set feed the reported stress
    #[serde(default)]
    pub measured: bool,
    #[serde(default = "default_layers")]
    pub layers: usize,
}

fn default_layers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPoint {
    pub point: Vec<f64>,
    /// components to pin, e.g. ["x", "y"]
    pub components: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
    pub max_inner_sweeps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cg_tolerance: 1e-10,
            cg_max_iterations: 50_000,
            max_inner_sweeps: 200,
        }
    }
}

pub fn axis_index(name: &str) -> Result<usize> {
    match name {
        "x" => Ok(0),
        "y" => Ok(1),
        "z" => Ok(2),
        other => Err(Error::config(
            "component",
            format!("unknown axis `{other}` (expected x, y or z)"),
        )),
    }
}

pub fn face_selector(name: &str) -> Result<(usize, bool)> {
    let (sign, axis) = name.split_at(1);
    let positive = match sign {
        "+" => true,
        "-" => false,
        _ => {
            return Err(Error::config(
                "face",
                format!("face `{name}` must start with + or -"),
            ))
        }
    };
    Ok((axis_index(axis)?, positive))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: e
                .span()
                .map(|s| format!("byte {}..{}", s.start, s.end))
                .unwrap_or_else(|| "<root>".into()),
            message: e.message().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<PipelineConfig> {
        let text =
            std::fs::read_to_string(path).map_err(Error::io(path.display().to_string()))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// FNV-1a hash of the canonical serialized form, used to detect stale
    /// output directories.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_toml().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        format!("{h:016x}")
    }

    pub fn validate(&self) -> Result<()> {
        let dim = self.dimension;
        if dim != 2 && dim != 3 {
            return Err(Error::config("dimension", "must be 2 or 3"));
        }
        let expected_nu = if dim == 2 { 1.0 / 3.0 } else { 0.25 };
        if (self.materials.poisson - expected_nu).abs() > 1e-6 {
            return Err(Error::config(
                "materials.poisson",
                format!("bond-based model requires {expected_nu:.6} in {dim}D"),
            ));
        }
        if self.rve.side <= 0.0 || self.rve.grid_n == 0 {
            return Err(Error::config("rve", "side and grid_n must be positive"));
        }
        let p = &self.rve.particles;
        if p.semi_axes_min.len() != dim || p.semi_axes_max.len() != dim {
            return Err(Error::config(
                "rve.particles.semi_axes_min",
                format!("need {dim} entries"),
            ));
        }
        match (p.count, p.volume_fraction) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    "rve.particles",
                    "give either count or volume_fraction, not both",
                ))
            }
            (None, None) => {
                return Err(Error::config(
                    "rve.particles",
                    "one of count or volume_fraction is required",
                ))
            }
            (None, Some(vf)) if !(0.0..0.5).contains(&vf) => {
                return Err(Error::config(
                    "rve.particles.volume_fraction",
                    "must lie in [0, 0.5)",
                ))
            }
            _ => {}
        }
        for (k, (&lo, &hi)) in p.semi_axes_min.iter().zip(&p.semi_axes_max).enumerate() {
            if lo <= 0.0 || hi < lo {
                return Err(Error::config(
                    format!("rve.particles.semi_axes_min[{k}]"),
                    "need 0 < min <= max",
                ));
            }
        }
        if self.micro_load.steps == 0 {
            return Err(Error::config("micro_load.steps", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.micro_load.break_threshold) {
            return Err(Error::config(
                "micro_load.break_threshold",
                "must lie in [0, 1)",
            ));
        }
        if self.samples.count == 0 {
            return Err(Error::config("samples.count", "must be positive"));
        }
        let m = &self.macro_model;
        if m.extent.len() != dim {
            return Err(Error::config("macro.extent", format!("need {dim} entries")));
        }
        if m.grid_n == 0 || m.steps == 0 {
            return Err(Error::config("macro", "grid_n and steps must be positive"));
        }
        if m.program.is_empty() {
            return Err(Error::config("macro.program", "needs at least one entry"));
        }
        let dx = m.extent[0] / m.grid_n as f64;
        for (k, &e) in m.extent.iter().enumerate() {
            let n = (e / dx).round();
            if (n * dx - e).abs() > 1e-9 * e.max(1.0) {
                return Err(Error::config(
                    format!("macro.extent[{k}]"),
                    "grid spacing from grid_n must divide every extent",
                ));
            }
        }
        for (i, entry) in m.program.iter().enumerate() {
            let (axis, _) = face_selector(&entry.face)
                .map_err(|_| Error::config(format!("macro.program[{i}].face"), "invalid face"))?;
            if axis >= dim {
                return Err(Error::config(
                    format!("macro.program[{i}].face"),
                    "axis outside dimension",
                ));
            }
            let comp = axis_index(&entry.component).map_err(|_| {
                Error::config(format!("macro.program[{i}].component"), "invalid component")
            })?;
            if comp >= dim {
                return Err(Error::config(
                    format!("macro.program[{i}].component"),
                    "component outside dimension",
                ));
            }
        }
        if !m.program.iter().any(|e| e.measured) {
            return Err(Error::config(
                "macro.program",
                "mark at least one entry as measured",
            ));
        }
        for (i, fp) in m.fixed_points.iter().enumerate() {
            if fp.point.len() != dim {
                return Err(Error::config(
                    format!("macro.fixed_points[{i}].point"),
                    format!("need {dim} coordinates"),
                ));
            }
            for c in &fp.components {
                if axis_index(c)? >= dim {
                    return Err(Error::config(
                        format!("macro.fixed_points[{i}].components"),
                        "component outside dimension",
                    ));
                }
            }
        }
        Ok(())
    }

    /// Microstructure distribution drawn from this config.
    pub fn distribution_spec(&self) -> DistributionSpec {
        let p = &self.rve.particles;
        let mut ranges = [ParamRange::fixed(1.0); 3];
        for k in 0..self.dimension {
            ranges[k] = ParamRange {
                min: p.semi_axes_min[k],
                max: p.semi_axes_max[k],
            };
        }
        let target = match (p.count, p.volume_fraction) {
            (Some(n), _) => ParticleTarget::Count(n),
            (_, Some(vf)) => ParticleTarget::VolumeFraction(vf),
            _ => unreachable!("validated"),
        };
        DistributionSpec::new(
            self.dimension,
            self.rve.side,
            ranges,
            target,
            self.samples.base_seed,
        )
    }

    pub fn rve_dx(&self) -> f64 {
        self.rve.side / self.rve.grid_n as f64
    }

    pub fn macro_dx(&self) -> f64 {
        self.macro_model.extent[0] / self.macro_model.grid_n as f64
    }

    pub fn notch_regions(&self) -> Vec<BoxRegion> {
        self.macro_model
            .notches
            .iter()
            .map(|n| {
                let mut min = [0.0; 3];
                let mut max = [0.0; 3];
                let dim = n.min.len().min(3);
                min[..dim].copy_from_slice(&n.min[..dim]);
                max[..dim].copy_from_slice(&n.max[..dim]);
                BoxRegion { min, max }
            })
            .collect()
    }

    /// Template with the reference two-phase brittle composite parameters.
    pub fn template_2d() -> PipelineConfig {
        PipelineConfig {
            dimension: 2,
            rve: RveConfig {
                side: 1.0,
                grid_n: 48,
                particles: ParticlesConfig {
                    semi_axes_min: vec![0.0944, 0.0944],
                    semi_axes_max: vec![0.0944, 0.0944],
                    count: None,
                    volume_fraction: Some(0.14),
                },
            },
            materials: MaterialsConfig {
                matrix_youngs: 71.7,
                particle_youngs: 427.0,
                poisson: 1.0 / 3.0,
            },
            critical_stretch: CriticalStretchConfig {
                particle: 0.00338,
                matrix: 0.01161,
                interface: 0.007495,
            },
            micro_load: MicroLoadConfig {
                steps: 100,
                max_displacement_per_side: 0.02,
                break_threshold: 0.05,
            },
            samples: SamplesConfig {
                count: 25,
                base_seed: 1,
            },
            macro_model: MacroConfig {
                extent: vec![5.0, 5.0],
                grid_n: 50,
                notches: Vec::new(),
                steps: 100,
                program: vec![
                    ProgramEntry {
                        face: "-x".into(),
                        component: "x".into(),
                        increment: -3e-4,
                        measured: false,
                        layers: 1,
                    },
                    ProgramEntry {
                        face: "+x".into(),
                        component: "x".into(),
                        increment: 3e-4,
                        measured: true,
                        layers: 1,
                    },
                    ProgramEntry {
                        face: "-x".into(),
                        component: "y".into(),
                        increment: 0.0,
                        measured: false,
                        layers: 1,
                    },
                ],
                fixed_points: Vec::new(),
                snapshot_every: 25,
            },
            solver: SolverConfig::default(),
        }
    }
}
