//! Curve tables (CSV) and field snapshots (legacy ASCII VTK points).
//!
//! All numbers are written with Rust's shortest round-trip float
//! formatting, so identical runs produce byte-identical files.

use std::path::Path;

use crate::solver::{SimState, StepRecord};
use crate::{Error, Result};

/// Per-step curve: one row per load step.
pub fn curve_csv(history: &[StepRecord]) -> String {
    let mut s =
        String::from("step,imposed_displacement,reaction_stress,broken_bonds,dissipated_energy\n");
    for r in history {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.imposed, r.reaction_stress, r.broken_bonds, r.dissipated_energy
        ));
    }
    s
}

pub fn write_curve_csv(path: &Path, history: &[StepRecord]) -> Result<()> {
    std::fs::write(path, curve_csv(history)).map_err(Error::io(path.display().to_string()))
}

/// Legacy ASCII VTK polydata snapshot of the node cloud with displacement
/// magnitude, damage, and the displacement vector field.
pub fn vtk_point_snapshot(title: &str, positions: &[[f64; 3]], state: &SimState) -> String {
    let n = positions.len();
    assert_eq!(state.u.len(), n);
    let mut s = String::new();
    s.push_str("# vtk DataFile Version 3.0\n");
    s.push_str(title);
    s.push('\n');
    s.push_str("ASCII\nDATASET POLYDATA\n");
    s.push_str(&format!("POINTS {n} double\n"));
    for p in positions {
        s.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    s.push_str(&format!("VERTICES {n} {}\n", 2 * n));
    for i in 0..n {
        s.push_str(&format!("1 {i}\n"));
    }
    s.push_str(&format!("POINT_DATA {n}\n"));
    s.push_str("SCALARS displacement_magnitude double 1\nLOOKUP_TABLE default\n");
    for u in &state.u {
        let mag = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        s.push_str(&format!("{mag}\n"));
    }
    s.push_str("SCALARS damage double 1\nLOOKUP_TABLE default\n");
    for d in &state.damage {
        s.push_str(&format!("{d}\n"));
    }
    s.push_str("VECTORS displacement double\n");
    for u in &state.u {
        s.push_str(&format!("{} {} {}\n", u[0], u[1], u[2]));
    }
    s
}

pub fn write_vtk_snapshot(
    path: &Path,
    title: &str,
    positions: &[[f64; 3]],
    state: &SimState,
) -> Result<()> {
    std::fs::write(path, vtk_point_snapshot(title, positions, state))
        .map_err(Error::io(path.display().to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_state() -> SimState {
        SimState {
            dim: 2,
            u: vec![[0.0, 0.0, 0.0], [3e-3, 4e-3, 0.0]],
            kappa: vec![true],
            damage: vec![0.0, 0.5],
            dissipated: 0.0,
            external_work: 0.0,
            frozen_nodes: 0,
            history: vec![StepRecord {
                step: 1,
                imposed: 2e-4,
                reaction_stress: 1.5,
                broken_bonds: 3,
                newly_broken: 3,
                dissipated_energy: 1e-6,
                external_work: 2e-6,
                inner_sweeps: 1,
            }],
        }
    }

    #[test]
    fn curve_has_header_and_rows() {
        let state = tiny_state();
        let csv = curve_csv(&state.history);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "step,imposed_displacement,reaction_stress,broken_bonds,dissipated_energy"
        );
        assert_eq!(lines.next().unwrap(), "1,0.0002,1.5,3,0.000001");
        assert!(lines.next().is_none());
    }

    #[test]
    fn vtk_snapshot_layout() {
        let state = tiny_state();
        let positions = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let vtk = vtk_point_snapshot("snapshot", &positions, &state);
        assert!(vtk.starts_with("# vtk DataFile Version 3.0\n"));
        assert!(vtk.contains("POINTS 2 double"));
        assert!(vtk.contains("VERTICES 2 4"));
        assert!(vtk.contains("SCALARS displacement_magnitude double 1"));
        assert!(vtk.contains("SCALARS damage double 1"));
        // |(3e-3, 4e-3)| = 5e-3
        assert!(vtk.contains("\n0.005\n"));
        // deterministic output
        assert_eq!(vtk, vtk_point_snapshot("snapshot", &positions, &state));
    }
}
