//! Quasi-static bond-based peridynamics with irreversible bond failure.
//!
//! Each load step applies a displacement increment and then alternates
//! linear solves with brittle bond deactivation until no further bond
//! exceeds its critical stretch (sequentially linear analysis). Bond
//! breaking is history dependent: once broken, always broken.
//!
//! All assembly and reduction orders are fixed, so identical inputs
//! produce bit-identical histories regardless of thread count.

use rayon::prelude::*;

use crate::grid::{BondSet, NodeSet};
use crate::sparse::{solve_cg, CgOptions, CsrMatrix};
use crate::{Error, Result};

/// One Dirichlet constraint family: a set of nodes driven along one
/// component by a per-step increment.
#[derive(Debug, Clone)]
pub struct DirichletSet {
    pub nodes: Vec<u32>,
    pub component: usize,
    pub increment: f64,
    /// reactions on this set feed the reported reaction stress
    pub measured: bool,
}

/// Displacement-driven load program.
#[derive(Debug, Clone)]
pub struct LoadProgram {
    pub steps: usize,
    pub sets: Vec<DirichletSet>,
    /// imposed displacement reported per step (e.g. the total relative
    /// motion of the driven faces)
    pub imposed_per_step: f64,
    /// measure of the loaded face, converting reaction force to stress
    pub reaction_measure: f64,
}

impl LoadProgram {
    /// Opposing stretch along `axis`: the two faces move apart by
    /// `2 * per_side` per step and the face midpoints are pinned in the
    /// transverse directions. The positive face is the measured one.
    pub fn stretch_axis(nodes: &NodeSet, axis: usize, per_side: f64, steps: usize) -> LoadProgram {
        let dim = nodes.dim;
        let minus = nodes.face_nodes(axis, false, 1);
        let plus = nodes.face_nodes(axis, true, 1);
        let mut sets = vec![
            DirichletSet {
                nodes: minus,
                component: axis,
                increment: -per_side,
                measured: false,
            },
            DirichletSet {
                nodes: plus,
                component: axis,
                increment: per_side,
                measured: true,
            },
        ];
        // pin the face midpoints transversely (both faces)
        let mut mid = [0.0; 3];
        for k in 0..dim {
            mid[k] = 0.5 * nodes.extent[k];
        }
        for positive in [false, true] {
            let mut p = mid;
            p[axis] = if positive { nodes.extent[axis] } else { 0.0 };
            let node = nodes.nearest_node(p);
            for c in 0..dim {
                if c != axis {
                    sets.push(DirichletSet {
                        nodes: vec![node],
                        component: c,
                        increment: 0.0,
                        measured: false,
                    });
                }
            }
        }
        // in 3D the face-center pins sit on the load axis and cannot stop
        // the spin about it (an exact null mode of the linearized bond
        // energy); one off-center pin on the positive face removes it
        if dim == 3 {
            let t1 = (axis + 1) % 3;
            let t2 = (axis + 2) % 3;
            let mut p = mid;
            p[axis] = nodes.extent[axis];
            p[t1] = 0.25 * nodes.extent[t1];
            let node = nodes.nearest_node(p);
            sets.push(DirichletSet {
                nodes: vec![node],
                component: t2,
                increment: 0.0,
                measured: false,
            });
        }
        let mut measure = 1.0;
        for k in 0..dim {
            if k != axis {
                measure *= nodes.extent[k];
            }
        }
        LoadProgram {
            steps,
            sets,
            imposed_per_step: 2.0 * per_side,
            reaction_measure: measure,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PdOptions {
    pub cg: CgOptions,
    pub max_inner_sweeps: usize,
}

impl Default for PdOptions {
    fn default() -> Self {
        PdOptions {
            cg: CgOptions {
                tol: 1e-10,
                max_iter: 50_000,
            },
            max_inner_sweeps: 200,
        }
    }
}

/// Per-step summary appended to the history.
#[derive(Debug, Clone, Copy)]
pub struct StepRecord {
    pub step: usize,
    pub imposed: f64,
    pub reaction_stress: f64,
    pub broken_bonds: usize,
    pub newly_broken: usize,
    pub dissipated_energy: f64,
    pub external_work: f64,
    pub inner_sweeps: usize,
}

/// Mutable simulation state: displacements, bond health, damage, energy
/// accumulators and the per-step history.
#[derive(Debug, Clone)]
pub struct SimState {
    pub dim: usize,
    pub u: Vec<[f64; 3]>,
    pub kappa: Vec<bool>,
    pub damage: Vec<f64>,
    pub dissipated: f64,
    pub external_work: f64,
    pub frozen_nodes: usize,
    pub history: Vec<StepRecord>,
}

impl SimState {
    fn new(bonds: &BondSet) -> Self {
        SimState {
            dim: bonds.dim,
            u: vec![[0.0; 3]; bonds.n_nodes],
            kappa: vec![true; bonds.len()],
            damage: vec![0.0; bonds.n_nodes],
            dissipated: 0.0,
            external_work: 0.0,
            frozen_nodes: 0,
            history: Vec::new(),
        }
    }

    pub fn broken_bonds(&self) -> usize {
        self.kappa.iter().filter(|k| !**k).count()
    }

    fn update_damage(&mut self, bonds: &BondSet) {
        for (n, incident) in bonds.node_bonds.iter().enumerate() {
            if incident.is_empty() {
                continue;
            }
            let broken = incident
                .iter()
                .filter(|&&b| !self.kappa[b as usize])
                .count();
            self.damage[n] = broken as f64 / incident.len() as f64;
        }
    }
}

/// Stretch of one bond under the current displacement field (exact, not
/// linearized): `s = (|ζ + u' - u| - |ζ|) / |ζ|`.
pub fn bond_stretch(bond: &crate::grid::Bond, u: &[[f64; 3]]) -> f64 {
    let (i, j) = (bond.i as usize, bond.j as usize);
    let mut d2 = 0.0;
    for k in 0..3 {
        let z = bond.unit[k] * bond.length;
        let d = z + u[j][k] - u[i][k];
        d2 += d * d;
    }
    (d2.sqrt() - bond.length) / bond.length
}

/// Break every live bond whose stretch reached its critical value
/// (`s >= s0`); returns the number of newly broken bonds.
pub fn failure_sweep(bonds: &BondSet, u: &[[f64; 3]], kappa: &mut [bool]) -> usize {
    let newly: Vec<usize> = bonds
        .bonds
        .par_iter()
        .enumerate()
        .filter(|(id, b)| {
            kappa[*id] && b.critical_stretch.is_finite() && {
                let s = bond_stretch(b, u);
                s >= b.critical_stretch
            }
        })
        .map(|(id, _)| id)
        .collect();
    for &id in &newly {
        kappa[id] = false;
    }
    newly.len()
}

/// Assembled linear system with the sparsity of the bond graph.
pub struct PdSystem {
    matrix: CsrMatrix,
    n_dofs: usize,
    full_values: Vec<f64>,
}

impl PdSystem {
    pub fn new(bonds: &BondSet) -> Self {
        let dim = bonds.dim;
        let n_dofs = bonds.n_nodes * dim;
        let mut adjacency: Vec<Vec<u32>> = Vec::with_capacity(n_dofs);
        for node in 0..bonds.n_nodes {
            let mut cols: Vec<u32> = Vec::with_capacity((bonds.node_bonds[node].len() + 1) * dim);
            let push_node = |cols: &mut Vec<u32>, other: usize| {
                for c in 0..dim {
                    cols.push((other * dim + c) as u32);
                }
            };
            push_node(&mut cols, node);
            for &bid in &bonds.node_bonds[node] {
                let b = &bonds.bonds[bid as usize];
                let other = if b.i as usize == node { b.j } else { b.i };
                push_node(&mut cols, other as usize);
            }
            cols.sort_unstable();
            for _ in 0..dim {
                adjacency.push(cols.clone());
            }
        }
        let matrix = CsrMatrix::from_pattern(&adjacency);
        let nnz = matrix.values().len();
        PdSystem {
            matrix,
            n_dofs,
            full_values: vec![0.0; nnz],
        }
    }

    /// Reassemble stiffness values from live bonds; row-parallel with a
    /// fixed per-row bond order.
    fn assemble(&mut self, bonds: &BondSet, kappa: &[bool]) {
        let dim = bonds.dim;
        self.matrix.zero_values();
        // compute per-row values into a scratch copy of the value array
        let mut values = std::mem::take(&mut self.full_values);
        values.iter_mut().for_each(|v| *v = 0.0);
        // determine row slices once
        let matrix = &self.matrix;
        let row_ranges: Vec<(usize, usize)> = (0..self.n_dofs)
            .map(|r| {
                let (cols, _) = matrix.row(r);
                let start = matrix.position(r, cols[0]).unwrap();
                (start, start + cols.len())
            })
            .collect();
        let slices = split_rows(&mut values, &row_ranges);
        slices
            .into_par_iter()
            .enumerate()
            .for_each(|(row, slice)| {
                let node = row / dim;
                let comp = row % dim;
                let (cols, _) = matrix.row(row);
                for &bid in &bonds.node_bonds[node] {
                    if !kappa[bid as usize] {
                        continue;
                    }
                    let b = &bonds.bonds[bid as usize];
                    let other = if b.i as usize == node { b.j } else { b.i } as usize;
                    let k = b.stiffness;
                    for c in 0..dim {
                        let v = k * b.unit[comp] * b.unit[c];
                        let diag_col = (node * dim + c) as u32;
                        let off_col = (other * dim + c) as u32;
                        let di = cols.binary_search(&diag_col).unwrap();
                        let oi = cols.binary_search(&off_col).unwrap();
                        slice[di] += v;
                        slice[oi] -= v;
                    }
                }
            });
        self.full_values = values;
        self.matrix.set_values(self.full_values.clone());
    }

    /// Reaction forces `K_full * u` (external loads are zero here, so the
    /// residual at constrained dofs is the constraint force).
    fn reactions(&mut self, u_flat: &[f64], out: &mut [f64]) {
        self.matrix.set_values(self.full_values.clone());
        self.matrix.mul_vec(u_flat, out);
    }
}

/// Split a value buffer into disjoint row slices (rows are contiguous).
fn split_rows<'a>(values: &'a mut [f64], ranges: &[(usize, usize)]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(ranges.len());
    let mut rest = values;
    let mut offset = 0;
    for &(start, end) in ranges {
        debug_assert_eq!(start, offset);
        let (head, tail) = rest.split_at_mut(end - start);
        out.push(head);
        rest = tail;
        offset = end;
    }
    debug_assert!(rest.is_empty());
    out
}

/// Union-find over nodes connected by live bonds, used to freeze floating
/// fragments that no longer reach any constraint.
fn floating_nodes(bonds: &BondSet, kappa: &[bool], constrained: &[bool]) -> Vec<bool> {
    let n = bonds.n_nodes;
    let mut parent: Vec<u32> = (0..n as u32).collect();
    fn find(parent: &mut [u32], mut x: u32) -> u32 {
        while parent[x as usize] != x {
            parent[x as usize] = parent[parent[x as usize] as usize];
            x = parent[x as usize];
        }
        x
    }
    for (id, b) in bonds.bonds.iter().enumerate() {
        if kappa[id] {
            let ri = find(&mut parent, b.i);
            let rj = find(&mut parent, b.j);
            if ri != rj {
                parent[ri.max(rj) as usize] = ri.min(rj);
            }
        }
    }
    let mut anchored = vec![false; n];
    for node in 0..n {
        if constrained[node] {
            let r = find(&mut parent, node as u32) as usize;
            anchored[r] = true;
        }
    }
    (0..n)
        .map(|node| {
            let r = find(&mut parent, node as u32) as usize;
            !anchored[r]
        })
        .collect()
}

/// Solve the linearized equilibrium for the current bond health and the
/// given constraint values. Floating fragments and stiffness-free dofs are
/// held at their current displacement.
pub fn assemble_and_solve(
    system: &mut PdSystem,
    bonds: &BondSet,
    kappa: &[bool],
    constraints: &[(usize, f64)],
    u: &mut [[f64; 3]],
    opts: &CgOptions,
) -> Result<usize> {
    let dim = bonds.dim;
    if constraints.is_empty() {
        return Err(Error::SingularSystem("load program has no constraints".into()));
    }
    system.assemble(bonds, kappa);

    let mut constrained_nodes = vec![false; bonds.n_nodes];
    for &(dof, _) in constraints {
        constrained_nodes[dof / dim] = true;
    }
    let floating = floating_nodes(bonds, kappa, &constrained_nodes);

    let mut all_constraints: Vec<(usize, f64)> = constraints.to_vec();
    let mut frozen = 0usize;
    for (node, f) in floating.iter().enumerate() {
        if *f {
            frozen += 1;
            for c in 0..dim {
                all_constraints.push((node * dim + c, u[node][c]));
            }
        }
    }
    // dofs with no stiffness left (e.g. a node whose remaining bonds are
    // all orthogonal to one direction) are held in place as well
    {
        let diag = system.matrix.diagonal();
        let scale = diag.iter().cloned().fold(0.0f64, f64::max);
        let is_set: std::collections::HashSet<usize> =
            all_constraints.iter().map(|c| c.0).collect();
        for (dof, &d) in diag.iter().enumerate() {
            if d <= 1e-14 * scale && !is_set.contains(&dof) {
                all_constraints.push((dof, u[dof / dim][dof % dim]));
            }
        }
    }
    all_constraints.sort_by_key(|c| c.0);
    all_constraints.dedup_by_key(|c| c.0);

    let mut rhs = vec![0.0; system.n_dofs];
    system.matrix.apply_dirichlet(&mut rhs, &all_constraints);

    let mut x: Vec<f64> = vec![0.0; system.n_dofs];
    for (n, un) in u.iter().enumerate() {
        for c in 0..dim {
            x[n * dim + c] = un[c];
        }
    }
    // warm start must satisfy the constraints for a clean residual
    for &(dof, val) in &all_constraints {
        x[dof] = val;
    }
    solve_cg(&system.matrix, &rhs, &mut x, *opts)?;
    for (n, un) in u.iter_mut().enumerate() {
        for c in 0..dim {
            un[c] = x[n * dim + c];
        }
    }
    Ok(frozen)
}

/// Run a displacement-driven quasi-static program with an observer invoked
/// after each committed step.
pub fn quasi_static_run_with(
    bonds: &BondSet,
    program: &LoadProgram,
    opts: &PdOptions,
    mut observer: impl FnMut(usize, &SimState),
) -> Result<SimState> {
    let dim = bonds.dim;
    let mut state = SimState::new(bonds);
    let mut system = PdSystem::new(bonds);
    let mut u_flat = vec![0.0; bonds.n_nodes * dim];
    let mut reactions = vec![0.0; bonds.n_nodes * dim];
    let mut prev_set_forces: Vec<f64> = vec![0.0; program.sets.len()];

    for step in 1..=program.steps {
        let constraints: Vec<(usize, f64)> = program
            .sets
            .iter()
            .flat_map(|set| {
                let value = set.increment * step as f64;
                set.nodes
                    .iter()
                    .map(move |&n| (n as usize * dim + set.component, value))
            })
            .collect();

        let mut sweeps = 0usize;
        let mut newly_total = 0usize;
        let mut pre_sweep_forces: Option<Vec<f64>> = None;
        loop {
            let frozen = assemble_and_solve(
                &mut system,
                bonds,
                &state.kappa,
                &constraints,
                &mut state.u,
                &opts.cg,
            )?;
            state.frozen_nodes = frozen;

            // forces right after the elastic segment (incoming bond state),
            // before any breaking: these carry the boundary work of the step
            if pre_sweep_forces.is_none() {
                for (n, un) in state.u.iter().enumerate() {
                    for c in 0..dim {
                        u_flat[n * dim + c] = un[c];
                    }
                }
                system.reactions(&u_flat, &mut reactions);
                pre_sweep_forces = Some(
                    program
                        .sets
                        .iter()
                        .map(|set| {
                            set.nodes
                                .iter()
                                .map(|&n| reactions[n as usize * dim + set.component])
                                .sum()
                        })
                        .collect(),
                );
            }

            // dissipated energy of the bonds that break in this sweep,
            // evaluated at the moment of breaking
            let u = &state.u;
            let pre_kappa = state.kappa.clone();
            let newly = failure_sweep(bonds, u, &mut state.kappa);
            if newly > 0 {
                for (id, b) in bonds.bonds.iter().enumerate() {
                    if pre_kappa[id] && !state.kappa[id] {
                        let s = bond_stretch(b, u);
                        let elong = s * b.length;
                        state.dissipated += 0.5 * b.stiffness * elong * elong;
                    }
                }
            }
            newly_total += newly;
            if newly == 0 {
                break;
            }
            sweeps += 1;
            if sweeps > opts.max_inner_sweeps {
                return Err(Error::NonConvergence {
                    step,
                    max_sweeps: opts.max_inner_sweeps,
                });
            }
        }

        // reactions and external work on the converged state
        for (n, un) in state.u.iter().enumerate() {
            for c in 0..dim {
                u_flat[n * dim + c] = un[c];
            }
        }
        system.reactions(&u_flat, &mut reactions);
        let pre_forces = pre_sweep_forces.unwrap();
        let mut reaction_stress = 0.0;
        for (si, set) in program.sets.iter().enumerate() {
            let force: f64 = set
                .nodes
                .iter()
                .map(|&n| reactions[n as usize * dim + set.component])
                .sum();
            // trapezoid over the elastic segment: breaking happens at fixed
            // displacement and does no boundary work
            if set.increment != 0.0 {
                state.external_work +=
                    0.5 * (prev_set_forces[si] + pre_forces[si]) * set.increment;
            }
            if set.measured {
                reaction_stress += force / program.reaction_measure;
            }
            prev_set_forces[si] = force;
        }

        state.update_damage(bonds);
        let broken = state.broken_bonds();
        state.history.push(StepRecord {
            step,
            imposed: program.imposed_per_step * step as f64,
            reaction_stress,
            broken_bonds: broken,
            newly_broken: newly_total,
            dissipated_energy: state.dissipated,
            external_work: state.external_work,
            inner_sweeps: sweeps,
        });
        debug_assert!(state
            .history
            .windows(2)
            .all(|w| w[1].broken_bonds >= w[0].broken_bonds));
        debug_assert!(state
            .history
            .windows(2)
            .all(|w| w[1].dissipated_energy >= w[0].dissipated_energy));
        observer(step, &state);
    }
    Ok(state)
}

pub fn quasi_static_run(
    bonds: &BondSet,
    program: &LoadProgram,
    opts: &PdOptions,
) -> Result<SimState> {
    quasi_static_run_with(bonds, program, opts, |_, _| {})
}

/// Average reaction stress over a measured constraint set at a recorded
/// step (last step if `step` is `None`).
pub fn reaction_stress(state: &SimState, step: Option<usize>) -> f64 {
    match step {
        Some(s) => state
            .history
            .iter()
            .find(|r| r.step == s)
            .map(|r| r.reaction_stress)
            .unwrap_or(0.0),
        None => state
            .history
            .last()
            .map(|r| r.reaction_stress)
            .unwrap_or(0.0),
    }
}

pub fn dissipated_energy(state: &SimState) -> f64 {
    state.dissipated
}
