//! Mixed finite-element assembly of the linear descriptor system, the
//! nonlinear stationary solve, and friction linearization.
//!
//! Discretization: piecewise-constant pressure per element, continuous
//! piecewise-linear mass flux per pipe, and one Lagrange multiplier per
//! interior node enforcing the Kirchhoff flux balance. State ordering is
//! [ all pressure dofs | all flux dofs | interior-node multipliers ].

use std::collections::BTreeMap;
use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NodeKind, PipeNetwork};
use crate::sparse::SpMat;

/// Mesh resolution, as written in scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeshSpec {
    ElementsPerPipe(usize),
    MaxElementLength(f64),
}

impl MeshSpec {
    fn elements_for(&self, length: f64) -> Result<usize> {
        let m = match *self {
            MeshSpec::ElementsPerPipe(k) => k,
            MeshSpec::MaxElementLength(hmax) => {
                if hmax <= 0.0 {
                    0
                } else {
                    (length / hmax).ceil() as usize
                }
            }
        };
        if m == 0 {
            return Err(Error::Dimension(format!(
                "mesh spec {self:?} yields 0 elements for pipe of length {length}"
            )));
        }
        Ok(m)
    }
}

/// Mesh and dof offsets for one pipe.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMesh {
    pub edge_id: String,
    pub elements: usize,
    pub h: f64,
    /// First pressure dof (global index).
    pub p_start: usize,
    /// First flux dof (global index); the pipe owns `elements + 1` flux dofs.
    pub q_start: usize,
}

/// Global dof layout of an assembled system.
#[derive(Debug, Clone, PartialEq)]
pub struct DofLayout {
    pub edges: Vec<EdgeMesh>,
    pub np: usize,
    pub nq: usize,
    pub n_mult: usize,
    /// Interior node ids, in network file order; multiplier i belongs to
    /// `interior[i]` at global dof `np + nq + i`.
    pub interior: Vec<String>,
    /// Boundary node ids in network file order; column i of B belongs to
    /// `boundary[i]`.
    pub boundary: Vec<String>,
}

impl DofLayout {
    pub fn n(&self) -> usize {
        self.np + self.nq + self.n_mult
    }

    pub fn pressure_range(&self) -> Range<usize> {
        0..self.np
    }

    pub fn flux_range(&self) -> Range<usize> {
        self.np..self.np + self.nq
    }

    pub fn multiplier_range(&self) -> Range<usize> {
        self.np + self.nq..self.n()
    }

    pub fn edge_mesh(&self, edge_id: &str) -> Option<&EdgeMesh> {
        self.edges.iter().find(|m| m.edge_id == edge_id)
    }

    pub fn boundary_index(&self, node_id: &str) -> Option<usize> {
        self.boundary.iter().position(|b| b == node_id)
    }
}

/// Block index sets of a (full or reduced) descriptor system.
#[derive(Debug, Clone, PartialEq)]
pub struct Blocks {
    pub pressure: Range<usize>,
    pub flux: Range<usize>,
    pub multiplier: Range<usize>,
}

/// Linear time-invariant descriptor system E x' = A x + B u, y = C x.
#[derive(Debug, Clone)]
pub struct DescriptorSystem {
    pub e: SpMat,
    pub a: SpMat,
    pub b: SpMat,
    pub c: SpMat,
    pub blocks: Blocks,
    /// Mesh layout; `None` for reduced systems.
    pub layout: Option<DofLayout>,
    /// Boundary node ids owning the columns of B.
    pub boundary: Vec<String>,
    /// Measured node ids owning the rows of C.
    pub measured: Vec<String>,
}

impl DescriptorSystem {
    pub fn n(&self) -> usize {
        self.e.nrows()
    }

    pub fn n_boundary(&self) -> usize {
        self.b.ncols()
    }

    pub fn r_out(&self) -> usize {
        self.c.nrows()
    }

    /// Gershgorin upper bound on the eigenvalues of (A + A^T)/2.
    /// Non-positive bound certifies dissipativity without a dense eigensolve.
    pub fn dissipativity_bound(&self) -> f64 {
        let sym = self.a.add_scaled(0.5, &self.a.transpose(), 0.5);
        let n = sym.nrows();
        let mut diag = vec![0.0f64; n];
        let mut radius = vec![0.0f64; n];
        for (r, c, v) in sym.iter() {
            if r == c {
                diag[r] += v;
            } else {
                radius[r] += v.abs();
            }
        }
        (0..n).map(|i| diag[i] + radius[i]).fold(f64::NEG_INFINITY, f64::max)
    }

    /// Largest eigenvalue of (A + A^T)/2, dense path (small systems / tests).
    pub fn max_sym_eigenvalue(&self) -> f64 {
        let sym = self.a.add_scaled(0.5, &self.a.transpose(), 0.5).to_dense();
        let eig = sym.symmetric_eigen();
        eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v))
    }

    /// Mass-weighted discrete L2 norm over pressure and flux dofs.
    /// Multiplier entries do not contribute (E is zero there anyway).
    pub fn state_norm(&self, x: &DVector<f64>) -> f64 {
        assert_eq!(x.len(), self.n(), "state norm dimension mismatch");
        let ex = self.e.mul_vec(x);
        let mut acc = 0.0;
        for i in self.blocks.pressure.clone().chain(self.blocks.flux.clone()) {
            acc += x[i] * ex[i];
        }
        acc.max(0.0).sqrt()
    }

    /// Plain Euclidean norm over pressure and flux dofs.
    pub fn state_norm_euclidean(&self, x: &DVector<f64>) -> f64 {
        let mut acc = 0.0;
        for i in self.blocks.pressure.clone().chain(self.blocks.flux.clone()) {
            acc += x[i] * x[i];
        }
        acc.sqrt()
    }
}

fn interior_index(net: &PipeNetwork) -> BTreeMap<&str, usize> {
    net.interior_nodes().into_iter().enumerate().map(|(i, id)| (id, i)).collect()
}

fn build_layout(net: &PipeNetwork, mesh: &MeshSpec) -> Result<DofLayout> {
    let mut edges = Vec::with_capacity(net.edges.len());
    let mut np = 0usize;
    for e in &net.edges {
        let m = mesh.elements_for(e.length)?;
        edges.push(EdgeMesh {
            edge_id: e.id.clone(),
            elements: m,
            h: e.length / m as f64,
            p_start: np,
            q_start: 0, // fixed up below
        });
        np += m;
    }
    let mut q_off = np;
    for em in &mut edges {
        em.q_start = q_off;
        q_off += em.elements + 1;
    }
    let nq = q_off - np;
    let interior: Vec<String> = net.interior_nodes().into_iter().map(String::from).collect();
    let boundary: Vec<String> = net.boundary_nodes().into_iter().map(String::from).collect();
    Ok(DofLayout { edges, np, nq, n_mult: interior.len(), interior, boundary })
}

/// Assemble the linear descriptor system (requires d_lin on every edge).
pub fn assemble_linear(net: &PipeNetwork, mesh: &MeshSpec) -> Result<DescriptorSystem> {
    let d_lin: Vec<f64> = net
        .edges
        .iter()
        .map(|e| {
            e.d_lin.ok_or_else(|| {
                Error::Missing(format!("edge '{}' has no d_lin; run linearize_friction", e.id))
            })
        })
        .collect::<Result<_>>()?;
    assemble_with_damping(net, mesh, &d_lin)
}

/// Assembly with an explicit per-edge damping coefficient. The nonlinear
/// simulator reuses this with zero damping to get the frictionless structure.
pub(crate) fn assemble_with_damping(
    net: &PipeNetwork,
    mesh: &MeshSpec,
    damping: &[f64],
) -> Result<DescriptorSystem> {
    let layout = build_layout(net, mesh)?;
    let n = layout.n();
    let interior = interior_index(net);
    let mult_base = layout.np + layout.nq;

    let mut e_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut a_trip: Vec<(usize, usize, f64)> = Vec::new();
    let mut b_trip: Vec<(usize, usize, f64)> = Vec::new();

    for (ei, edge) in net.edges.iter().enumerate() {
        let em = &layout.edges[ei];
        let (m, h) = (em.elements, em.h);
        let dl = damping[ei];

        // Pressure mass (diagonal) and the divergence coupling.
        for i in 0..m {
            let p = em.p_start + i;
            let q_l = em.q_start + i;
            let q_r = em.q_start + i + 1;
            e_trip.push((p, p, edge.a * h));
            // a h p_i' = -(q_{i+1} - q_i)
            a_trip.push((p, q_l, 1.0));
            a_trip.push((p, q_r, -1.0));
            // transposed (weak gradient) coupling into the flux equations
            a_trip.push((q_l, p, -1.0));
            a_trip.push((q_r, p, 1.0));
        }

        // Flux mass (consistent, b-weighted) and linear damping (d_lin-weighted).
        for i in 0..m {
            let q_l = em.q_start + i;
            let q_r = em.q_start + i + 1;
            for (r, c, w) in [
                (q_l, q_l, h / 3.0),
                (q_r, q_r, h / 3.0),
                (q_l, q_r, h / 6.0),
                (q_r, q_l, h / 6.0),
            ] {
                e_trip.push((r, c, edge.b * w));
                if dl != 0.0 {
                    a_trip.push((r, c, -dl * w));
                }
            }
        }

        // Endpoint pressure terms: multipliers at junctions, inputs at boundary.
        let q_first = em.q_start;
        let q_last = em.q_start + m;
        for (node, q_dof, sign) in [(&edge.from, q_first, 1.0), (&edge.to, q_last, -1.0)] {
            match net.node(node).map(|nd| nd.kind) {
                Some(NodeKind::Interior) => {
                    let mult = mult_base + interior[node.as_str()];
                    a_trip.push((q_dof, mult, sign));
                    // Kirchhoff constraint row: negative transpose of the coupling.
                    a_trip.push((mult, q_dof, -sign));
                }
                Some(NodeKind::Boundary) => {
                    let col = layout.boundary_index(node).expect("boundary node indexed");
                    b_trip.push((q_dof, col, sign));
                }
                None => {
                    return Err(Error::InvalidNetwork(format!(
                        "edge '{}' references unknown node '{}'",
                        edge.id, node
                    )))
                }
            }
        }
    }

    let blocks = Blocks {
        pressure: layout.pressure_range(),
        flux: layout.flux_range(),
        multiplier: layout.multiplier_range(),
    };
    Ok(DescriptorSystem {
        e: SpMat::from_triplets(n, n, e_trip),
        a: SpMat::from_triplets(n, n, a_trip),
        b: SpMat::from_triplets(n, layout.boundary.len(), b_trip),
        c: SpMat::zeros(0, n),
        blocks,
        boundary: layout.boundary.clone(),
        layout: Some(layout),
        measured: Vec::new(),
    })
}

/// Install the output matrix selecting boundary mass-flux values.
/// Row i measures the net flux leaving `measured[i]` into the network.
pub fn assemble_output(
    net: &PipeNetwork,
    sys: &mut DescriptorSystem,
    measured: &[String],
) -> Result<()> {
    let layout = sys
        .layout
        .as_ref()
        .ok_or_else(|| Error::Dimension("assemble_output requires a full (meshed) system".into()))?;
    let mut c_trip: Vec<(usize, usize, f64)> = Vec::new();
    for (row, node) in measured.iter().enumerate() {
        match net.node(node).map(|nd| nd.kind) {
            Some(NodeKind::Boundary) => {}
            Some(NodeKind::Interior) => {
                return Err(Error::Schema(format!(
                    "measured node '{node}' is interior; only boundary fluxes are observable"
                )))
            }
            None => return Err(Error::Schema(format!("measured node '{node}' is unknown"))),
        }
        for (ei, edge) in net.edges.iter().enumerate() {
            let em = &layout.edges[ei];
            if &edge.from == node {
                c_trip.push((row, em.q_start, 1.0));
            }
            if &edge.to == node {
                c_trip.push((row, em.q_start + em.elements, -1.0));
            }
        }
    }
    sys.c = SpMat::from_triplets(measured.len(), sys.n(), c_trip);
    sys.measured = measured.to_vec();
    Ok(())
}

/// Stationary (steady-state) solution of the nonlinear network model.
#[derive(Debug, Clone)]
pub struct StationaryState {
    pub node_pressure: BTreeMap<String, f64>,
    pub edge_flux: BTreeMap<String, f64>,
    /// Exact integral average of the pressure profile per edge.
    pub p_av: BTreeMap<String, f64>,
    /// Flux is constant along each pipe at steady state.
    pub q_av: BTreeMap<String, f64>,
    /// Pressure profile per edge: p(x)^2 = c - s x, stored as (c, s).
    profile: BTreeMap<String, (f64, f64)>,
}

impl StationaryState {
    /// Pressure at position x along edge `edge_id` (x in [0, l]).
    pub fn pressure_at(&self, edge_id: &str, x: f64) -> f64 {
        let (c, s) = self.profile[edge_id];
        (c - s * x).max(0.0).sqrt()
    }

    /// Full stationary state vector aligned with a system's dof ordering:
    /// element-midpoint pressures, nodal fluxes, junction pressures as
    /// multiplier values.
    pub fn state_vector(&self, sys: &DescriptorSystem) -> Result<DVector<f64>> {
        let layout = sys
            .layout
            .as_ref()
            .ok_or_else(|| Error::Dimension("state_vector requires a full system".into()))?;
        let mut x = DVector::zeros(layout.n());
        for em in &layout.edges {
            let q = self.edge_flux[&em.edge_id];
            for i in 0..em.elements {
                let xm = (i as f64 + 0.5) * em.h;
                x[em.p_start + i] = self.pressure_at(&em.edge_id, xm);
            }
            for j in 0..=em.elements {
                x[em.q_start + j] = q;
            }
        }
        let mult_base = layout.np + layout.nq;
        for (i, node) in layout.interior.iter().enumerate() {
            x[mult_base + i] = self.node_pressure[node];
        }
        Ok(x)
    }

    /// Max flux-balance residual over interior nodes.
    pub fn kirchhoff_residual(&self, net: &PipeNetwork) -> f64 {
        let mut worst: f64 = 0.0;
        for node in net.interior_nodes() {
            let mut bal = 0.0;
            for e in &net.edges {
                if e.to == node {
                    bal += self.edge_flux[&e.id];
                }
                if e.from == node {
                    bal -= self.edge_flux[&e.id];
                }
            }
            worst = worst.max(bal.abs());
        }
        worst
    }
}

/// Steady pipe flux from endpoint pressures: q|q| = (p_from^2 - p_to^2)/(2 d l).
fn pipe_flux(p_from: f64, p_to: f64, d: f64, l: f64) -> f64 {
    let z = p_from * p_from - p_to * p_to;
    z.signum() * (z.abs() / (2.0 * d * l)).sqrt()
}

/// Solve the stationary problem with prescribed boundary pressures.
pub fn stationary_solve(
    net: &PipeNetwork,
    boundary_pressures: &BTreeMap<String, f64>,
    tol: f64,
) -> Result<StationaryState> {
    for node in net.boundary_nodes() {
        let p = boundary_pressures.get(node).ok_or_else(|| {
            Error::Missing(format!("no boundary pressure for node '{node}'"))
        })?;
        if !(*p > 0.0) {
            return Err(Error::NonPositivePressure(format!(
                "boundary pressure at '{node}' is {p}"
            )));
        }
    }

    let boundary = net.boundary_nodes();
    let p_ref = boundary_pressures[boundary[0]];
    let all_equal = boundary.iter().all(|v| (boundary_pressures[*v] - p_ref).abs() == 0.0);
    let interior = net.interior_nodes();

    let mut node_pressure: BTreeMap<String, f64> = BTreeMap::new();
    for v in &boundary {
        node_pressure.insert((*v).to_string(), boundary_pressures[*v]);
    }

    if all_equal {
        // Zero flow, constant pressure: exact for any d >= 0.
        for v in &interior {
            node_pressure.insert((*v).to_string(), p_ref);
        }
        return Ok(finish_stationary(net, node_pressure));
    }

    if let Some(e) = net.edges.iter().find(|e| e.d == 0.0) {
        return Err(Error::Solver(format!(
            "edge '{}' has d = 0; the stationary flux is undetermined for unequal pressures",
            e.id
        )));
    }

    // Newton on the interior nodal pressures.
    let n = interior.len();
    let idx: BTreeMap<&str, usize> = interior.iter().enumerate().map(|(i, v)| (*v, i)).collect();
    let p_mean = boundary.iter().map(|v| boundary_pressures[*v]).sum::<f64>() / boundary.len() as f64;
    let mut p = DVector::from_element(n, p_mean);

    let pressure = |p: &DVector<f64>, node: &str| -> f64 {
        idx.get(node).map(|&i| p[i]).unwrap_or_else(|| boundary_pressures[node])
    };
    let residual = |p: &DVector<f64>| -> DVector<f64> {
        let mut f = DVector::zeros(n);
        for e in &net.edges {
            let q = pipe_flux(pressure(p, &e.from), pressure(p, &e.to), e.d, e.length);
            if let Some(&i) = idx.get(e.to.as_str()) {
                f[i] += q;
            }
            if let Some(&i) = idx.get(e.from.as_str()) {
                f[i] -= q;
            }
        }
        f
    };

    let max_iter = 50;
    let mut converged = n == 0;
    for _ in 0..max_iter {
        let f = residual(&p);
        if f.amax() <= tol {
            converged = true;
            break;
        }
        // Analytic Jacobian of the nodal balance, regularized at q = 0.
        let mut jac = DMatrix::zeros(n, n);
        for e in &net.edges {
            let pf = pressure(&p, &e.from);
            let pt = pressure(&p, &e.to);
            let q = pipe_flux(pf, pt, e.d, e.length);
            let denom = 2.0 * e.d * e.length * q.abs().max(1e-8 * (1.0 + q.abs()));
            let dq_dpf = pf / denom;
            let dq_dpt = -pt / denom;
            let fi = idx.get(e.from.as_str()).copied();
            let ti = idx.get(e.to.as_str()).copied();
            // dF/dp: F_to += q, F_from -= q
            if let Some(t) = ti {
                if let Some(ff) = fi {
                    jac[(t, ff)] += dq_dpf;
                }
                jac[(t, t)] += dq_dpt;
            }
            if let Some(ff) = fi {
                jac[(ff, ff)] -= dq_dpf;
                if let Some(t) = ti {
                    jac[(ff, t)] -= dq_dpt;
                }
            }
        }
        let step = jac
            .lu()
            .solve(&f)
            .ok_or_else(|| Error::Singular("stationary Newton Jacobian is singular".into()))?;
        // Damped update: halve on positivity violation.
        let mut alpha = 1.0;
        loop {
            let trial = &p - alpha * &step;
            if trial.iter().all(|&v| v > 0.0) {
                p = trial;
                break;
            }
            alpha *= 0.5;
            if alpha < 1e-12 {
                return Err(Error::NonPositivePressure(
                    "stationary Newton step forces a non-positive interior pressure".into(),
                ));
            }
        }
    }
    if !converged && residual(&p).amax() > tol {
        return Err(Error::Solver(format!(
            "stationary Newton did not reach tol {tol} in {max_iter} iterations (residual {})",
            residual(&p).amax()
        )));
    }
    for (v, &i) in &idx {
        node_pressure.insert((*v).to_string(), p[i]);
    }
    Ok(finish_stationary(net, node_pressure))
}

fn finish_stationary(net: &PipeNetwork, node_pressure: BTreeMap<String, f64>) -> StationaryState {
    let mut edge_flux = BTreeMap::new();
    let mut p_av = BTreeMap::new();
    let mut q_av = BTreeMap::new();
    let mut profile = BTreeMap::new();
    for e in &net.edges {
        let pf = node_pressure[&e.from];
        let pt = node_pressure[&e.to];
        let q = if (pf - pt).abs() == 0.0 || e.d == 0.0 {
            0.0
        } else {
            pipe_flux(pf, pt, e.d, e.length)
        };
        let c = pf * pf;
        let s = 2.0 * e.d * q * q.abs();
        // Integral average of sqrt(c - s x) over [0, l].
        let avg = if s.abs() < 1e-300 {
            c.sqrt()
        } else {
            let cl = (c - s * e.length).max(0.0);
            2.0 / (3.0 * s * e.length) * (c.powf(1.5) - cl.powf(1.5))
        };
        edge_flux.insert(e.id.clone(), q);
        q_av.insert(e.id.clone(), q);
        p_av.insert(e.id.clone(), avg);
        profile.insert(e.id.clone(), (c, s));
    }
    StationaryState { node_pressure, edge_flux, p_av, q_av, profile }
}

/// Fill d_lin = d |q_av| / p_av on every edge.
pub fn linearize_friction(net: &PipeNetwork, stat: &StationaryState) -> Result<PipeNetwork> {
    let mut out = net.clone();
    for e in &mut out.edges {
        let p_av = *stat
            .p_av
            .get(&e.id)
            .ok_or_else(|| Error::Missing(format!("stationary state lacks edge '{}'", e.id)))?;
        if !(p_av > 0.0) {
            return Err(Error::NonPositivePressure(format!(
                "average pressure on edge '{}' is {p_av}",
                e.id
            )));
        }
        e.d_lin = Some(e.d * stat.q_av[&e.id].abs() / p_av);
    }
    Ok(out)
}
