//! Structure-preserving projection bases (moment matching / POD), Galerkin
//! reduction of descriptor systems, basis augmentation for the filter state,
//! and empirical reduction error.
//!
//! Bases keep pressure and flux spaces separate (block columns), retain the
//! junction multipliers unreduced, and enforce the discrete compatibility
//! condition: gradients of pressure basis vectors are added to the flux space.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::discretization::{Blocks, DescriptorSystem};
use crate::error::{Error, Result};
use crate::simulation::{realize_inputs, BoundarySignal, ModelKind, Trajectory};
use crate::sparse::{SpLu, SpMat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BasisMethod {
    MomentMatching,
    Pod,
    Identity,
}

/// Basis construction parameters, as carried in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MorConfig {
    pub method: BasisMethod,
    /// Target reduced order (column count of V, multipliers included).
    #[serde(default)]
    pub order: Option<usize>,
    /// POD energy tolerance, used when `order` is absent.
    #[serde(default)]
    pub tolerance: Option<f64>,
    /// Moment-matching expansion points for the shifted pencil sE - A.
    #[serde(default = "default_shifts")]
    pub shifts: Vec<f64>,
}

fn default_shifts() -> Vec<f64> {
    vec![1.0]
}

impl MorConfig {
    pub fn moment_matching(order: usize) -> Self {
        MorConfig {
            method: BasisMethod::MomentMatching,
            order: Some(order),
            tolerance: None,
            shifts: default_shifts(),
        }
    }
}

/// Orthonormal projection basis with disjoint pressure/flux column blocks
/// and identity columns on the multiplier dofs.
#[derive(Debug, Clone)]
pub struct ProjectionBasis {
    /// N x n, orthonormal columns, ordered [pressure | flux | multiplier].
    pub v: DMatrix<f64>,
    pub n_p: usize,
    pub n_q: usize,
    pub n_m: usize,
    /// Row blocks of the full system this basis projects.
    pub row_blocks: Blocks,
    pub method: BasisMethod,
    pub warnings: Vec<String>,
}

impl ProjectionBasis {
    pub fn n(&self) -> usize {
        self.v.ncols()
    }

    /// Column blocks in reduced coordinates.
    pub fn reduced_blocks(&self) -> Blocks {
        Blocks {
            pressure: 0..self.n_p,
            flux: self.n_p..self.n_p + self.n_q,
            multiplier: self.n_p + self.n_q..self.n(),
        }
    }

    pub fn orthonormality_defect(&self) -> f64 {
        let g = self.v.tr_mul(&self.v);
        let mut worst: f64 = 0.0;
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((g[(i, j)] - target).abs());
            }
        }
        worst
    }

    /// Max magnitude outside the allowed block sparsity pattern.
    pub fn block_leakage(&self) -> f64 {
        let blocks = self.reduced_blocks();
        let mut worst: f64 = 0.0;
        for j in 0..self.n() {
            let allowed = if blocks.pressure.contains(&j) {
                self.row_blocks.pressure.clone()
            } else if blocks.flux.contains(&j) {
                self.row_blocks.flux.clone()
            } else {
                self.row_blocks.multiplier.clone()
            };
            for i in 0..self.v.nrows() {
                if !allowed.contains(&i) {
                    worst = worst.max(self.v[(i, j)].abs());
                }
            }
        }
        worst
    }
}

/// Block-diagonal augmentation diag(V, I) covering the boundary-noise dofs
/// appended to the filter state.
#[derive(Debug, Clone)]
pub struct AugmentedBasis {
    pub v_x: DMatrix<f64>,
    pub n_state: usize,
    pub n_boundary: usize,
}

pub fn augment_basis(basis: &ProjectionBasis, n_boundary: usize) -> AugmentedBasis {
    let (big_n, n) = (basis.v.nrows(), basis.v.ncols());
    let mut v_x = DMatrix::zeros(big_n + n_boundary, n + n_boundary);
    v_x.view_mut((0, 0), (big_n, n)).copy_from(&basis.v);
    for i in 0..n_boundary {
        v_x[(big_n + i, n + i)] = 1.0;
    }
    AugmentedBasis { v_x, n_state: n, n_boundary }
}

/// Modified Gram-Schmidt with one reorthogonalization pass. Returns the
/// accepted unit vector, or None when numerically dependent.
fn orth_against(cols: &[DVector<f64>], mut w: DVector<f64>) -> Option<DVector<f64>> {
    let orig = w.norm();
    if orig == 0.0 {
        return None;
    }
    for _ in 0..2 {
        for v in cols {
            let c = v.dot(&w);
            w.axpy(-c, v, 1.0);
        }
    }
    let n = w.norm();
    if n <= 1e-8 * orig {
        None
    } else {
        Some(w / n)
    }
}

struct BlockAccumulator {
    vp: Vec<DVector<f64>>,
    vq: Vec<DVector<f64>>,
    reserved: usize,
    target: usize,
}

impl BlockAccumulator {
    fn count(&self) -> usize {
        self.vp.len() + self.vq.len() + self.reserved
    }

    fn slots_left(&self) -> usize {
        self.target.saturating_sub(self.count())
    }
}

/// Build a projection basis for `sys` using `cfg`. When the intended use
/// starts away from the origin (e.g. at a stationary state), pass that state
/// in `seed_states`; its pressure/flux components are placed in the basis so
/// the initial condition is represented exactly.
pub fn build_basis(
    sys: &DescriptorSystem,
    cfg: &MorConfig,
    snapshots: Option<&Trajectory>,
    seed_states: &[DVector<f64>],
) -> Result<ProjectionBasis> {
    match cfg.method {
        BasisMethod::Identity => Ok(identity_basis(sys)),
        BasisMethod::MomentMatching => {
            let n = cfg.order.ok_or_else(|| {
                Error::Schema("moment matching requires an explicit order".into())
            })?;
            moment_matching_basis(sys, n, &cfg.shifts, seed_states)
        }
        BasisMethod::Pod => {
            let snaps = snapshots
                .ok_or_else(|| Error::Missing("POD requires a snapshot trajectory".into()))?;
            pod_basis(sys, cfg, snaps)
        }
    }
}

pub fn identity_basis(sys: &DescriptorSystem) -> ProjectionBasis {
    let n = sys.n();
    ProjectionBasis {
        v: DMatrix::identity(n, n),
        n_p: sys.blocks.pressure.len(),
        n_q: sys.blocks.flux.len(),
        n_m: sys.blocks.multiplier.len(),
        row_blocks: sys.blocks.clone(),
        method: BasisMethod::Identity,
        warnings: Vec::new(),
    }
}

/// Shared scaffolding: multiplier count/ranges, flux mass factorization, the
/// flux-pressure coupling block, and the junction coupling block T.
struct Spaces {
    p_range: std::ops::Range<usize>,
    q_range: std::ops::Range<usize>,
    n_m: usize,
    mq_lu: SpLu,
    a_qp: SpMat,
    t: SpMat,
}

impl Spaces {
    fn new(sys: &DescriptorSystem) -> Result<Self> {
        let p_range = sys.blocks.pressure.clone();
        let q_range = sys.blocks.flux.clone();
        let m_range = sys.blocks.multiplier.clone();
        let mq = sys.e.block(q_range.clone(), q_range.clone());
        Ok(Spaces {
            mq_lu: SpLu::factor(&mq)?,
            a_qp: sys.a.block(q_range.clone(), p_range.clone()),
            t: sys.a.block(q_range.clone(), m_range.clone()),
            n_m: m_range.len(),
            p_range,
            q_range,
        })
    }

    /// Flux seed spanning the image of the junction coupling in the flux
    /// space; keeps the reduced constraint block full-rank whenever the
    /// order budget allows all columns.
    fn constraint_seed(&self) -> DMatrix<f64> {
        self.mq_lu.solve_mat(&self.t.to_dense())
    }

    /// Discrete gradient image (mass-weighted) of a pressure basis vector.
    fn gradient_image(&self, vp: &DVector<f64>) -> DVector<f64> {
        self.mq_lu.solve_vec(&self.a_qp.mul_vec(vp))
    }

    fn p_part(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.p_range.len(), self.p_range.clone().map(|i| w[i]))
    }

    fn q_part(&self, w: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.q_range.len(), self.q_range.clone().map(|i| w[i]))
    }
}

/// Try to add the pressure part of `w` (with its gradient image) and the
/// flux part of `w` to the accumulator, within the remaining budget.
fn absorb_direction(spaces: &Spaces, acc: &mut BlockAccumulator, w: &DVector<f64>) -> bool {
    let mut added = false;
    // pressure chunk: a new pressure direction plus its gradient image, so
    // the compatibility condition survives truncation
    if acc.slots_left() >= 2 {
        if let Some(up) = orth_against(&acc.vp, spaces.p_part(w)) {
            let grad = spaces.gradient_image(&up);
            acc.vp.push(up);
            added = true;
            if let Some(uq) = orth_against(&acc.vq, grad) {
                acc.vq.push(uq);
            }
        }
    }
    if acc.slots_left() >= 1 {
        if let Some(uq) = orth_against(&acc.vq, spaces.q_part(w)) {
            acc.vq.push(uq);
            added = true;
        }
    }
    added
}

fn moment_matching_basis(
    sys: &DescriptorSystem,
    order: usize,
    shifts: &[f64],
    seed_states: &[DVector<f64>],
) -> Result<ProjectionBasis> {
    let big_n = sys.n();
    if order > big_n {
        return Err(Error::Dimension(format!("order {order} exceeds system size {big_n}")));
    }
    if shifts.is_empty() {
        return Err(Error::Schema("moment matching needs at least one shift".into()));
    }
    let spaces = Spaces::new(sys)?;
    let mut acc = BlockAccumulator {
        vp: Vec::new(),
        vq: Vec::new(),
        reserved: spaces.n_m.min(order),
        target: order,
    };
    let mut warnings = Vec::new();
    if acc.reserved < spaces.n_m {
        warnings.push(format!(
            "order {order} cannot hold all {} multiplier dofs; reduced model will be rank-deficient",
            spaces.n_m
        ));
    }

    // Flux seed first: reduced Kirchhoff rows need full rank.
    let seed = spaces.constraint_seed();
    for j in 0..seed.ncols() {
        if acc.slots_left() == 0 {
            break;
        }
        if let Some(u) = orth_against(&acc.vq, seed.column(j).into_owned()) {
            acc.vq.push(u);
        }
    }

    // Seed-state directions (initial state, operating points) so that the
    // trajectory's slow quasi-static component is represented exactly.
    for x0 in seed_states {
        if x0.len() != big_n {
            return Err(Error::Dimension("seed state dimension mismatch".into()));
        }
        absorb_direction(&spaces, &mut acc, x0);
    }

    // Block-Krylov directions of (sE - A)^{-1} applied to B, then E * previous.
    for &s in shifts {
        if acc.slots_left() == 0 {
            break;
        }
        let pencil = sys.e.add_scaled(s, &sys.a, -1.0);
        let lu = SpLu::factor(&pencil)
            .map_err(|e| Error::Singular(format!("shifted pencil at s={s} is singular: {e}")))?;
        let mut frontier = lu.solve_mat(&sys.b.to_dense());
        let max_levels = 4 * order + 8;
        let mut stalls = 0usize;
        for _level in 0..max_levels {
            if acc.slots_left() == 0 || stalls >= 3 {
                break;
            }
            let mut added = false;
            for j in 0..frontier.ncols() {
                let w = frontier.column(j).into_owned();
                added |= absorb_direction(&spaces, &mut acc, &w);
            }
            stalls = if added { 0 } else { stalls + 1 };
            frontier = lu.solve_mat(&sys.e.mul_dense(&frontier));
        }
    }

    if acc.count() < order {
        warnings.push(format!(
            "Krylov sequence exhausted at order {} (requested {order})",
            acc.count()
        ));
    }
    Ok(assemble_basis(sys, acc, BasisMethod::MomentMatching, warnings))
}

fn pod_basis(
    sys: &DescriptorSystem,
    cfg: &MorConfig,
    snaps: &Trajectory,
) -> Result<ProjectionBasis> {
    let big_n = sys.n();
    if snaps.states.is_empty() || snaps.states[0].len() != big_n {
        return Err(Error::Dimension("snapshot dimension does not match system".into()));
    }
    let spaces = Spaces::new(sys)?;
    let k = snaps.states.len();
    let extract = |range: std::ops::Range<usize>| {
        DMatrix::from_fn(range.len(), k, |i, j| snaps.states[j][range.start + i])
    };
    let svd_p = extract(spaces.p_range.clone()).svd(true, false);
    let svd_q = extract(spaces.q_range.clone()).svd(true, false);
    let u_p = svd_p.u.as_ref().expect("left vectors requested");
    let u_q = svd_q.u.as_ref().expect("left vectors requested");

    // greedy selection across both blocks by singular value
    let mut ranked: Vec<(f64, bool, usize)> = svd_p
        .singular_values
        .iter()
        .enumerate()
        .map(|(i, &s)| (s, true, i))
        .chain(svd_q.singular_values.iter().enumerate().map(|(i, &s)| (s, false, i)))
        .collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_energy: f64 = ranked.iter().map(|(s, _, _)| s * s).sum();

    let order = match (cfg.order, cfg.tolerance) {
        (Some(n), _) => n,
        (None, Some(tol)) => {
            let mut kept = spaces.n_m;
            let mut cum = 0.0;
            for (s, _, _) in &ranked {
                if total_energy > 0.0 && 1.0 - cum / total_energy <= tol {
                    break;
                }
                cum += s * s;
                kept += 1;
            }
            kept
        }
        (None, None) => {
            return Err(Error::Schema("POD needs an order or an energy tolerance".into()))
        }
    };
    if order > big_n {
        return Err(Error::Dimension(format!("order {order} exceeds system size {big_n}")));
    }

    let mut acc = BlockAccumulator {
        vp: Vec::new(),
        vq: Vec::new(),
        reserved: spaces.n_m.min(order),
        target: order,
    };
    let seed = spaces.constraint_seed();
    for j in 0..seed.ncols() {
        if acc.slots_left() == 0 {
            break;
        }
        if let Some(u) = orth_against(&acc.vq, seed.column(j).into_owned()) {
            acc.vq.push(u);
        }
    }
    for (s, is_p, i) in ranked {
        if acc.slots_left() == 0 || s <= 0.0 {
            break;
        }
        if is_p {
            if let Some(u) = orth_against(&acc.vp, u_p.column(i).into_owned()) {
                acc.vp.push(u);
            }
        } else if let Some(u) = orth_against(&acc.vq, u_q.column(i).into_owned()) {
            acc.vq.push(u);
        }
    }
    let mut warnings = Vec::new();
    if acc.count() < order {
        warnings.push(format!(
            "snapshot rank exhausted at order {} (requested {order})",
            acc.count()
        ));
    }
    Ok(assemble_basis(sys, acc, BasisMethod::Pod, warnings))
}

fn assemble_basis(
    sys: &DescriptorSystem,
    acc: BlockAccumulator,
    method: BasisMethod,
    warnings: Vec<String>,
) -> ProjectionBasis {
    let big_n = sys.n();
    let (n_p, n_q, n_m) = (acc.vp.len(), acc.vq.len(), acc.reserved);
    let n = n_p + n_q + n_m;
    let mut v = DMatrix::zeros(big_n, n);
    let p0 = sys.blocks.pressure.start;
    let q0 = sys.blocks.flux.start;
    let m0 = sys.blocks.multiplier.start;
    for (j, col) in acc.vp.iter().enumerate() {
        v.view_mut((p0, j), (col.len(), 1)).copy_from(col);
    }
    for (j, col) in acc.vq.iter().enumerate() {
        v.view_mut((q0, n_p + j), (col.len(), 1)).copy_from(col);
    }
    for j in 0..n_m {
        v[(m0 + j, n_p + n_q + j)] = 1.0;
    }
    ProjectionBasis { v, n_p, n_q, n_m, row_blocks: sys.blocks.clone(), method, warnings }
}

/// Galerkin reduction: VᵀEV, VᵀAV, VᵀB, CV.
pub fn reduce_system(sys: &DescriptorSystem, basis: &ProjectionBasis) -> Result<DescriptorSystem> {
    if basis.v.nrows() != sys.n() {
        return Err(Error::Dimension(format!(
            "basis has {} rows, system has {} dofs",
            basis.v.nrows(),
            sys.n()
        )));
    }
    let ev = sys.e.mul_dense(&basis.v);
    let av = sys.a.mul_dense(&basis.v);
    let e_r = basis.v.tr_mul(&ev);
    let a_r = basis.v.tr_mul(&av);
    let b_r = basis.v.tr_mul(&sys.b.to_dense());
    let c_r = sys.c.mul_dense(&basis.v);
    let reduced = DescriptorSystem {
        e: SpMat::from_dense(&e_r),
        a: SpMat::from_dense(&a_r),
        b: SpMat::from_dense(&b_r),
        c: SpMat::from_dense(&c_r),
        blocks: basis.reduced_blocks(),
        layout: None,
        boundary: sys.boundary.clone(),
        measured: sys.measured.clone(),
    };
    // congruence preserves the sign of the symmetric part; guard roundoff
    let bound = reduced.max_sym_eigenvalue();
    let scale = reduced.a.norm_max().max(1.0);
    if bound > 1e-8 * scale {
        return Err(Error::Solver(format!(
            "reduced system lost dissipativity: max symmetric eigenvalue {bound:.3e}"
        )));
    }
    Ok(reduced)
}

/// Dense theta-scheme for reduced systems. Uses an SVD pseudo-inverse so
/// orders too small to carry all junction constraints still integrate
/// (minimum-norm solution on the deficient subspace).
pub fn simulate_reduced(
    red: &DescriptorSystem,
    signals: &[BoundarySignal],
    x0: DVector<f64>,
    tau: f64,
    theta: f64,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    let n = red.n();
    if x0.len() != n {
        return Err(Error::Dimension("reduced initial state dimension mismatch".into()));
    }
    let (u_d, u_s) = realize_inputs(signals, &red.boundary, tau, steps, seed)?;
    let e = red.e.to_dense();
    let a = red.a.to_dense();
    let b = red.b.to_dense();
    let a_tau = &e - tau * theta * &a;
    let rhs_op = &e + tau * (1.0 - theta) * &a;
    let svd = a_tau.svd(true, true);
    let eps = 1e-12 * svd.singular_values.max();

    let mut states = Vec::with_capacity(steps + 1);
    let mut times = Vec::with_capacity(steps + 1);
    states.push(x0);
    times.push(0.0);
    for k in 0..steps {
        let nb = u_d.nrows();
        let u_bar = DVector::from_fn(nb, |i, _| {
            theta * u_d[(i, k + 1)] + (1.0 - theta) * u_d[(i, k)] + u_s[(i, k)]
        });
        let rhs = &rhs_op * &states[k] + tau * &b * u_bar;
        let x = svd
            .solve(&rhs, eps)
            .map_err(|e| Error::Singular(format!("reduced step solve failed: {e}")))?;
        states.push(x);
        times.push(tau * (k + 1) as f64);
    }
    let u_s_map = red
        .boundary
        .iter()
        .enumerate()
        .map(|(i, node)| (node.clone(), u_s.row(i).iter().copied().collect()))
        .collect();
    Ok(Trajectory { times, states, u_s: u_s_map, model: ModelKind::Linear })
}

/// Relative reduction error: L2 in space (mass-weighted, pressure/flux dofs),
/// L-infinity in time, on a deterministic scenario.
#[allow(clippy::too_many_arguments)]
pub fn reduction_error(
    full: &DescriptorSystem,
    reduced: &DescriptorSystem,
    basis: &ProjectionBasis,
    signals: &[BoundarySignal],
    x0: &DVector<f64>,
    tau: f64,
    theta: f64,
    steps: usize,
) -> Result<f64> {
    let traj =
        crate::simulation::simulate_linear_from(full, signals, x0.clone(), tau, theta, steps, 0)?;
    let x0_hat = basis.v.tr_mul(x0);
    let red_traj = simulate_reduced(reduced, signals, x0_hat, tau, theta, steps, 0)?;
    let mut worst = 0.0f64;
    let mut any_signal = false;
    for (x, xh) in traj.states.iter().zip(&red_traj.states) {
        let denom = full.state_norm(x);
        if denom == 0.0 {
            continue;
        }
        any_signal = true;
        let diff = x - &basis.v * xh;
        worst = worst.max(full.state_norm(&diff) / denom);
    }
    if !any_signal {
        // degenerate all-zero reference
        return Ok(0.0);
    }
    Ok(worst)
}
