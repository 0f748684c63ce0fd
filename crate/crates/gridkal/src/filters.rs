//! Time-discrete stochastic filter model and the Kalman filter family.
//!
//! The filter state stacks the descriptor dofs with the stochastic boundary
//! inputs, x = (x_descr, u_S). The transition matrix is never formed
//! explicitly for the full model; it is kept as sparse factors and applied
//! column-wise, which makes the covariance recursion feasible at full scale.
//!
//! Filters: classical Kalman filter (KF), Kalman filter on a reduced model
//! (RKF, reduction before time discretization), Compressed State Kalman
//! Filter (CSKF, reduction after time discretization), and the
//! perturbed-observation Ensemble Kalman Filter (EnKF/REnKF).

use crate::discretization::{DescriptorSystem, StationaryState};
use crate::error::{Error, Result};
use crate::mor::{augment_basis, reduce_system, AugmentedBasis, ProjectionBasis};
use crate::simulation::OuParams;
use crate::sparse::{SpLu, SpMat};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::time::Instant;

/// State-noise amplitude specification for the dynamic equations.
pub enum ZSpec<'a> {
    /// Paper rule: per pipe and per quantity, the maximal deviation of the
    /// stationary profile from its average value; multiplier rows zero.
    Stationary(&'a StationaryState),
    /// Explicit diagonal (must be zero on multiplier rows).
    Diagonal(DVector<f64>),
    /// No system noise on the dynamic equations.
    Zero,
}

/// Covariance that is diagonal for full models and dense for reduced ones.
#[derive(Debug, Clone)]
pub enum Cov {
    Diag(DVector<f64>),
    Dense(DMatrix<f64>),
}

impl Cov {
    pub fn dim(&self) -> usize {
        match self {
            Cov::Diag(d) => d.len(),
            Cov::Dense(m) => m.nrows(),
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Cov::Diag(d) => DMatrix::from_diagonal(d),
            Cov::Dense(m) => m.clone(),
        }
    }

    pub fn add_to(&self, target: &mut DMatrix<f64>) {
        match self {
            Cov::Diag(d) => {
                for i in 0..d.len() {
                    target[(i, i)] += d[i];
                }
            }
            Cov::Dense(m) => *target += m,
        }
    }

    /// Congruence projection VᵀQV.
    pub fn project(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            Cov::Diag(d) => {
                let mut scaled = v.clone();
                for (i, mut row) in scaled.row_iter_mut().enumerate() {
                    row.scale_mut(d[i]);
                }
                v.tr_mul(&scaled)
            }
            Cov::Dense(m) => v.tr_mul(&(m * v)),
        }
    }

    /// Matrix square root factor L with LLᵀ = Q, for sampling.
    pub fn sqrt_factor(&self) -> DMatrix<f64> {
        match self {
            Cov::Diag(d) => DMatrix::from_diagonal(&d.map(|x| x.max(0.0).sqrt())),
            Cov::Dense(m) => {
                if m.nrows() < 2 {
                    return m.map(|x| x.max(0.0).sqrt());
                }
                if let Some(chol) = m.clone().cholesky() {
                    return chol.l();
                }
                // PSD but singular (e.g. projected covariances): eigen route
                let eig = m.clone().symmetric_eigen();
                DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
                    eig.eigenvectors[(i, j)] * eig.eigenvalues[j].max(0.0).sqrt()
                })
            }
        }
    }
}

/// Per-filter wall-clock accounting, mirroring the offline/online protocol.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Timing {
    pub offline_s: f64,
    pub online_s: f64,
    pub postproc_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GainProvenance {
    Streaming,
    Precomputed,
    Ensemble,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    Full,
    Reduced,
}

/// Time-discrete filter model (Eq. 5-6): transition Φ kept as factors,
/// input map Ψ, measurement map H = (C, 0), noise covariances Q and R.
pub struct DiscreteFilterModel {
    /// Descriptor state dimension (full N or reduced n).
    pub n_x: usize,
    /// Number of stochastic boundary inputs.
    pub n_b: usize,
    /// Number of measured outputs.
    pub r_out: usize,
    /// Factorization of A_τ = E − τθA.
    a_tau: SpLu,
    /// E + τ(1−θ)A.
    e_plus: SpMat,
    /// τ A_τ⁻¹ B: both the Φ coupling block and the Ψ deterministic block.
    pub phi12: DMatrix<f64>,
    /// OU transition diagonal (1 + τκ)⁻¹.
    pub phi22: DVector<f64>,
    /// OU drift input τ(1 + τκ)⁻¹ 𝔎 μ (applied to the all-ones input).
    pub psi22: DVector<f64>,
    /// Measurement map (C, 0), dense (r_out is small).
    pub h: DMatrix<f64>,
    /// State-noise covariance Q = τ·diag(ZZᵀ, ΣΣᵀ).
    pub q: Cov,
    /// Measurement covariance.
    pub r: DMatrix<f64>,
    /// System-noise amplitude diagonal (length n_x, diagnostic).
    pub z: DVector<f64>,
    pub tau: f64,
    pub theta: f64,
}

impl DiscreteFilterModel {
    /// Assemble a model directly from its discrete-time parts. Intended for
    /// synthetic systems (oracle tests, toy models); network models go
    /// through [`build_filter_model`].
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        a_tau: SpLu,
        e_plus: SpMat,
        phi12: DMatrix<f64>,
        phi22: DVector<f64>,
        psi22: DVector<f64>,
        h: DMatrix<f64>,
        q: Cov,
        r: DMatrix<f64>,
        z: DVector<f64>,
        tau: f64,
        theta: f64,
    ) -> Self {
        let n_x = e_plus.nrows();
        let n_b = phi22.len();
        let r_out = h.nrows();
        DiscreteFilterModel { n_x, n_b, r_out, a_tau, e_plus, phi12, phi22, psi22, h, q, r, z, tau, theta }
    }

    /// Stacked filter-state dimension n_x + n_b.
    pub fn dim(&self) -> usize {
        self.n_x + self.n_b
    }

    /// Φ·z for a stacked state z = (x, u_S).
    pub fn phi_apply(&self, z: &DVector<f64>) -> DVector<f64> {
        let x = z.rows(0, self.n_x).into_owned();
        let u = z.rows(self.n_x, self.n_b).into_owned();
        let mut top = self.a_tau.solve_vec(&self.e_plus.mul_vec(&x));
        top.gemv(1.0, &self.phi12, &u, 1.0);
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.n_x).copy_from(&top);
        for i in 0..self.n_b {
            out[self.n_x + i] = self.phi22[i] * u[i];
        }
        out
    }

    /// Φ·M column-wise (covariance recursion workhorse).
    pub fn phi_apply_mat(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let x = m.rows(0, self.n_x).into_owned();
        let u = m.rows(self.n_x, self.n_b).into_owned();
        let mut top = self.e_plus.mul_dense(&x);
        self.a_tau.solve_mat_in_place(&mut top);
        top.gemm(1.0, &self.phi12, &u, 1.0);
        let mut out = DMatrix::zeros(self.dim(), m.ncols());
        out.rows_mut(0, self.n_x).copy_from(&top);
        for i in 0..self.n_b {
            for j in 0..m.ncols() {
                out[(self.n_x + i, j)] = self.phi22[i] * u[(i, j)];
            }
        }
        out
    }

    /// Ψ·u_k with u_k = (θu_D(t_{k+1}) + (1−θ)u_D(t_k), 1).
    pub fn psi_apply(&self, ud_bar: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim());
        out.rows_mut(0, self.n_x).gemv(1.0, &self.phi12, ud_bar, 0.0);
        out.rows_mut(self.n_x, self.n_b).copy_from(&self.psi22);
        out
    }

    /// Full covariance prediction ΦPΦᵀ + Q, symmetrized. The second
    /// transposition is fused with the symmetrization: for symmetric P,
    /// sym((Φ(ΦP)ᵀ)ᵀ) = sym(Φ(ΦP)ᵀ).
    pub fn predict_cov(&self, p: &DMatrix<f64>) -> DMatrix<f64> {
        let s = self.phi_apply_mat(p).transpose();
        let t = self.phi_apply_mat(&s);
        let n = t.nrows();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = 0.5 * (t[(i, j)] + t[(j, i)]);
                out[(i, j)] = v;
                out[(j, i)] = v;
            }
        }
        self.q.add_to(&mut out);
        out
    }

    /// Dense Φ (small models and diagnostics only).
    pub fn phi_dense(&self) -> DMatrix<f64> {
        self.phi_apply_mat(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// Dense Φ₁₁ (descriptor block).
    pub fn phi11_dense(&self) -> DMatrix<f64> {
        let mut top = self.e_plus.to_dense();
        self.a_tau.solve_mat_in_place(&mut top);
        top
    }
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Z diagonal per the stationary-deviation rule: for every pipe, the maximal
/// deviation of the stationary profile from its per-pipe average, assigned to
/// every dof of that pipe and quantity. Stationary flux is constant along a
/// pipe, so flux rows are zero by construction; multiplier rows stay zero.
fn z_from_stationary(sys: &DescriptorSystem, stat: &StationaryState) -> Result<DVector<f64>> {
    let layout = sys
        .layout
        .as_ref()
        .ok_or_else(|| Error::Missing("system carries no dof layout for the Z rule".into()))?;
    let mut z = DVector::zeros(sys.n());
    for em in &layout.edges {
        let p_av = *stat
            .p_av
            .get(&em.edge_id)
            .ok_or_else(|| Error::Missing(format!("no stationary data for '{}'", em.edge_id)))?;
        let mut dev = 0.0f64;
        for i in 0..em.elements {
            let x = (i as f64 + 0.5) * em.h;
            dev = dev.max((stat.pressure_at(&em.edge_id, x) - p_av).abs());
        }
        for i in 0..em.elements {
            z[em.p_start + i] = dev;
        }
        // flux deviation |q - q_av| = 0 at steady state: rows remain zero
    }
    Ok(z)
}

/// Assemble the discrete filter model from a descriptor system, the OU
/// parameters of its boundary nodes, a Z specification, and the measurement
/// covariance diagonal.
pub fn build_filter_model(
    sys: &DescriptorSystem,
    ou: &BTreeMap<String, OuParams>,
    z_spec: &ZSpec,
    r_diag: &DVector<f64>,
    tau: f64,
    theta: f64,
) -> Result<DiscreteFilterModel> {
    let n_x = sys.n();
    let n_b = sys.n_boundary();
    let r_out = sys.r_out();
    if r_diag.len() != r_out {
        return Err(Error::Dimension(format!(
            "R diagonal has {} entries, system has {} outputs",
            r_diag.len(),
            r_out
        )));
    }
    let a_tau_mat = sys.e.add_scaled(1.0, &sys.a, -tau * theta);
    let a_tau = SpLu::factor(&a_tau_mat)
        .map_err(|e| Error::Singular(format!("A_tau = E - tau*theta*A: {e}")))?;
    let e_plus = sys.e.add_scaled(1.0, &sys.a, tau * (1.0 - theta));
    let phi12 = a_tau.solve_mat(&sys.b.to_dense().scale(tau));

    let mut kappa = DVector::zeros(n_b);
    let mut sigma = DVector::zeros(n_b);
    let mut mu = DVector::zeros(n_b);
    for (i, node) in sys.boundary.iter().enumerate() {
        let p = ou
            .get(node)
            .ok_or_else(|| Error::Missing(format!("no OU parameters for boundary '{node}'")))?;
        kappa[i] = p.kappa;
        sigma[i] = p.sigma;
        mu[i] = p.mu;
    }
    let phi22 = kappa.map(|k| 1.0 / (1.0 + tau * k));
    let psi22 =
        DVector::from_fn(n_b, |i, _| tau * phi22[i] * kappa[i] * mu[i]);

    let z = match z_spec {
        ZSpec::Stationary(stat) => z_from_stationary(sys, stat)?,
        ZSpec::Diagonal(d) => {
            if d.len() != n_x {
                return Err(Error::Dimension("Z diagonal length mismatch".into()));
            }
            for i in sys.blocks.multiplier.clone() {
                if d[i] != 0.0 {
                    return Err(Error::Schema(
                        "Z must vanish on multiplier rows (constraints are not perturbed)".into(),
                    ));
                }
            }
            d.clone()
        }
        ZSpec::Zero => DVector::zeros(n_x),
    };
    let mut q_diag = DVector::zeros(n_x + n_b);
    for i in 0..n_x {
        q_diag[i] = tau * z[i] * z[i];
    }
    for i in 0..n_b {
        q_diag[n_x + i] = tau * sigma[i] * sigma[i];
    }

    let c = sys.c.to_dense();
    let mut h = DMatrix::zeros(r_out, n_x + n_b);
    h.view_mut((0, 0), (r_out, n_x)).copy_from(&c);

    Ok(DiscreteFilterModel {
        n_x,
        n_b,
        r_out,
        a_tau,
        e_plus,
        phi12,
        phi22,
        psi22,
        h,
        q: Cov::Diag(q_diag),
        r: DMatrix::from_diagonal(r_diag),
        z,
        tau,
        theta,
    })
}

/// One Kalman step's worth of state, per Algorithm 1 symbols.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub x_pred: DVector<f64>,
    pub x_corr: DVector<f64>,
    pub p_pred: DMatrix<f64>,
    pub p_corr: DMatrix<f64>,
    pub k_gain: DMatrix<f64>,
    pub step: usize,
}

impl FilterState {
    pub fn init(x0: DVector<f64>, p0: DMatrix<f64>) -> Self {
        let dim = x0.len();
        FilterState {
            x_pred: x0.clone(),
            x_corr: x0,
            p_pred: p0.clone(),
            p_corr: p0,
            k_gain: DMatrix::zeros(dim, 0),
            step: 0,
        }
    }
}

/// Prediction step (Algorithm 1 lines 3-4).
pub fn kf_predict(state: &FilterState, model: &DiscreteFilterModel, u_bar: &DVector<f64>) -> FilterState {
    let x_pred = model.phi_apply(&state.x_corr) + model.psi_apply(u_bar);
    let p_pred = model.predict_cov(&state.p_corr);
    FilterState {
        x_pred,
        x_corr: state.x_corr.clone(),
        p_pred,
        p_corr: state.p_corr.clone(),
        k_gain: state.k_gain.clone(),
        step: state.step,
    }
}

/// Gain from a predicted covariance: K = PHᵀ(HPHᵀ+R)⁻¹ via Cholesky.
fn gain_from_cov(model: &DiscreteFilterModel, p_pred: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let pht = p_pred * model.h.transpose();
    let mut s = &model.h * &pht;
    s += &model.r;
    symmetrize(&mut s);
    let chol = s
        .clone()
        .cholesky()
        .ok_or_else(|| Error::Singular("innovation covariance HPHᵀ+R is not SPD".into()))?;
    // K = PHᵀ S⁻¹  ⇔  SᵀKᵀ = (PHᵀ)ᵀ
    let kt = chol.solve(&pht.transpose());
    Ok(kt.transpose())
}

/// Correction step (Algorithm 1 lines 5-7, short covariance form).
pub fn kf_correct(state: &FilterState, model: &DiscreteFilterModel, y: &DVector<f64>) -> Result<FilterState> {
    let k_gain = gain_from_cov(model, &state.p_pred)?;
    let innovation = y - &model.h * &state.x_pred;
    let x_corr = &state.x_pred + &k_gain * innovation;
    let mut p_corr = &state.p_pred - &k_gain * (&model.h * &state.p_pred);
    symmetrize(&mut p_corr);
    Ok(FilterState {
        x_pred: state.x_pred.clone(),
        x_corr,
        p_pred: state.p_pred.clone(),
        p_corr,
        k_gain,
        step: state.step + 1,
    })
}

/// Offline gain artifact: the data-independent K/P sequences.
pub struct GainSchedule {
    pub gains: Vec<DMatrix<f64>>,
    /// Corrected-covariance diagonals per step (memory guard: full P is only
    /// kept for the final step).
    pub cov_diags: Vec<DVector<f64>>,
    pub final_p: DMatrix<f64>,
    /// Content hash of the gain sequence.
    pub hash: String,
}

/// Run the covariance/gain recursion only; depends on (Φ, H, Q, R, P0) and
/// never on measurement data.
pub fn precompute_gains(
    model: &DiscreteFilterModel,
    p0: &DMatrix<f64>,
    steps: usize,
) -> Result<GainSchedule> {
    let mut p = p0.clone();
    let mut gains = Vec::with_capacity(steps);
    let mut cov_diags = Vec::with_capacity(steps);
    let mut hasher = Sha256::new();
    hasher.update((model.dim() as u64).to_le_bytes());
    hasher.update((steps as u64).to_le_bytes());
    for _ in 0..steps {
        let p_pred = model.predict_cov(&p);
        let k = gain_from_cov(model, &p_pred)?;
        let mut p_corr = &p_pred - &k * (&model.h * &p_pred);
        symmetrize(&mut p_corr);
        for v in k.iter() {
            hasher.update(v.to_le_bytes());
        }
        cov_diags.push(p_corr.diagonal());
        gains.push(k);
        p = p_corr;
    }
    let hash = format!("{:x}", hasher.finalize());
    Ok(GainSchedule { gains, cov_diags, final_p: p, hash })
}

/// Filter output: corrected states (index 0 is the initial state), timing,
/// and provenance.
pub struct EstimateTrajectory {
    pub states: Vec<DVector<f64>>,
    pub cov_diags: Option<Vec<DVector<f64>>>,
    /// Final-step sample covariance of the corrected ensemble (EnKF only).
    pub final_cov: Option<DMatrix<f64>>,
    pub provenance: GainProvenance,
    pub model: ModelTag,
    pub timing: Timing,
}

fn check_series(
    model: &DiscreteFilterModel,
    u_d: &DMatrix<f64>,
    ys: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<usize> {
    let steps = ys.len();
    if u_d.nrows() != model.n_b || u_d.ncols() < steps + 1 {
        return Err(Error::Dimension(format!(
            "u_D series is {}x{}, need {}x{}",
            u_d.nrows(),
            u_d.ncols(),
            model.n_b,
            steps + 1
        )));
    }
    if x0.len() != model.dim() {
        return Err(Error::Dimension("x0 does not match the stacked filter state".into()));
    }
    if let Some(y) = ys.first() {
        if y.len() != model.r_out {
            return Err(Error::Dimension("measurement dimension mismatch".into()));
        }
    }
    Ok(steps)
}

fn ud_bar(model: &DiscreteFilterModel, u_d: &DMatrix<f64>, k: usize) -> DVector<f64> {
    let th = model.theta;
    DVector::from_fn(model.n_b, |i, _| {
        th * u_d[(i, k + 1)] + (1.0 - th) * u_d[(i, k)]
    })
}

/// Classical Kalman filter (Algorithm 1). With a precomputed gain schedule
/// the online loop touches no covariance at all; without one it computes the
/// full recursion in-line (streaming).
pub fn run_kf(
    model: &DiscreteFilterModel,
    u_d: &DMatrix<f64>,
    ys: &[DVector<f64>],
    x0: &DVector<f64>,
    p0: Option<&DMatrix<f64>>,
    gains: Option<&GainSchedule>,
) -> Result<EstimateTrajectory> {
    let steps = check_series(model, u_d, ys, x0)?;
    let p0 = match p0 {
        Some(p) => p.clone(),
        None => model.q.to_dense(),
    };
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let start = Instant::now();
    let mut x = x0.clone();
    let mut cov_diags = Vec::with_capacity(steps);
    match gains {
        Some(sched) => {
            if sched.gains.len() < steps {
                return Err(Error::Dimension("gain schedule shorter than the run".into()));
            }
            for k in 0..steps {
                let x_pred = model.phi_apply(&x) + model.psi_apply(&ud_bar(model, u_d, k));
                let innovation = &ys[k] - &model.h * &x_pred;
                x = &x_pred + &sched.gains[k] * innovation;
                states.push(x.clone());
            }
        }
        None => {
            let mut p = p0;
            for k in 0..steps {
                let x_pred = model.phi_apply(&x) + model.psi_apply(&ud_bar(model, u_d, k));
                let p_pred = model.predict_cov(&p);
                let k_gain = gain_from_cov(model, &p_pred)?;
                let innovation = &ys[k] - &model.h * &x_pred;
                x = &x_pred + &k_gain * innovation;
                let mut p_corr = &p_pred - &k_gain * (&model.h * &p_pred);
                symmetrize(&mut p_corr);
                cov_diags.push(p_corr.diagonal());
                p = p_corr;
            }
        }
    }
    let online_s = start.elapsed().as_secs_f64();
    Ok(EstimateTrajectory {
        states,
        cov_diags: if cov_diags.is_empty() { None } else { Some(cov_diags) },
        final_cov: None,
        provenance: if gains.is_some() {
            GainProvenance::Precomputed
        } else {
            GainProvenance::Streaming
        },
        model: ModelTag::Full,
        timing: Timing { offline_s: 0.0, online_s, postproc_s: 0.0 },
    })
}

/// Reduced filter model: Φ̂ rebuilt from the reduced descriptor matrices
/// (reduction *before* time discretization), OU blocks unchanged,
/// Ĥ = H·V_x, Q̂ = V_xᵀQV_x.
pub fn reduce_filter_model(
    full: &DiscreteFilterModel,
    red_sys: &DescriptorSystem,
    aug: &AugmentedBasis,
) -> Result<DiscreteFilterModel> {
    if aug.n_state != red_sys.n() || aug.n_boundary != full.n_b {
        return Err(Error::Dimension("augmented basis does not match the reduced system".into()));
    }
    let tau = full.tau;
    let theta = full.theta;
    let a_tau_mat = red_sys.e.add_scaled(1.0, &red_sys.a, -tau * theta);
    let a_tau = SpLu::factor(&a_tau_mat)
        .map_err(|e| Error::Singular(format!("reduced A_tau: {e}")))?;
    let e_plus = red_sys.e.add_scaled(1.0, &red_sys.a, tau * (1.0 - theta));
    let phi12 = a_tau.solve_mat(&red_sys.b.to_dense().scale(tau));
    let q = Cov::Dense(full.q.project(&aug.v_x));
    let h = &full.h * &aug.v_x;
    Ok(DiscreteFilterModel {
        n_x: red_sys.n(),
        n_b: full.n_b,
        r_out: full.r_out,
        a_tau,
        e_plus,
        phi12,
        phi22: full.phi22.clone(),
        psi22: full.psi22.clone(),
        h,
        q,
        r: full.r.clone(),
        z: DVector::zeros(red_sys.n()),
        tau,
        theta,
    })
}

/// Kalman filter on the reduced model. Returns the reduced-coordinate
/// estimate and the augmented basis for later prolongation; offline time
/// covers system reduction, model assembly, and gain precomputation.
pub fn run_rkf(
    sys: &DescriptorSystem,
    full_model: &DiscreteFilterModel,
    basis: &ProjectionBasis,
    u_d: &DMatrix<f64>,
    ys: &[DVector<f64>],
    x0_full: &DVector<f64>,
) -> Result<(EstimateTrajectory, AugmentedBasis)> {
    let offline = Instant::now();
    let aug = augment_basis(basis, full_model.n_b);
    let red_sys = reduce_system(sys, basis)?;
    let model = reduce_filter_model(full_model, &red_sys, &aug)?;
    let x0_hat = aug.v_x.tr_mul(x0_full);
    let p0 = model.q.to_dense();
    let sched = precompute_gains(&model, &p0, ys.len())?;
    let offline_s = offline.elapsed().as_secs_f64();
    let mut est = run_kf(&model, u_d, ys, &x0_hat, Some(&p0), Some(&sched))?;
    est.model = ModelTag::Reduced;
    est.timing.offline_s = offline_s;
    est.cov_diags = Some(sched.cov_diags);
    Ok((est, aug))
}

/// Prolong a reduced estimate to full coordinates, x = V_x x̂ per step.
/// Timed as post-processing, per the paper's protocol.
pub fn prolong_estimate(est: &EstimateTrajectory, aug: &AugmentedBasis) -> Result<EstimateTrajectory> {
    let start = Instant::now();
    let dim = aug.v_x.ncols();
    if est.states.first().map(|s| s.len()) != Some(dim) {
        return Err(Error::Dimension("estimate does not match the basis column count".into()));
    }
    let states = est.states.iter().map(|s| &aug.v_x * s).collect();
    let postproc_s = start.elapsed().as_secs_f64();
    Ok(EstimateTrajectory {
        states,
        cov_diags: None,
        final_cov: None,
        provenance: est.provenance,
        model: ModelTag::Full,
        timing: Timing { postproc_s, ..est.timing },
    })
}

/// Compressed State Kalman Filter: covariance recursion with the projected
/// discrete matrices Φ̃ = V_PᵀΦV_P (reduction *after* time discretization),
/// state recursion in full coordinates with K = V_P K̃.
pub fn run_cskf(
    full_model: &DiscreteFilterModel,
    aug: &AugmentedBasis,
    u_d: &DMatrix<f64>,
    ys: &[DVector<f64>],
    x0: &DVector<f64>,
) -> Result<EstimateTrajectory> {
    let steps = check_series(full_model, u_d, ys, x0)?;
    let offline = Instant::now();
    let v = &aug.v_x;
    let phi_v = full_model.phi_apply_mat(v);
    let phi_t = v.tr_mul(&phi_v);
    let h_t = &full_model.h * v;
    let q_t = full_model.q.project(v);
    // reduced-coordinate gain recursion
    let nred = v.ncols();
    let mut p = q_t.clone();
    let mut gains = Vec::with_capacity(steps);
    for _ in 0..steps {
        let mut p_pred = &phi_t * &p * phi_t.transpose() + &q_t;
        symmetrize(&mut p_pred);
        let pht = &p_pred * h_t.transpose();
        let mut s = &h_t * &pht;
        s += &full_model.r;
        symmetrize(&mut s);
        let chol = s
            .cholesky()
            .ok_or_else(|| Error::Singular("CSKF innovation covariance is not SPD".into()))?;
        let k_t = chol.solve(&pht.transpose()).transpose();
        let mut p_corr = &p_pred - &k_t * (&h_t * &p_pred);
        symmetrize(&mut p_corr);
        gains.push(k_t);
        p = p_corr;
    }
    let offline_s = offline.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let mut x = x0.clone();
    for k in 0..steps {
        let x_pred = full_model.phi_apply(&x) + full_model.psi_apply(&ud_bar(full_model, u_d, k));
        let innovation = &ys[k] - &full_model.h * &x_pred;
        x = &x_pred + v * (&gains[k] * innovation);
        states.push(x.clone());
    }
    let online_s = start.elapsed().as_secs_f64();
    let _ = nred;
    Ok(EstimateTrajectory {
        states,
        cov_diags: None,
        final_cov: None,
        provenance: GainProvenance::Precomputed,
        model: ModelTag::Full,
        timing: Timing { offline_s, online_s, postproc_s: 0.0 },
    })
}

/// Frobenius distance between the RKF and CSKF descriptor transition blocks,
/// ‖Φ̂₁₁ − Φ̃₁₁‖_F (they differ for implicit time discretizations).
pub fn transition_discrepancy(
    full_model: &DiscreteFilterModel,
    red_model: &DiscreteFilterModel,
    basis: &ProjectionBasis,
) -> f64 {
    let phi_hat = red_model.phi11_dense();
    // Φ̃₁₁ = Vᵀ A_τ⁻¹ (E + τ(1−θ)A) V on the descriptor block
    let mut phi_v = full_model.e_plus.mul_dense(&basis.v);
    full_model.a_tau.solve_mat_in_place(&mut phi_v);
    let phi_tilde = basis.v.tr_mul(&phi_v);
    (phi_hat - phi_tilde).norm()
}

/// Sampler for N(0, Q) draws that exploits a sparse diagonal (only nonzero
/// rows get random values, one draw per nonzero, in row order).
struct NoiseSampler {
    diag_sqrt: Option<Vec<(usize, f64)>>,
    dense_sqrt: Option<DMatrix<f64>>,
    dim: usize,
}

impl NoiseSampler {
    fn new(q: &Cov) -> Self {
        match q {
            Cov::Diag(d) => NoiseSampler {
                diag_sqrt: Some(
                    d.iter()
                        .enumerate()
                        .filter(|(_, &v)| v > 0.0)
                        .map(|(i, &v)| (i, v.sqrt()))
                        .collect(),
                ),
                dense_sqrt: None,
                dim: d.len(),
            },
            Cov::Dense(_) => NoiseSampler {
                diag_sqrt: None,
                dense_sqrt: Some(q.sqrt_factor()),
                dim: q.dim(),
            },
        }
    }

    fn add_draw(&self, rng: &mut rand_chacha::ChaCha12Rng, target: &mut DVector<f64>) {
        if let Some(pairs) = &self.diag_sqrt {
            for &(i, s) in pairs {
                target[i] += s * rng.sample::<f64, _>(StandardNormal);
            }
        } else if let Some(l) = &self.dense_sqrt {
            let draw = DVector::from_fn(self.dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            *target += l * draw;
        }
    }
}

/// Perturbed-observation Ensemble Kalman Filter. Noise sampling time is
/// accounted as offline, per the paper's protocol; the ensemble mean is the
/// estimate. Member/step RNG streams are keyed (seed, member, step) so
/// results are independent of scheduling.
pub fn run_enkf(
    model: &DiscreteFilterModel,
    members: usize,
    u_d: &DMatrix<f64>,
    ys: &[DVector<f64>],
    x0: &DVector<f64>,
    seed: u64,
) -> Result<EstimateTrajectory> {
    if members < 2 {
        return Err(Error::Degenerate("EnKF needs at least two ensemble members".into()));
    }
    let steps = check_series(model, u_d, ys, x0)?;
    let dim = model.dim();
    let sampler = NoiseSampler::new(&model.q);
    let r_sqrt = Cov::Dense(model.r.clone()).sqrt_factor();
    let mut offline_s = 0.0;

    // ensemble matrix, one member per column, initialized from N(x0, Q)
    let t_sample = Instant::now();
    let mut ens = DMatrix::zeros(dim, members);
    for j in 0..members {
        let mut col = x0.clone();
        let mut rng = crate::rng::stream(seed, "enkf-init", &j.to_string());
        sampler.add_draw(&mut rng, &mut col);
        ens.column_mut(j).copy_from(&col);
    }
    offline_s += t_sample.elapsed().as_secs_f64();

    let start = Instant::now();
    let mut inloop_sample_s = 0.0;
    let mut states = Vec::with_capacity(steps + 1);
    states.push(x0.clone());
    let inv_m1 = 1.0 / (members as f64 - 1.0);
    let mut scratch = DVector::zeros(dim);
    for k in 0..steps {
        // predict every member, with independent state noise
        let psi = model.psi_apply(&ud_bar(model, u_d, k));
        let mut pred = model.phi_apply_mat(&ens);
        let t_sample = Instant::now();
        for j in 0..members {
            scratch.fill(0.0);
            let mut rng = crate::rng::stream(seed, "enkf", &format!("{j}:{k}"));
            sampler.add_draw(&mut rng, &mut scratch);
            let mut col = pred.column_mut(j);
            col += &psi;
            col += &scratch;
        }
        inloop_sample_s += t_sample.elapsed().as_secs_f64();
        // sample cross-covariances (observation-space form)
        let mean = pred.column_mean();
        let mut anom = pred.clone();
        for j in 0..members {
            let mut col = anom.column_mut(j);
            col -= &mean;
        }
        let y_anom = &model.h * &anom;
        let c_xy = (&anom * y_anom.transpose()).scale(inv_m1);
        let mut c_yy = (&y_anom * y_anom.transpose()).scale(inv_m1);
        c_yy += &model.r;
        symmetrize(&mut c_yy);
        let chol = c_yy
            .cholesky()
            .ok_or_else(|| Error::Singular("EnKF innovation covariance is not SPD".into()))?;
        let k_gain = chol.solve(&c_xy.transpose()).transpose();
        // correct each member with its own perturbed observation
        for j in 0..members {
            let t_sample = Instant::now();
            let mut rng = crate::rng::stream(seed, "enkf-obs", &format!("{j}:{k}"));
            let v_draw =
                DVector::from_fn(model.r_out, |_, _| rng.sample::<f64, _>(StandardNormal));
            inloop_sample_s += t_sample.elapsed().as_secs_f64();
            let y_j = &ys[k] + &r_sqrt * v_draw;
            let innovation = y_j - &model.h * pred.column(j);
            let corrected = pred.column(j) + &k_gain * innovation;
            ens.column_mut(j).copy_from(&corrected);
        }
        states.push(ens.column_mean());
    }
    offline_s += inloop_sample_s;
    let online_s = (start.elapsed().as_secs_f64() - inloop_sample_s).max(0.0);
    // sample covariance of the final corrected ensemble, for diagnostics
    let mean = ens.column_mean();
    let mut anom = ens;
    for j in 0..members {
        let mut col = anom.column_mut(j);
        col -= &mean;
    }
    let final_cov = (&anom * anom.transpose()).scale(inv_m1);
    Ok(EstimateTrajectory {
        states,
        cov_diags: None,
        final_cov: Some(final_cov),
        provenance: GainProvenance::Ensemble,
        model: if matches!(model.q, Cov::Dense(_)) { ModelTag::Reduced } else { ModelTag::Full },
        timing: Timing { offline_s, online_s, postproc_s: 0.0 },
    })
}
