//! Benchmark orchestration: scenario files, truth simulation, measurement
//! synthesis, filter runs, error metrics, and report emission.
//!
//! A scenario file is the single source of truth for a run. The pipeline per
//! realization: stationary solve and friction linearization, nonlinear truth
//! simulation, measurement synthesis, then every requested filter on the
//! same measurements. The error metric averages over realizations before
//! taking norms, and timings follow the offline/online protocol of
//! [`crate::filters`].

use crate::discretization::{
    assemble_linear, assemble_output, linearize_friction, stationary_solve, DescriptorSystem,
    MeshSpec,
};
use crate::error::{Error, Result};
use crate::filters::{
    build_filter_model, precompute_gains, prolong_estimate, reduce_filter_model, run_cskf,
    run_enkf, run_kf, run_rkf, DiscreteFilterModel, EstimateTrajectory, GainSchedule, Timing,
    ZSpec,
};
use crate::mor::{augment_basis, build_basis, reduce_system, MorConfig, ProjectionBasis};
use crate::network::PipeNetwork;
use crate::simulation::{
    simulate_linear_from, simulate_nonlinear, synthesize_measurements, BoundarySignal, Trajectory,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Time grid of a scenario: horizon T, step count K, θ-scheme parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    #[serde(rename = "T")]
    pub t_final: f64,
    pub steps: usize,
    pub theta: f64,
}

impl TimeGrid {
    pub fn tau(&self) -> f64 {
        self.t_final / self.steps as f64
    }
}

/// Mesh specification as written in scenario files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshConfig {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub elements_per_pipe: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub max_element_length: Option<f64>,
}

impl MeshConfig {
    pub fn to_spec(&self) -> Result<MeshSpec> {
        match (self.elements_per_pipe, self.max_element_length) {
            (Some(m), None) => Ok(MeshSpec::ElementsPerPipe(m)),
            (None, Some(h)) => Ok(MeshSpec::MaxElementLength(h)),
            _ => Err(Error::Schema(
                "mesh needs exactly one of elements_per_pipe, max_element_length".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementConfig {
    /// Boundary nodes whose total mass flux is measured.
    pub nodes: Vec<String>,
    /// Noise standard deviation as a fraction of each channel's max |value|.
    pub noise_percent: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Kf,
    Rkf,
    Cskf,
    Enkf,
    Renkf,
}

impl FilterKind {
    pub fn name(&self) -> &'static str {
        match self {
            FilterKind::Kf => "kf",
            FilterKind::Rkf => "rkf",
            FilterKind::Cskf => "cskf",
            FilterKind::Enkf => "enkf",
            FilterKind::Renkf => "renkf",
        }
    }

    pub fn needs_basis(&self) -> bool {
        matches!(self, FilterKind::Rkf | FilterKind::Cskf | FilterKind::Renkf)
    }
}

/// Spatial norm used by the error metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Mass-weighted discrete L² over pressure/flux dofs (default).
    #[default]
    Mass,
    /// Plain Euclidean norm over pressure/flux dofs.
    Euclidean,
}

/// A complete benchmark configuration; the network itself is supplied
/// separately (file path on the CLI, or an in-memory network in tests).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub time: TimeGrid,
    pub mesh: MeshConfig,
    pub signals: Vec<BoundarySignal>,
    pub measurement: MeasurementConfig,
    /// Boundary pressures at which the friction term is linearized;
    /// defaults to the initial deterministic boundary values u_D(0).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub linearization: Option<BTreeMap<String, f64>>,
    /// Basis construction for the reduced-model filters.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mor: Option<MorConfig>,
    pub filters: Vec<FilterKind>,
    /// EnKF/REnKF ensemble size.
    #[serde(rename = "M", default = "default_ensemble")]
    pub ensemble_size: usize,
    /// Monte-Carlo realizations approximating the expectation in the metric.
    #[serde(rename = "M_mc", default = "default_realizations")]
    pub realizations: usize,
    pub seed: u64,
    #[serde(default)]
    pub norm: NormKind,
}

fn default_ensemble() -> usize {
    100
}

fn default_realizations() -> usize {
    5
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario> {
        let sc: Scenario = serde_json::from_str(text)?;
        sc.validate()?;
        Ok(sc)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.time.steps == 0 || self.time.t_final <= 0.0 {
            return Err(Error::Schema("time grid needs T > 0 and steps > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.time.theta) {
            return Err(Error::Schema("theta must lie in [0, 1]".into()));
        }
        self.mesh.to_spec()?;
        if self.measurement.nodes.is_empty() {
            return Err(Error::Schema("measurement.nodes must not be empty".into()));
        }
        if self.filters.is_empty() {
            return Err(Error::Schema("scenario requests no filters".into()));
        }
        if self.filters.iter().any(FilterKind::needs_basis) && self.mor.is_none() {
            return Err(Error::Schema(
                "rkf/cskf/renkf requested but no mor config present".into(),
            ));
        }
        if self.realizations == 0 {
            return Err(Error::Schema("M_mc must be at least 1".into()));
        }
        Ok(())
    }

    /// Deterministic boundary pressures at t = 0, keyed by node.
    pub fn initial_boundary_pressures(&self) -> BTreeMap<String, f64> {
        self.signals.iter().map(|s| (s.node.clone(), s.u_d_at(0.0))).collect()
    }

    /// Boundary pressures to linearize the friction term at.
    pub fn linearization_pressures(&self) -> BTreeMap<String, f64> {
        match &self.linearization {
            Some(m) => m.clone(),
            None => self.initial_boundary_pressures(),
        }
    }
}

/// One row of the Table 1 analogue.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterRow {
    pub filter: FilterKind,
    pub error: f64,
    pub offline_s: f64,
    pub online_s: f64,
    pub postproc_s: f64,
    /// The estimate needed prolongation back to full coordinates.
    pub prolongation: bool,
    /// The offline time is noise sampling rather than gain precomputation.
    pub offline_is_sampling: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub n: usize,
    pub error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub threads: usize,
    pub build: String,
}

impl Default for EnvMeta {
    fn default() -> Self {
        EnvMeta {
            threads: std::env::var("GRIDKAL_THREADS")
                .ok()
                .and_then(|v| v.parse().ok())
                .unwrap_or(1),
            build: format!("gridkal {}", env!("CARGO_PKG_VERSION")),
        }
    }
}

/// Full benchmark result: per-filter rows, reduction-error curve,
/// environment metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema_version: u32,
    pub seed: u64,
    pub realizations: usize,
    pub rows: Vec<FilterRow>,
    #[serde(default)]
    pub mor_curve: Vec<CurvePoint>,
    pub environment: EnvMeta,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl Report {
    /// Copy with all wall-clock fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Report {
        let mut r = self.clone();
        for row in &mut r.rows {
            row.offline_s = 0.0;
            row.online_s = 0.0;
            row.postproc_s = 0.0;
        }
        r
    }
}

/// Temporal mean over k = 1..K of ‖𝔼[x_k − x̂_k]‖ / ‖𝔼[x_k]‖, expectations
/// approximated by averaging the realizations, spatial norm over
/// pressure/flux dofs only (multipliers and the u_S block are excluded).
/// Estimate states may carry extra trailing entries (the u_S block).
pub fn error_metric(
    sys: &DescriptorSystem,
    estimates: &[Vec<DVector<f64>>],
    truths: &[Trajectory],
    norm: NormKind,
) -> Result<f64> {
    if estimates.len() != truths.len() || estimates.is_empty() {
        return Err(Error::Dimension("need equal, nonzero realization counts".into()));
    }
    let n = sys.n();
    let steps = truths[0].steps();
    for (est, tr) in estimates.iter().zip(truths) {
        if tr.steps() != steps || est.len() != steps + 1 {
            return Err(Error::Dimension("realization length mismatch".into()));
        }
    }
    let m = estimates.len() as f64;
    let snorm = |x: &DVector<f64>| match norm {
        NormKind::Mass => sys.state_norm(x),
        NormKind::Euclidean => sys.state_norm_euclidean(x),
    };
    let mut acc = 0.0;
    for k in 1..=steps {
        let mut mean_x = DVector::zeros(n);
        let mut mean_diff = DVector::zeros(n);
        for (est, tr) in estimates.iter().zip(truths) {
            let x = &tr.states[k];
            mean_x += x;
            mean_diff += x - est[k].rows(0, n);
        }
        mean_x /= m;
        mean_diff /= m;
        let denom = snorm(&mean_x);
        if denom == 0.0 {
            return Err(Error::Degenerate(format!(
                "averaged reference vanishes at step {k}"
            )));
        }
        acc += snorm(&mean_diff) / denom;
    }
    Ok(acc / steps as f64)
}

/// Everything assembled once per scenario, before any realization runs.
pub struct ScenarioSetup {
    pub sys: DescriptorSystem,
    pub model: DiscreteFilterModel,
    pub u_d: DMatrix<f64>,
    pub x0: DVector<f64>,
    pub p0: DMatrix<f64>,
    pub basis: Option<ProjectionBasis>,
    pub basis_s: f64,
    pub warnings: Vec<String>,
}

/// Build the shared per-scenario artifacts (linearized system, discrete
/// filter model, boundary inputs, initial state and covariance, and the
/// projection basis when any reduced filter is requested). Exposed so
/// callers can run individual filters against the same offline artifacts.
pub fn prepare(net: &PipeNetwork, sc: &Scenario) -> Result<ScenarioSetup> {
    sc.validate()?;
    let mesh = sc.mesh.to_spec()?;
    let tau = sc.time.tau();
    let mut warnings = Vec::new();

    // initial state: stationary at u_D(0); linearization possibly elsewhere
    let stat0 = stationary_solve(net, &sc.initial_boundary_pressures(), 1e-12)?;
    let stat_lin = stationary_solve(net, &sc.linearization_pressures(), 1e-12)?;
    let lin_net = linearize_friction(net, &stat_lin)?;
    let mut sys = assemble_linear(&lin_net, &mesh)?;
    assemble_output(net, &mut sys, &sc.measurement.nodes)?;

    // R comes from the noise scale of realization 0; all realizations share
    // the same filter model so gains stay data-independent
    let truth0 = simulate_nonlinear(net, &mesh, &sc.signals, &stat0, tau, sc.time.theta, sc.time.steps, sc.seed)?;
    let ms0 = synthesize_measurements(&truth0, &sys, sc.measurement.noise_percent, sc.seed)?;
    warnings.extend(ms0.warnings.iter().cloned());

    let ou: BTreeMap<String, crate::simulation::OuParams> =
        sc.signals.iter().map(|s| (s.node.clone(), s.ou)).collect();
    let model = build_filter_model(
        &sys,
        &ou,
        &ZSpec::Stationary(&stat_lin),
        &ms0.r_diag,
        tau,
        sc.time.theta,
    )?;

    let mut u_d = DMatrix::zeros(model.n_b, sc.time.steps + 1);
    for (row, node) in sys.boundary.iter().enumerate() {
        let sig = sc
            .signals
            .iter()
            .find(|s| &s.node == node)
            .ok_or_else(|| Error::Missing(format!("no signal for boundary '{node}'")))?;
        for k in 0..=sc.time.steps {
            u_d[(row, k)] = sig.u_d_at(tau * k as f64);
        }
    }

    // filter initial state: stationary descriptor state, OU block at its mean
    let mut x0 = DVector::zeros(model.dim());
    x0.rows_mut(0, model.n_x).copy_from(&stat0.state_vector(&sys)?);
    for (i, node) in sys.boundary.iter().enumerate() {
        x0[model.n_x + i] = ou[node].mu;
    }
    let p0 = model.q.to_dense();

    let mut basis = None;
    let mut basis_s = 0.0;
    if sc.filters.iter().any(FilterKind::needs_basis) {
        let cfg = sc.mor.as_ref().expect("validated");
        let t = Instant::now();
        let x0_state = x0.rows(0, model.n_x).into_owned();
        // POD needs snapshots: a deterministic (σ = 0) run of the scenario
        let snapshots = if matches!(cfg.method, crate::mor::BasisMethod::Pod) {
            let mut quiet = sc.signals.clone();
            for s in &mut quiet {
                s.ou.sigma = 0.0;
            }
            Some(simulate_linear_from(&sys, &quiet, x0_state.clone(), tau, sc.time.theta, sc.time.steps, 0)?)
        } else {
            None
        };
        basis = Some(build_basis(&sys, cfg, snapshots.as_ref(), std::slice::from_ref(&x0_state))?);
        basis_s = t.elapsed().as_secs_f64();
    }

    Ok(ScenarioSetup { sys, model, u_d, x0, p0, basis, basis_s, warnings })
}

/// Per-realization seed derivation: realization r of master seed s runs the
/// truth and measurement streams under s + r.
fn realization_seed(master: u64, r: usize) -> u64 {
    master.wrapping_add(r as u64)
}

/// Run a full benchmark scenario: truth simulation, measurement synthesis,
/// and every requested filter per realization, then the averaged error
/// metric per filter. Timings are taken from realization 0 (the covariance
/// and gain work is data-independent).
pub fn run_scenario(net: &PipeNetwork, sc: &Scenario) -> Result<Report> {
    let setup = prepare(net, sc)?;
    let ScenarioSetup { sys, model, u_d, x0, p0, basis, basis_s, mut warnings } = setup;
    let mesh = sc.mesh.to_spec()?;
    let tau = sc.time.tau();
    let stat0 = stationary_solve(net, &sc.initial_boundary_pressures(), 1e-12)?;

    // shared offline artifacts
    let mut kf_sched: Option<GainSchedule> = None;
    let mut kf_offline = 0.0;
    if sc.filters.contains(&FilterKind::Kf) {
        let t = Instant::now();
        kf_sched = Some(precompute_gains(&model, &p0, sc.time.steps)?);
        kf_offline = t.elapsed().as_secs_f64();
    }
    let mut reduced: Option<(crate::mor::AugmentedBasis, DiscreteFilterModel, f64)> = None;
    if sc.filters.contains(&FilterKind::Renkf) {
        let b = basis.as_ref().expect("validated");
        let t = Instant::now();
        let aug = augment_basis(b, model.n_b);
        let red_sys = reduce_system(&sys, b)?;
        let red_model = reduce_filter_model(&model, &red_sys, &aug)?;
        reduced = Some((aug, red_model, t.elapsed().as_secs_f64()));
    }

    let mut truths: Vec<Trajectory> = Vec::with_capacity(sc.realizations);
    let mut estimates: BTreeMap<FilterKind, Vec<Vec<DVector<f64>>>> = BTreeMap::new();
    let mut timings: BTreeMap<FilterKind, Timing> = BTreeMap::new();

    for r in 0..sc.realizations {
        let seed_r = realization_seed(sc.seed, r);
        let truth =
            simulate_nonlinear(net, &mesh, &sc.signals, &stat0, tau, sc.time.theta, sc.time.steps, seed_r)?;
        let ms = synthesize_measurements(&truth, &sys, sc.measurement.noise_percent, seed_r)?;
        if r > 0 {
            warnings.extend(ms.warnings.iter().cloned());
        }
        for &f in &sc.filters {
            let est: EstimateTrajectory = match f {
                FilterKind::Kf => {
                    let mut e = run_kf(&model, &u_d, &ms.y, &x0, Some(&p0), kf_sched.as_ref())?;
                    e.timing.offline_s = kf_offline;
                    e
                }
                FilterKind::Rkf => {
                    let b = basis.as_ref().expect("validated");
                    let (red_est, aug) = run_rkf(&sys, &model, b, &u_d, &ms.y, &x0)?;
                    let mut full = prolong_estimate(&red_est, &aug)?;
                    full.timing.offline_s += basis_s;
                    full
                }
                FilterKind::Cskf => {
                    let b = basis.as_ref().expect("validated");
                    let aug = augment_basis(b, model.n_b);
                    let mut e = run_cskf(&model, &aug, &u_d, &ms.y, &x0)?;
                    e.timing.offline_s += basis_s;
                    e
                }
                FilterKind::Enkf => {
                    run_enkf(&model, sc.ensemble_size, &u_d, &ms.y, &x0, seed_r)?
                }
                FilterKind::Renkf => {
                    let (aug, red_model, reduce_s) = reduced.as_ref().expect("prepared");
                    let x0_hat = aug.v_x.tr_mul(&x0);
                    let red_est =
                        run_enkf(red_model, sc.ensemble_size, &u_d, &ms.y, &x0_hat, seed_r)?;
                    let mut full = prolong_estimate(&red_est, aug)?;
                    full.timing.offline_s += basis_s + reduce_s;
                    full
                }
            };
            if r == 0 {
                timings.insert(f, est.timing);
            }
            estimates.entry(f).or_default().push(est.states);
        }
        truths.push(truth);
    }

    let mut rows = Vec::with_capacity(sc.filters.len());
    for &f in &sc.filters {
        let error = error_metric(&sys, &estimates[&f], &truths, sc.norm)?;
        let t = timings[&f];
        rows.push(FilterRow {
            filter: f,
            error,
            offline_s: t.offline_s,
            online_s: t.online_s,
            postproc_s: t.postproc_s,
            prolongation: matches!(f, FilterKind::Rkf | FilterKind::Renkf),
            offline_is_sampling: matches!(f, FilterKind::Enkf | FilterKind::Renkf),
        });
    }
    warnings.sort();
    warnings.dedup();
    Ok(Report {
        schema_version: REPORT_SCHEMA_VERSION,
        seed: sc.seed,
        realizations: sc.realizations,
        rows,
        mor_curve: Vec::new(),
        environment: EnvMeta::default(),
        warnings,
    })
}

/// Reduction-error curve over a list of orders (Fig. 3 analogue): the
/// deterministic scenario (σ := 0) is simulated once on the full linear
/// model, and every order reuses that reference.
pub fn reduction_sweep(net: &PipeNetwork, sc: &Scenario, orders: &[usize]) -> Result<Vec<CurvePoint>> {
    if orders.is_empty() {
        return Ok(Vec::new());
    }
    let mesh = sc.mesh.to_spec()?;
    let tau = sc.time.tau();
    let mut signals = sc.signals.clone();
    for s in &mut signals {
        s.ou.sigma = 0.0;
    }
    let stat0 = stationary_solve(net, &sc.initial_boundary_pressures(), 1e-12)?;
    let stat_lin = stationary_solve(net, &sc.linearization_pressures(), 1e-12)?;
    let lin_net = linearize_friction(net, &stat_lin)?;
    let sys = assemble_linear(&lin_net, &mesh)?;
    let x0 = stat0.state_vector(&sys)?;
    let full = simulate_linear_from(&sys, &signals, x0.clone(), tau, sc.time.theta, sc.time.steps, 0)?;

    let base_cfg = sc
        .mor
        .clone()
        .ok_or_else(|| Error::Schema("reduction sweep needs a mor config".into()))?;
    let mut curve = Vec::with_capacity(orders.len());
    for &n in orders {
        let basis = if n >= sys.n() {
            crate::mor::identity_basis(&sys)
        } else {
            let cfg = MorConfig { order: Some(n), ..base_cfg.clone() };
            build_basis(&sys, &cfg, Some(&full), std::slice::from_ref(&x0))?
        };
        let red = reduce_system(&sys, &basis)?;
        let x0_hat = basis.v.tr_mul(&x0);
        let red_traj =
            crate::mor::simulate_reduced(&red, &signals, x0_hat, tau, sc.time.theta, sc.time.steps, 0)?;
        let mut worst = 0.0f64;
        for (x, xh) in full.states.iter().zip(&red_traj.states) {
            let denom = sys.state_norm(x);
            if denom == 0.0 {
                continue;
            }
            let diff = x - &basis.v * xh;
            worst = worst.max(sys.state_norm(&diff) / denom);
        }
        curve.push(CurvePoint { n: basis.n(), error: worst });
    }
    Ok(curve)
}

/// Write `report.json`, `errors.csv`, and `mor_curve.csv` into `out`;
/// returns the paths written.
pub fn emit_report(rep: &Report, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();

    let json_path = out.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(rep)?)?;
    written.push(json_path);

    let csv_path = out.join("errors.csv");
    let mut csv = String::from("filter,error,offline_s,online_s,postproc_s\n");
    for row in &rep.rows {
        csv.push_str(&format!(
            "{},{},{},{},{}\n",
            row.filter.name(),
            row.error,
            row.offline_s,
            row.online_s,
            row.postproc_s
        ));
    }
    std::fs::write(&csv_path, csv)?;
    written.push(csv_path);

    let curve_path = out.join("mor_curve.csv");
    let mut curve = String::from("n,error\n");
    for p in &rep.mor_curve {
        curve.push_str(&format!("{},{}\n", p.n, p.error));
    }
    std::fs::write(&curve_path, curve)?;
    written.push(curve_path);

    Ok(written)
}

/// Write a state trajectory as CSV with header `t,dof_0,...`.
pub fn emit_trajectory(path: &Path, times: &[f64], states: &[DVector<f64>]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let n = states.first().map(|s| s.len()).unwrap_or(0);
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write!(w, "t")?;
    for i in 0..n {
        write!(w, ",dof_{i}")?;
    }
    writeln!(w)?;
    for (t, x) in times.iter().zip(states) {
        write!(w, "{t}")?;
        for v in x.iter() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Run one filter on a single realization and return its report row plus
/// the full-coordinate estimate trajectory (prolonged where applicable).
pub fn run_estimate(
    net: &PipeNetwork,
    sc: &Scenario,
    filter: FilterKind,
) -> Result<(FilterRow, Vec<f64>, Vec<DVector<f64>>)> {
    let mut sc_one = sc.clone();
    sc_one.filters = vec![filter];
    sc_one.realizations = 1;
    let setup = prepare(net, &sc_one)?;
    let ScenarioSetup { sys, model, u_d, x0, p0, basis, basis_s, .. } = setup;
    let mesh = sc_one.mesh.to_spec()?;
    let tau = sc_one.time.tau();
    let stat0 = stationary_solve(net, &sc_one.initial_boundary_pressures(), 1e-12)?;
    let truth = simulate_nonlinear(
        net, &mesh, &sc_one.signals, &stat0, tau, sc_one.time.theta, sc_one.time.steps, sc_one.seed,
    )?;
    let ms = synthesize_measurements(&truth, &sys, sc_one.measurement.noise_percent, sc_one.seed)?;
    let est: EstimateTrajectory = match filter {
        FilterKind::Kf => {
            let t = Instant::now();
            let sched = precompute_gains(&model, &p0, sc_one.time.steps)?;
            let offline_s = t.elapsed().as_secs_f64();
            let mut e = run_kf(&model, &u_d, &ms.y, &x0, Some(&p0), Some(&sched))?;
            e.timing.offline_s = offline_s;
            e
        }
        FilterKind::Rkf => {
            let b = basis.as_ref().expect("validated");
            let (red_est, aug) = run_rkf(&sys, &model, b, &u_d, &ms.y, &x0)?;
            let mut full = prolong_estimate(&red_est, &aug)?;
            full.timing.offline_s += basis_s;
            full
        }
        FilterKind::Cskf => {
            let b = basis.as_ref().expect("validated");
            let aug = augment_basis(b, model.n_b);
            let mut e = run_cskf(&model, &aug, &u_d, &ms.y, &x0)?;
            e.timing.offline_s += basis_s;
            e
        }
        FilterKind::Enkf => run_enkf(&model, sc_one.ensemble_size, &u_d, &ms.y, &x0, sc_one.seed)?,
        FilterKind::Renkf => {
            let b = basis.as_ref().expect("validated");
            let t = Instant::now();
            let aug = augment_basis(b, model.n_b);
            let red_sys = reduce_system(&sys, b)?;
            let red_model = reduce_filter_model(&model, &red_sys, &aug)?;
            let reduce_s = t.elapsed().as_secs_f64();
            let x0_hat = aug.v_x.tr_mul(&x0);
            let red_est = run_enkf(&red_model, sc_one.ensemble_size, &u_d, &ms.y, &x0_hat, sc_one.seed)?;
            let mut full = prolong_estimate(&red_est, &aug)?;
            full.timing.offline_s += basis_s + reduce_s;
            full
        }
    };
    let error = error_metric(&sys, std::slice::from_ref(&est.states), std::slice::from_ref(&truth), sc_one.norm)?;
    let row = FilterRow {
        filter,
        error,
        offline_s: est.timing.offline_s,
        online_s: est.timing.online_s,
        postproc_s: est.timing.postproc_s,
        prolongation: matches!(filter, FilterKind::Rkf | FilterKind::Renkf),
        offline_is_sampling: matches!(filter, FilterKind::Enkf | FilterKind::Renkf),
    };
    Ok((row, truth.times.clone(), est.states))
}

/// Build a projection basis for the scenario's MOR config and write a basis
/// cache: `basis.csv` (V, one row per dof) with a JSON sidecar recording
/// dimensions, method, and a content hash of the source system.
pub fn write_basis_cache(net: &PipeNetwork, sc: &Scenario, out: &Path) -> Result<Vec<PathBuf>> {
    use sha2::{Digest, Sha256};
    let mesh = sc.mesh.to_spec()?;
    let tau = sc.time.tau();
    let stat0 = stationary_solve(net, &sc.initial_boundary_pressures(), 1e-12)?;
    let stat_lin = stationary_solve(net, &sc.linearization_pressures(), 1e-12)?;
    let lin_net = linearize_friction(net, &stat_lin)?;
    let sys = assemble_linear(&lin_net, &mesh)?;
    let cfg = sc
        .mor
        .as_ref()
        .ok_or_else(|| Error::Schema("scenario has no mor config".into()))?;
    let x0 = stat0.state_vector(&sys)?;
    let snapshots = if matches!(cfg.method, crate::mor::BasisMethod::Pod) {
        let mut quiet = sc.signals.clone();
        for s in &mut quiet {
            s.ou.sigma = 0.0;
        }
        Some(simulate_linear_from(&sys, &quiet, x0.clone(), tau, sc.time.theta, sc.time.steps, 0)?)
    } else {
        None
    };
    let basis = build_basis(&sys, cfg, snapshots.as_ref(), std::slice::from_ref(&x0))?;

    let mut hasher = Sha256::new();
    for m in [&sys.e, &sys.a, &sys.b] {
        for (i, j, v) in m.iter() {
            hasher.update((i as u64).to_le_bytes());
            hasher.update((j as u64).to_le_bytes());
            hasher.update(v.to_le_bytes());
        }
    }
    let system_hash = format!("{:x}", hasher.finalize());

    std::fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let csv_path = out.join("basis.csv");
    {
        let file = std::fs::File::create(&csv_path)?;
        let mut w = std::io::BufWriter::new(file);
        for i in 0..basis.v.nrows() {
            let row: Vec<String> = (0..basis.v.ncols()).map(|j| basis.v[(i, j)].to_string()).collect();
            writeln!(w, "{}", row.join(","))?;
        }
    }
    written.push(csv_path);
    let sidecar = serde_json::json!({
        "n_full": basis.v.nrows(),
        "n": basis.n(),
        "method": cfg.method,
        "system_hash": system_hash,
    });
    let side_path = out.join("basis.json");
    std::fs::write(&side_path, serde_json::to_string_pretty(&sidecar)?)?;
    written.push(side_path);
    Ok(written)
}

/// The shipped diamond benchmark scenario: T = 20, K = 1000, θ = 0.51,
/// 250 elements per pipe, supply-pressure program at v1 with C¹ transitions,
/// constant demand pressure at v2, OU noise (μ, κ, σ) = (0, 3, 0.2) at v1,
/// boundary-flux measurements at both boundary nodes, friction linearized at
/// the (3, 2) operating point.
pub fn diamond_scenario() -> Scenario {
    use crate::simulation::{OuParams, Segment};
    use std::f64::consts::PI;
    let v1 = vec![
        Segment::Cos { t0: 0.0, t1: 1.0, a: 2.5, b: -0.5, omega: PI },
        Segment::Constant { t0: 1.0, t1: 5.0, value: 3.0 },
        Segment::Cos { t0: 5.0, t1: 7.5, a: 1.875, b: 1.125, omega: 0.4 * PI },
        Segment::Linear { t0: 7.5, t1: 10.0, v0: 0.75, v1: 0.5 },
        Segment::Cos { t0: 10.0, t1: 12.5, a: 1.25, b: -0.75, omega: 0.4 * PI },
        Segment::Constant { t0: 12.5, t1: 20.0, value: 2.0 },
    ];
    let v2 = vec![Segment::Constant { t0: 0.0, t1: 20.0, value: 2.0 }];
    Scenario {
        time: TimeGrid { t_final: 20.0, steps: 1000, theta: 0.51 },
        mesh: MeshConfig { elements_per_pipe: Some(250), max_element_length: None },
        signals: vec![
            BoundarySignal {
                node: "v1".into(),
                u_d: v1,
                ou: OuParams { kappa: 3.0, mu: 0.0, sigma: 0.2 },
            },
            BoundarySignal {
                node: "v2".into(),
                u_d: v2,
                ou: OuParams { kappa: 3.0, mu: 0.0, sigma: 0.0 },
            },
        ],
        measurement: MeasurementConfig { nodes: vec!["v1".into(), "v2".into()], noise_percent: 0.2 },
        linearization: Some([("v1".to_string(), 3.0), ("v2".to_string(), 2.0)].into()),
        mor: Some(MorConfig::moment_matching(29)),
        filters: vec![
            FilterKind::Kf,
            FilterKind::Rkf,
            FilterKind::Cskf,
            FilterKind::Enkf,
            FilterKind::Renkf,
        ],
        ensemble_size: 100,
        realizations: 5,
        seed: 42,
        norm: NormKind::Mass,
    }
}
