//! Experiment orchestration: configuration, instance construction, metric
//! computation, CSV/JSON export, and parameter sweeps.

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::beamform::{optimize_beams, BeamformProblem, BeamformReport};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::scene::{random_scene, RoiGrid, Scene};
use crate::sensing::{run_centralized, EstimatorInputs, EstimatorParams, Trajectory};
use crate::theory::{
    effective_input_variance, stability_check, steady_state_mse, theory_f2, TheoryWorkspace,
};
use crate::topology::{build_random_network, metropolis_weights, CombinationMatrix, NetworkGraph};
use crate::two_step::{run_two_step, symbol_correlation, TwoStepConfig};
use crate::waveform::{batch_rx, gen_symbols, user_signature, BeamformerPair, Measurements, NoiseConfig, SymbolStreams};

pub const DEFAULT_ETA1: f64 = 0.02;
pub const DEFAULT_ETA2: f64 = 0.01;
pub const MSD_FLOOR_DB: f64 = -300.0;

/// Physical and protocol parameters of one experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct Scenario {
    pub m: usize,
    pub k_dims: (usize, usize, usize),
    pub n_users: usize,
    pub avg_degree: f64,
    pub snr_db: f64,
    pub p_budget: f64,
    pub t_horizon: usize,
    pub sparsity: usize,
    pub n_runs: usize,
    pub master_seed: u64,
    /// Iterations before the steady-state window is read off.
    pub settle: usize,
    /// Tail samples averaged into the steady-state figure.
    pub window: usize,
    /// Fraction of the power budget on the sensing beam.
    pub power_split: f64,
    /// Reflectivity magnitude of each occupied pixel. Larger targets both
    /// raise the echo power and strengthen the normalization term of the
    /// weighted error, which keeps the radial component of the
    /// total-least-squares update well inside the contractive regime.
    pub target_amplitude: f64,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            m: 4,
            k_dims: (2, 2, 2),
            n_users: 5,
            avg_degree: 2.0,
            snr_db: 10.0,
            p_budget: 10.0,
            t_horizon: 600,
            sparsity: 1,
            n_runs: 20,
            master_seed: 1,
            settle: 600,
            window: 150,
            power_split: 0.3,
            target_amplitude: 3.0,
        }
    }
}

impl Scenario {
    pub fn k(&self) -> usize {
        self.k_dims.0 * self.k_dims.1 * self.k_dims.2
    }

    pub fn sigma_o2(&self) -> f64 {
        self.p_budget * 10f64.powf(-self.snr_db / 10.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n_users == 0 || self.t_horizon == 0 || self.n_runs == 0 {
            return Err(Error::Config("counts must be positive".into()));
        }
        if !self.snr_db.is_finite() || self.p_budget <= 0.0 {
            return Err(Error::Config("SNR must be finite and the budget positive".into()));
        }
        if self.sparsity > self.k() {
            return Err(Error::Config("sparsity exceeds pixel count".into()));
        }
        if !(self.target_amplitude > 0.0) || !self.target_amplitude.is_finite() {
            return Err(Error::Config("target amplitude must be finite and positive".into()));
        }
        if !(0.0..=1.0).contains(&self.power_split) {
            return Err(Error::Config("power split must lie in [0, 1]".into()));
        }
        if self.settle > self.t_horizon || self.window > self.settle {
            return Err(Error::Config(
                "steady-state window must fit inside the horizon".into(),
            ));
        }
        Ok(())
    }
}

/// Estimator knobs; a missing step size is chosen from the curvature bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub mu: Option<f64>,
    /// Factor applied to the step size in the first pass, where the
    /// uncancelled data term inflates the gradient noise; a smaller step
    /// trades convergence speed for a lower interference-limited floor.
    pub mu_step1_scale: f64,
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            mu: None,
            mu_step1_scale: 0.2,
            eta1: DEFAULT_ETA1,
            eta2: DEFAULT_ETA2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    TwoStep,
    Step1Only,
    NoPenalty,
    ElementOnly,
    Centralized,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::TwoStep => "two_step",
            Variant::Step1Only => "step1_only",
            Variant::NoPenalty => "no_penalty",
            Variant::ElementOnly => "element_only",
            Variant::Centralized => "centralized",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamformConfig {
    pub sigma2: f64,
    pub g_count: usize,
    pub beta1: Vec<f64>,
}

impl Default for BeamformConfig {
    fn default() -> Self {
        Self {
            sigma2: 1.0,
            g_count: 50,
            beta1: vec![0.1, 0.5, 0.9],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub estimator: EstimatorConfig,
    pub variants: Vec<Variant>,
    pub beamform: BeamformConfig,
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{path:?}: {e}")))?;
        cfg.scenario.validate()?;
        Ok(cfg)
    }
}

/// One fully-materialized problem instance, derived from the master seed
/// and a run index through named substreams.
pub struct Instance {
    pub scene: Scene,
    pub graph: NetworkGraph,
    pub c: CombinationMatrix,
    pub streams: SymbolStreams,
    pub beams: BeamformerPair,
    pub noise: NoiseConfig,
    pub measurements: Measurements,
}

fn unit_beam(m: usize, seed: u64) -> DVector<Complex64> {
    let mut rng = crate::rng::substream(seed, "harness/beam-direction", &[]);
    let v = DVector::from_fn(m, |_, _| crate::rng::complex_gaussian(&mut rng, 1.0));
    let n = v.norm();
    if n == 0.0 {
        DVector::from_element(m, Complex64::new((1.0 / m as f64).sqrt(), 0.0))
    } else {
        v / Complex64::new(n, 0.0)
    }
}

/// Deterministic per-run instance construction. The sensing and data beams
/// are random directions carrying the configured power split.
pub fn build_instance(sc: &Scenario, run: u64) -> Result<Instance> {
    sc.validate()?;
    let grid = RoiGrid::new(sc.k_dims)?;
    let master = sc.master_seed;
    let mut scene = random_scene(
        grid,
        sc.sparsity,
        sc.m,
        sc.n_users,
        derive_seed(master, "harness/scene", &[run]),
    )?;
    scene.roi.x *= Complex64::new(sc.target_amplitude, 0.0);
    let graph = build_random_network(
        sc.n_users,
        sc.avg_degree,
        derive_seed(master, "harness/graph", &[run]),
    )?;
    let c = metropolis_weights(&graph);
    let streams = gen_symbols(sc.t_horizon, derive_seed(master, "harness/symbols", &[run]))?;
    let w = unit_beam(sc.m, derive_seed(master, "harness/beam-w", &[run]))
        * Complex64::new((sc.power_split * sc.p_budget).sqrt(), 0.0);
    let f = unit_beam(sc.m, derive_seed(master, "harness/beam-f", &[run]))
        * Complex64::new(((1.0 - sc.power_split) * sc.p_budget).sqrt(), 0.0);
    let beams = BeamformerPair { w, f };
    let noise = NoiseConfig {
        sigma_o2: sc.sigma_o2(),
        sigma_in2: effective_input_variance(&scene, &beams.f, sc.sigma_o2()),
    };
    let measurements = batch_rx(
        &scene,
        &beams,
        &streams,
        &noise,
        derive_seed(master, "harness/rx-noise", &[run]),
    );
    Ok(Instance {
        scene,
        graph,
        c,
        streams,
        beams,
        noise,
        measurements,
    })
}

/// Curvature-bound step size `0.5/λmax(H)` for the given instance, from the
/// sensing-beam signatures.
pub fn auto_step_size(inst: &Instance) -> f64 {
    let d0 = inst.scene.roi.x.norm_squared() + 1.0;
    let lam = (0..inst.scene.n_users())
        .map(|l| 2.0 * user_signature(&inst.scene, &inst.beams.w, l).norm_squared() / d0)
        .fold(0.0, f64::max);
    if lam > 0.0 {
        0.5 / lam
    } else {
        0.0
    }
}


fn estimator_params(
    cfg: &EstimatorConfig,
    inst: &Instance,
    mu_auto: f64,
    eta1: f64,
    eta2: f64,
) -> Result<EstimatorParams> {
    let mu = cfg.mu.unwrap_or(mu_auto);
    EstimatorParams::uniform(mu, eta1, eta2, inst.scene.n_users())
}

/// Output of one variant on one instance.
pub struct RunOutput {
    pub series: Vec<f64>,
    pub symbol_corr: Option<f64>,
}

fn network_msd_db(states: &[DVector<Complex64>], x0: &DVector<Complex64>) -> f64 {
    let mean: f64 = states
        .iter()
        .map(|x| (x - x0).norm_squared())
        .sum::<f64>()
        / states.len() as f64;
    if mean <= 0.0 {
        MSD_FLOOR_DB
    } else {
        (10.0 * mean.log10()).max(MSD_FLOOR_DB)
    }
}

/// Per-iteration network deviation of a trajectory in dB.
#[derive(Debug, Clone, PartialEq)]
pub struct MsdSeries {
    pub msd_db: Vec<f64>,
}

pub fn msd_curve(trajectory: &Trajectory, x0: &DVector<Complex64>) -> MsdSeries {
    MsdSeries {
        msd_db: trajectory
            .states
            .iter()
            .map(|s| network_msd_db(s, x0))
            .collect(),
    }
}

/// Mean of the `window` samples ending at iteration `settle`.
pub fn steady_msd(series: &MsdSeries, settle: usize, window: usize) -> Result<f64> {
    if settle >= series.msd_db.len() {
        return Err(Error::Protocol(format!(
            "series of {} samples is shorter than the settle point {settle}",
            series.msd_db.len()
        )));
    }
    if window == 0 || window > settle {
        return Err(Error::Protocol("window must satisfy 0 < window <= settle".into()));
    }
    let slice = &series.msd_db[settle + 1 - window..=settle];
    Ok(slice.iter().sum::<f64>() / window as f64)
}

pub fn run_variant(
    inst: &Instance,
    est: &EstimatorConfig,
    variant: Variant,
) -> Result<RunOutput> {
    let x0 = &inst.scene.roi.x;
    let (eta1, eta2) = match variant {
        Variant::NoPenalty => (0.0, 0.0),
        Variant::ElementOnly => (est.eta1, 0.0),
        _ => (est.eta1, est.eta2),
    };
    let mu_auto = auto_step_size(inst);
    if matches!(variant, Variant::Centralized) {
        // Pooled single-state recursion on the known sensing rows; the
        // data term acts as noise, so the damped first-pass step applies.
        let t = inst.streams.horizon();
        let u: Vec<Vec<DVector<Complex64>>> = (0..inst.scene.n_users())
            .map(|n| {
                let a_w = user_signature(&inst.scene, &inst.beams.w, n);
                (0..t)
                    .map(|i| &a_w * inst.streams.s_e[i].conj())
                    .collect()
            })
            .collect();
        let params =
            estimator_params(est, inst, mu_auto * est.mu_step1_scale, eta1, eta2)?;
        let traj = run_centralized(
            &EstimatorInputs {
                y: &inst.measurements.y,
                u: &u,
            },
            &params,
            &inst.scene.roi.grid,
            &DVector::from_element(inst.scene.k(), Complex64::ZERO),
        )?;
        return Ok(RunOutput {
            series: msd_curve(&traj, x0).msd_db,
            symbol_corr: None,
        });
    }
    let cfg = TwoStepConfig {
        step1_params: estimator_params(est, inst, mu_auto * est.mu_step1_scale, eta1, eta2)?,
        step2_params: estimator_params(est, inst, mu_auto, eta1, eta2)?,
        varpi2: 0.0,
    };
    let out = run_two_step(
        &inst.scene,
        &inst.beams,
        &inst.streams,
        &inst.measurements,
        &inst.c,
        &cfg,
    )?;
    let traj = match variant {
        Variant::Step1Only => &out.step1,
        _ => &out.step2,
    };
    Ok(RunOutput {
        series: msd_curve(traj, x0).msd_db,
        symbol_corr: out
            .symbols
            .as_ref()
            .map(|s| symbol_correlation(s, &inst.streams.s_d)),
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CurveRow {
    pub variant: &'static str,
    pub seed: u64,
    pub iteration: usize,
    pub msd_db: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub mean_steady_msd_db: BTreeMap<String, f64>,
    pub mean_symbol_correlation: Option<f64>,
    pub n_runs: usize,
}

pub struct ExperimentResult {
    pub rows: Vec<CurveRow>,
    pub summary: ExperimentSummary,
}

/// Runs every configured variant over `n_runs` instances (in parallel) and
/// assembles per-iteration rows plus steady-state means.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    cfg.scenario.validate()?;
    if cfg.variants.is_empty() {
        return Err(Error::Config("no variants selected".into()));
    }
    let sc = &cfg.scenario;
    let jobs: Vec<(Variant, u64)> = cfg
        .variants
        .iter()
        .flat_map(|&v| (0..sc.n_runs as u64).map(move |r| (v, r)))
        .collect();
    let outputs: Vec<(Variant, u64, RunOutput)> = jobs
        .par_iter()
        .map(|&(v, r)| {
            let inst = build_instance(sc, r)?;
            let out = run_variant(&inst, &cfg.estimator, v)?;
            Ok((v, r, out))
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    let mut steady: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut corrs = Vec::new();
    for (v, r, out) in &outputs {
        let series = MsdSeries {
            msd_db: out.series.clone(),
        };
        for (i, &msd) in out.series.iter().enumerate() {
            rows.push(CurveRow {
                variant: v.name(),
                seed: *r,
                iteration: i,
                msd_db: msd,
            });
        }
        steady
            .entry(v.name().to_string())
            .or_default()
            .push(steady_msd(&series, sc.settle, sc.window)?);
        if let Some(c) = out.symbol_corr {
            corrs.push(c);
        }
    }
    let mean_steady_msd_db = steady
        .into_iter()
        .map(|(k, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (k, m)
        })
        .collect();
    Ok(ExperimentResult {
        rows,
        summary: ExperimentSummary {
            mean_steady_msd_db,
            mean_symbol_correlation: if corrs.is_empty() {
                None
            } else {
                Some(corrs.iter().sum::<f64>() / corrs.len() as f64)
            },
            n_runs: sc.n_runs,
        },
    })
}

pub fn write_curves_csv<W: std::io::Write>(rows: &[CurveRow], out: &mut W) -> Result<()> {
    writeln!(out, "variant,seed,iteration,msd_db")?;
    for r in rows {
        writeln!(out, "{},{},{},{:.12}", r.variant, r.seed, r.iteration, r.msd_db)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum SweepAxis {
    L,
    N,
    K,
    Snr,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "L" => Ok(SweepAxis::L),
            "N" => Ok(SweepAxis::N),
            "K" => Ok(SweepAxis::K),
            "SNR" => Ok(SweepAxis::Snr),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl SweepAxis {
    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::L => "L",
            SweepAxis::N => "N",
            SweepAxis::K => "K",
            SweepAxis::Snr => "SNR",
        }
    }
}

fn apply_axis(sc: &Scenario, axis: SweepAxis, value: f64) -> Result<Scenario> {
    let mut out = sc.clone();
    match axis {
        SweepAxis::L => out.sparsity = value as usize,
        SweepAxis::N => out.n_users = value as usize,
        SweepAxis::K => {
            let tail = sc.k_dims.1 * sc.k_dims.2;
            let v = value as usize;
            if tail == 0 || v % tail != 0 || v == 0 {
                return Err(Error::Config(format!(
                    "pixel count {v} is not a multiple of the fixed cross-section {tail}"
                )));
            }
            out.k_dims.0 = v / tail;
        }
        SweepAxis::Snr => out.snr_db = value,
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub axis: &'static str,
    pub value: f64,
    pub variant: &'static str,
    pub seed: u64,
    pub steady_msd_db: f64,
}

/// One steady-state figure per (axis value, variant, seed).
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one axis value".into()));
    }
    if cfg.variants.is_empty() {
        return Err(Error::Config("no variants selected".into()));
    }
    let jobs: Vec<(f64, Variant, u64)> = values
        .iter()
        .flat_map(|&val| {
            cfg.variants.iter().flat_map(move |&v| {
                (0..cfg.scenario.n_runs as u64).map(move |r| (val, v, r))
            })
        })
        .collect();
    jobs.par_iter()
        .map(|&(val, v, r)| {
            let sc = apply_axis(&cfg.scenario, axis, val)?;
            let inst = build_instance(&sc, r)?;
            let out = run_variant(&inst, &cfg.estimator, v)?;
            let s = steady_msd(
                &MsdSeries { msd_db: out.series },
                sc.settle,
                sc.window,
            )?;
            Ok(SweepRow {
                axis: axis.name(),
                value: val,
                variant: v.name(),
                seed: r,
                steady_msd_db: s,
            })
        })
        .collect()
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], out: &mut W) -> Result<()> {
    writeln!(out, "axis,value,variant,seed,steady_msd_db")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{:.12}",
            r.axis, r.value, r.variant, r.seed, r.steady_msd_db
        )?;
    }
    Ok(())
}

/// Closed-form prediction report for the instance at run index 0.
#[derive(Debug, Clone, Serialize)]
pub struct TheoryReport {
    pub spectral_radius_dh: f64,
    pub spectral_radius_propagation: f64,
    pub stable: bool,
    pub mse_predicted: Option<f64>,
    pub f2: f64,
    pub sigma_in2: f64,
    pub mu: f64,
}

pub fn theory_report(cfg: &ExperimentConfig) -> Result<TheoryReport> {
    let inst = build_instance(&cfg.scenario, 0)?;
    let mu = cfg.estimator.mu.unwrap_or_else(|| auto_step_size(&inst));
    let ws = TheoryWorkspace::build(
        &inst.scene,
        &inst.beams.w,
        &vec![mu; inst.scene.n_users()],
        &inst.c,
        inst.noise.sigma_in2,
        1.0,
    )?;
    let stab = stability_check(&ws);
    let mse = if stab.pass {
        Some(steady_state_mse(&ws, 0.0)?.mse)
    } else {
        None
    };
    let f2 = theory_f2(&ws)?;
    Ok(TheoryReport {
        spectral_radius_dh: stab.spectral_radius_dh,
        spectral_radius_propagation: stab.spectral_radius_propagation,
        stable: stab.pass,
        mse_predicted: mse,
        f2: f2.value,
        sigma_in2: inst.noise.sigma_in2,
        mu,
    })
}

/// Joint beam design on the instance at run index 0, one report per
/// configured priority value.
pub fn beamform_reports(cfg: &ExperimentConfig) -> Result<Vec<BeamformReport>> {
    let inst = build_instance(&cfg.scenario, 0)?;
    let mu = cfg.estimator.mu.unwrap_or_else(|| auto_step_size(&inst));
    let ws = TheoryWorkspace::build(
        &inst.scene,
        &inst.beams.w,
        &vec![mu; inst.scene.n_users()],
        &inst.c,
        inst.noise.sigma_in2.max(1e-6),
        1.0,
    )?;
    let f2 = theory_f2(&ws)?;
    cfg.beamform
        .beta1
        .iter()
        .map(|&b1| {
            let problem = BeamformProblem::new(
                inst.scene.channels.g_comm.clone(),
                cfg.beamform.sigma2,
                cfg.scenario.p_budget,
                b1,
                &f2,
                cfg.beamform.g_count,
            )?;
            let seed = derive_seed(cfg.scenario.master_seed, "harness/randomization", &[(b1 * 1000.0) as u64]);
            optimize_beams(&problem, seed).map(|(_, _, r)| r)
        })
        .collect()
}

/// Applies the `NETISAC_THREADS` cap to the global worker pool. Silently a
/// no-op when the pool is already initialized or the variable is unset.
pub fn init_threads_from_env() {
    if let Ok(v) = std::env::var("NETISAC_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
