//! Fixed-step time-domain simulation of the coupled device/network system
//! with the multi-rate control layers and timed disturbance events.
//!
//! Each grid time `t_k = k·h` is processed in a fixed order:
//!
//! 1. consensus round, if `t_k` is a consensus tick and the mode uses one;
//! 2. safety bounds, composition and capacity clamp on safety ticks;
//! 3. events scheduled in `(t_{k-1}, t_k]`, followed by a network re-solve;
//! 4. a log record;
//! 5. one classical Runge–Kutta step, re-solving the network at every stage.
//!
//! Set-points are held between ticks, so the applied set-point is piecewise
//! constant on the safety grid and the consensus value on the consensus grid.

use thiserror::Error;

use crate::control::{
    capacity_clamp, compose_safety_consensus, consensus_round, safety_bounds, CommGraph, ControlConfig, ControlError,
    ControlMode, SetpointBounds,
};
use crate::devices::{gfm_derivatives, sg_derivatives, GfmParams, GfmState, SgParams, SgState};
use crate::linalg::lu_solve_in_place;
use crate::netmodel::{
    apply_topology_event, solve_network, DeviceCoupling, DeviceKind, GridModel, NetError, NetworkSolution, SolverOptions,
    SourceVoltage, TopologyEvent,
};
use crate::scalar::{max_abs, Scalar};
use crate::scenario_io::{EventKind, LoadAmount, ScenarioScript};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error("initialisation failed: {report}")]
    Init { max_mismatch: f64, report: String },
    #[error("t = {t:.6} s: {source}")]
    Network { t: f64, source: NetError },
    #[error("t = {t:.6} s: event `{event}` rejected: {source}")]
    Event { t: f64, event: String, source: NetError },
    #[error("t = {t:.6} s: {device} frequency {freq_hz:.4} Hz left the {band_hz} Hz abort band")]
    FrequencyAbort {
        t: f64,
        device: String,
        freq_hz: f64,
        band_hz: f64,
    },
    #[error("t = {t:.6} s: non-finite state in {device}")]
    NonFinite { t: f64, device: String },
    #[error("no in-service synchronous generator left for the centre-of-inertia frequency")]
    NoSynchronousGenerator,
}

/// A synchronous generator placed on the network.
#[derive(Clone, Debug, PartialEq)]
pub struct SgUnit<T> {
    pub name: String,
    pub bus: usize,
    pub params: SgParams<T>,
    /// Scheduled active output for initialisation; the slack unit absorbs the
    /// remainder and network losses.
    pub dispatch: T,
    pub slack: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GfmUnit<T> {
    pub name: String,
    pub bus: usize,
    pub params: GfmParams<T>,
}

/// Every device in the system, generators first. Device `j` of the network
/// model is `sgs[j]` for `j < sgs.len()`, otherwise `gfms[j - sgs.len()]`.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct DeviceSet<T> {
    pub sgs: Vec<SgUnit<T>>,
    pub gfms: Vec<GfmUnit<T>>,
}

impl<T: Scalar> DeviceSet<T> {
    pub fn couplings(&self) -> Vec<DeviceCoupling<T>> {
        let sg = self.sgs.iter().map(|u| DeviceCoupling {
            name: u.name.clone(),
            kind: DeviceKind::Sg,
            terminal: u.bus,
            reactance: u.params.transient_reactance,
            in_service: true,
        });
        let gfm = self.gfms.iter().map(|u| DeviceCoupling {
            name: u.name.clone(),
            kind: DeviceKind::Gfm,
            terminal: u.bus,
            reactance: u.params.coupling_reactance,
            in_service: true,
        });
        sg.chain(gfm).collect()
    }

    pub fn len(&self) -> usize {
        self.sgs.len() + self.gfms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn device_name(&self, j: usize) -> &str {
        if j < self.sgs.len() {
            &self.sgs[j].name
        } else {
            &self.gfms[j - self.sgs.len()].name
        }
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.sgs
            .iter()
            .map(|u| u.name.as_str())
            .chain(self.gfms.iter().map(|u| u.name.as_str()))
            .position(|n| n == name)
    }

    fn slack_index(&self) -> Option<usize> {
        self.sgs
            .iter()
            .position(|u| u.slack)
            .or(if self.sgs.is_empty() { None } else { Some(0) })
    }
}

/// Integration step, horizon and the control layer periods.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduleConfig<T> {
    pub step: T,
    pub end_time: T,
    pub safety_period: T,
    pub consensus_period: T,
}

/// Integer tick plan derived from a validated [`ScheduleConfig`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TickPlan {
    pub steps: usize,
    pub safety_every: usize,
    pub consensus_every: usize,
}

/// Relative slack when deciding whether a time lies on the step grid.
fn grid_tolerance<T: Scalar>() -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(16.0))
}

fn integer_ratio<T: Scalar>(num: T, den: T) -> Option<usize> {
    let r = num / den;
    let k = r.round();
    if k < T::one() || (r - k).abs() > grid_tolerance::<T>() * r.max(T::one()) {
        return None;
    }
    k.to_usize()
}

impl<T: Scalar> ScheduleConfig<T> {
    pub fn new(step: T, end_time: T, cfg: &ControlConfig<T>) -> Self {
        Self {
            step,
            end_time,
            safety_period: cfg.safety_period,
            consensus_period: cfg.consensus_period,
        }
    }

    pub fn plan(&self) -> Result<TickPlan, SimError> {
        let bad = |m: String| Err(SimError::Config(m));
        if !(self.step > T::zero()) {
            return bad("integration step must be positive".into());
        }
        if self.step > self.safety_period {
            return bad("integration step exceeds the safety period".into());
        }
        if self.end_time < T::zero() {
            return bad("end time must be non-negative".into());
        }
        let Some(safety_every) = integer_ratio(self.safety_period, self.step) else {
            return bad(format!(
                "safety period {} is not a multiple of the step {}",
                self.safety_period, self.step
            ));
        };
        let Some(consensus_every) = integer_ratio(self.consensus_period, self.step) else {
            return bad(format!(
                "consensus period {} is not a multiple of the step {}",
                self.consensus_period, self.step
            ));
        };
        if consensus_every % safety_every != 0 {
            return bad("safety period must divide the consensus period".into());
        }
        let steps = (self.end_time / self.step).round().to_usize().unwrap_or(0);
        Ok(TickPlan {
            steps,
            safety_every,
            consensus_every,
        })
    }
}

/// Control-side settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlSetup<T> {
    pub config: ControlConfig<T>,
    pub mode: ControlMode,
    pub graph: CommGraph,
}

/// Complete dynamic state at one grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemState<T> {
    pub step: usize,
    pub model: GridModel<T>,
    pub sg: Vec<SgState<T>>,
    pub gfm: Vec<GfmState<T>>,
    pub network: NetworkSolution<T>,
    /// Held consensus set-points.
    pub p_con: Vec<T>,
    /// Held safety bounds (monitoring only outside safety-consensus mode).
    pub bounds: Vec<SetpointBounds<T>>,
    /// Filtered angle-derivative frequency deviation of each network bus, rad/s.
    pub bus_freq_dev: Vec<T>,
}

impl<T: Scalar> SystemState<T> {
    pub fn sg_in_service(&self, i: usize) -> bool {
        self.model.couplings()[i].in_service
    }

    pub fn gfm_in_service(&self, i: usize) -> bool {
        self.model.couplings()[self.sg.len() + i].in_service
    }
}

fn sources<T: Scalar>(devices: &DeviceSet<T>, sg: &[SgState<T>], gfm: &[GfmState<T>]) -> Vec<SourceVoltage<T>> {
    let a = devices.sgs.iter().zip(sg).map(|(u, s)| SourceVoltage {
        magnitude: u.params.emf,
        angle: s.theta,
    });
    let b = gfm.iter().map(|s| SourceVoltage {
        magnitude: s.emf,
        angle: s.theta,
    });
    a.chain(b).collect()
}

/// Solves the pre-disturbance operating point: generators at their dispatch
/// (slack absorbs losses), storage units dormant with zero injection, every
/// device derivative zero. Returns the initial state together with the device
/// set whose governor references and voltage set-points were aligned to it.
pub fn initialize<T: Scalar>(
    model: &GridModel<T>,
    devices: &DeviceSet<T>,
    control: &ControlSetup<T>,
) -> Result<(SystemState<T>, DeviceSet<T>), SimError> {
    control.config.validate()?;
    if devices.len() != model.couplings().len() {
        return Err(SimError::Config(format!(
            "{} devices but {} couplings in the network model",
            devices.len(),
            model.couplings().len()
        )));
    }
    if control.graph.len() != devices.gfms.len() {
        return Err(SimError::Config(format!(
            "communication graph has {} units, system has {} grid-forming units",
            control.graph.len(),
            devices.gfms.len()
        )));
    }
    let slack = devices.slack_index().ok_or(SimError::NoSynchronousGenerator)?;
    let n = model.n_network();
    let n_sg = devices.sgs.len();
    let omega0 = control.config.omega0;
    let free_sg: Vec<usize> = (0..n_sg).filter(|&i| i != slack).collect();
    let m = 2 * n + free_sg.len();

    // unknowns: θ (network), V (network), angles of non-slack generators
    let mut x = vec![T::zero(); m];
    for v in &mut x[n..2 * n] {
        *v = T::one();
    }
    let mut sg_angle = vec![T::zero(); n_sg];
    let mut sol = NetworkSolution::flat(model.n_total(), T::zero());

    let fill = |x: &[T], sol: &mut NetworkSolution<T>, sg_angle: &mut [T]| {
        sol.theta[..n].copy_from_slice(&x[..n]);
        sol.v[..n].copy_from_slice(&x[n..2 * n]);
        for (k, &i) in free_sg.iter().enumerate() {
            sg_angle[i] = x[2 * n + k];
        }
        for (i, u) in devices.sgs.iter().enumerate() {
            sol.v[n + i] = u.params.emf;
            sol.theta[n + i] = sg_angle[i];
        }
        // dormant storage: internal EMF equals the terminal voltage
        for (g, u) in devices.gfms.iter().enumerate() {
            sol.v[n + n_sg + g] = sol.v[u.bus];
            sol.theta[n + n_sg + g] = sol.theta[u.bus];
        }
    };
    let residual = |x: &[T], sol: &mut NetworkSolution<T>, sg_angle: &mut [T], out: &mut [T]| {
        fill(x, sol, sg_angle);
        for (i, bus) in model.buses().iter().enumerate() {
            let (p, q) = sol.injection(model.ybus(), i);
            out[i] = p + bus.load_active;
            out[n + i] = q + bus.load_reactive;
        }
        for (k, &i) in free_sg.iter().enumerate() {
            out[2 * n + k] = sol.injection(model.ybus(), n + i).0 - devices.sgs[i].dispatch;
        }
    };

    let (load_p, load_q) = model.total_load();
    let scale = T::one().max(load_p.abs() + load_q.abs());
    let tol = T::lit(1e-11).max(T::epsilon() * T::lit(64.0) * scale);
    let mut f = vec![T::zero(); m];
    let mut fp = vec![T::zero(); m];
    let mut fm = vec![T::zero(); m];
    let mut jac = vec![T::zero(); m * m];
    for _ in 0..60 {
        residual(&x, &mut sol, &mut sg_angle, &mut f);
        let worst = max_abs(&f);
        if worst <= tol {
            break;
        }
        if !worst.is_finite() {
            break;
        }
        // central differences: storage internal buses follow their terminals,
        // which the plain network Jacobian does not see
        for c in 0..m {
            let h = T::epsilon().cbrt() * x[c].abs().max(T::one());
            let orig = x[c];
            x[c] = orig + h;
            residual(&x, &mut sol, &mut sg_angle, &mut fp);
            x[c] = orig - h;
            residual(&x, &mut sol, &mut sg_angle, &mut fm);
            x[c] = orig;
            for r in 0..m {
                jac[r * m + c] = (fp[r] - fm[r]) / (h + h);
            }
        }
        residual(&x, &mut sol, &mut sg_angle, &mut f);
        for v in f.iter_mut() {
            *v = -*v;
        }
        if !lu_solve_in_place(&mut jac, &mut f, m) {
            break;
        }
        for (xi, dx) in x.iter_mut().zip(&f) {
            *xi += *dx;
        }
    }
    residual(&x, &mut sol, &mut sg_angle, &mut f);
    let worst = max_abs(&f);
    if !(worst <= tol) {
        let mut report = format!(
            "no pre-disturbance equilibrium; max mismatch {:.3e} p.u.",
            worst.to_f64_lossy()
        );
        for (i, bus) in model.buses().iter().enumerate() {
            let (dp, dq) = (f[i], f[n + i]);
            if dp.abs().max(dq.abs()) > tol {
                report.push_str(&format!(
                    "; bus {}: dP={:.3e} dQ={:.3e}",
                    bus.id,
                    dp.to_f64_lossy(),
                    dq.to_f64_lossy()
                ));
            }
        }
        return Err(SimError::Init {
            max_mismatch: worst.to_f64_lossy(),
            report,
        });
    }
    fill(&x, &mut sol, &mut sg_angle);
    sol.max_mismatch = worst;
    sol.iterations = 0;

    let mut aligned = devices.clone();
    let mut sg = Vec::with_capacity(n_sg);
    for (i, u) in aligned.sgs.iter_mut().enumerate() {
        let p = sol.injection(model.ybus(), n + i).0;
        u.params.p_ref = p;
        sg.push(SgState {
            theta: sg_angle[i],
            omega: omega0,
            p_mech: p,
        });
    }
    let mut gfm = Vec::with_capacity(devices.gfms.len());
    for (g, u) in aligned.gfms.iter_mut().enumerate() {
        let j = n + n_sg + g;
        let (_, q) = sol.injection(model.ybus(), j);
        let v_t = sol.v[u.bus];
        // zero injection: V_set absorbs the reactive set-point term
        debug_assert!(q.abs() < T::lit(1e-9));
        u.params.v_set = v_t - u.params.m_q * u.params.q_set;
        gfm.push(GfmState {
            theta: sol.theta[j],
            omega: omega0,
            v_err: T::zero(),
            emf: sol.v[j],
            p_set: T::zero(),
        });
    }

    let n_gfm = gfm.len();
    let mut model0 = model.clone();
    model0.store_solution(&sol);
    let mut state = SystemState {
        step: 0,
        model: model0,
        sg,
        gfm,
        network: sol,
        p_con: vec![T::zero(); n_gfm],
        bounds: Vec::new(),
        bus_freq_dev: vec![T::zero(); n],
    };
    state.bounds = (0..n_gfm)
        .map(|g| {
            let (p, _) = state.network.injection(state.model.ybus(), n + n_sg + g);
            safety_bounds(state.gfm[g].omega, p, aligned.gfms[g].params.m_p, &control.config)
        })
        .collect();

    let rates = device_rates(&aligned, &state, omega0);
    let worst_rate = max_abs(&rates);
    if !(worst_rate < T::lit(1e-9).max(T::epsilon() * T::lit(1e3))) {
        return Err(SimError::Init {
            max_mismatch: worst.to_f64_lossy(),
            report: format!(
                "operating point found but device derivatives reach {:.3e}",
                worst_rate.to_f64_lossy()
            ),
        });
    }
    Ok((state, aligned))
}

/// Flattened device derivative vector at the state's own network solution.
fn device_rates<T: Scalar>(devices: &DeviceSet<T>, state: &SystemState<T>, omega0: T) -> Vec<T> {
    let mut y = pack(&state.sg, &state.gfm);
    let mut out = vec![T::zero(); y.len()];
    rates_at(devices, state, &state.network, &mut y, &mut out, omega0);
    out
}

const SG_WIDTH: usize = 3;
const GFM_WIDTH: usize = 4;

fn pack<T: Scalar>(sg: &[SgState<T>], gfm: &[GfmState<T>]) -> Vec<T> {
    let mut y = Vec::with_capacity(sg.len() * SG_WIDTH + gfm.len() * GFM_WIDTH);
    for s in sg {
        y.extend([s.theta, s.omega, s.p_mech]);
    }
    for s in gfm {
        y.extend([s.theta, s.omega, s.v_err, s.emf]);
    }
    y
}

fn unpack<T: Scalar>(y: &[T], sg: &mut [SgState<T>], gfm: &mut [GfmState<T>]) {
    for (i, s) in sg.iter_mut().enumerate() {
        let b = i * SG_WIDTH;
        s.theta = y[b];
        s.omega = y[b + 1];
        s.p_mech = y[b + 2];
    }
    let off = sg.len() * SG_WIDTH;
    for (g, s) in gfm.iter_mut().enumerate() {
        let b = off + g * GFM_WIDTH;
        s.theta = y[b];
        s.omega = y[b + 1];
        s.v_err = y[b + 2];
        s.emf = y[b + 3];
    }
}

/// Derivatives of the packed vector `y` given the network solution for the
/// sources described by `y`. Tripped devices have zero rates (frozen).
fn rates_at<T: Scalar>(
    devices: &DeviceSet<T>,
    state: &SystemState<T>,
    sol: &NetworkSolution<T>,
    y: &mut [T],
    out: &mut [T],
    omega0: T,
) {
    let model = &state.model;
    let n = model.n_network();
    let n_sg = devices.sgs.len();
    for (i, u) in devices.sgs.iter().enumerate() {
        let b = i * SG_WIDTH;
        if !model.couplings()[i].in_service {
            out[b..b + SG_WIDTH].fill(T::zero());
            continue;
        }
        let s = SgState {
            theta: y[b],
            omega: y[b + 1],
            p_mech: y[b + 2],
        };
        let p = sol.injection(model.ybus(), n + i).0;
        let r = sg_derivatives(&s, &u.params, p, omega0);
        out[b] = r.theta;
        out[b + 1] = r.omega;
        out[b + 2] = r.p_mech;
    }
    let off = n_sg * SG_WIDTH;
    for (g, u) in devices.gfms.iter().enumerate() {
        let b = off + g * GFM_WIDTH;
        if !model.couplings()[n_sg + g].in_service {
            out[b..b + GFM_WIDTH].fill(T::zero());
            continue;
        }
        let s = GfmState {
            theta: y[b],
            omega: y[b + 1],
            v_err: y[b + 2],
            emf: y[b + 3],
            p_set: state.gfm[g].p_set,
        };
        let (p, q) = sol.injection(model.ybus(), n + n_sg + g);
        let v_t = sol.v[u.bus];
        let r = gfm_derivatives(&s, &u.params, p, q, v_t, omega0);
        out[b] = r.theta;
        out[b + 1] = r.omega;
        out[b + 2] = r.v_err;
        out[b + 3] = r.emf;
    }
}

/// Inertia-weighted mean generator frequency over in-service machines.
pub fn coi_frequency<T: Scalar>(sg_states: &[SgState<T>], sg_params: &[SgParams<T>], in_service: &[bool]) -> Result<T, SimError> {
    // weighted mean of offsets from the first machine, exact for one machine
    let mut reference = None;
    let mut num = T::zero();
    let mut den = T::zero();
    for ((s, p), &on) in sg_states.iter().zip(sg_params).zip(in_service) {
        if on {
            let r = *reference.get_or_insert(s.omega);
            num += p.inertia * (s.omega - r);
            den += p.inertia;
        }
    }
    if let (Some(r), true) = (reference, den > T::zero()) {
        Ok(r + num / den)
    } else {
        Err(SimError::NoSynchronousGenerator)
    }
}

/// Logged quantities of one grid-forming unit.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct GfmRecord<T> {
    pub state: GfmState<T>,
    pub p_set_consensus: T,
    pub p_low: T,
    pub p_up: T,
    pub p_set: T,
    pub p_injected: T,
    pub q_injected: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord<T> {
    pub t: T,
    pub sg: Vec<SgState<T>>,
    pub gfm: Vec<GfmRecord<T>>,
    pub bus_v: Vec<T>,
    /// Frequency of every bus (network buses estimated, internal buses from
    /// the device state), rad/s.
    pub bus_omega: Vec<T>,
    pub coi_omega: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EventMarker<T> {
    pub t: T,
    pub label: String,
}

/// Everything recorded during one run, one record per grid time.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryLog<T> {
    pub mode: ControlMode,
    pub omega0: T,
    pub sg_names: Vec<String>,
    pub gfm_names: Vec<String>,
    pub gfm_droop: Vec<T>,
    pub bus_labels: Vec<String>,
    pub records: Vec<LogRecord<T>>,
    pub events: Vec<EventMarker<T>>,
}

impl<T: Scalar> TrajectoryLog<T> {
    pub fn times(&self) -> impl Iterator<Item = T> + '_ {
        self.records.iter().map(|r| r.t)
    }

    pub fn coi_hz(&self) -> Vec<T> {
        self.records.iter().map(|r| r.coi_omega / T::TAU()).collect()
    }

    pub fn last_event_time(&self) -> Option<T> {
        self.events.last().map(|e| e.t)
    }

    /// `max |m_pi P_i − m_pj P_j|` over unit pairs at record `k`.
    pub fn sharing_mismatch(&self, k: usize) -> T {
        let r = &self.records[k];
        let w: Vec<T> = r.gfm.iter().zip(&self.gfm_droop).map(|(g, &m)| m * g.p_set).collect();
        let hi = w.iter().copied().fold(T::neg_infinity(), T::max);
        let lo = w.iter().copied().fold(T::infinity(), T::min);
        if w.is_empty() {
            T::zero()
        } else {
            hi - lo
        }
    }
}

/// Per-bus maximum of `|f − f₀|` over the run, in Hz.
pub fn max_deviation_map<T: Scalar>(log: &TrajectoryLog<T>) -> Vec<(String, T)> {
    let mut worst = vec![T::zero(); log.bus_labels.len()];
    for r in &log.records {
        for (w, &om) in worst.iter_mut().zip(&r.bus_omega) {
            *w = w.max((om - log.omega0).abs() / T::TAU());
        }
    }
    log.bus_labels.iter().cloned().zip(worst).collect()
}

struct ScheduledEvent<T> {
    step: usize,
    event: TopologyEvent<T>,
    label: String,
}

/// Owns one run: immutable configuration plus the evolving state.
pub struct Simulator<T> {
    devices: DeviceSet<T>,
    control: ControlSetup<T>,
    plan: TickPlan,
    step: T,
    solver: SolverOptions<T>,
    abort_band: T,
    state: SystemState<T>,
    events: Vec<ScheduledEvent<T>>,
    next_event: usize,
    log: Option<TrajectoryLog<T>>,
}

impl<T: Scalar> Simulator<T> {
    /// Initialises the equilibrium and prepares a run. `scenario` events are
    /// resolved against the model up front so bad targets fail early.
    pub fn new(
        model: &GridModel<T>,
        devices: &DeviceSet<T>,
        control: ControlSetup<T>,
        schedule: ScheduleConfig<T>,
        scenario: &ScenarioScript<T>,
    ) -> Result<Self, SimError> {
        let plan = schedule.plan()?;
        let (state, devices) = initialize(model, devices, &control)?;
        let events = resolve_events(model, &devices, scenario, schedule.step)?;
        Ok(Self {
            devices,
            control,
            plan,
            step: schedule.step,
            solver: SolverOptions::default(),
            abort_band: T::lit(5.0) * T::TAU(),
            state,
            events,
            next_event: 0,
            log: None,
        })
    }

    pub fn with_solver(mut self, solver: SolverOptions<T>) -> Self {
        self.solver = solver;
        self
    }

    /// Frequency band (rad/s either side of nominal) beyond which a run aborts.
    pub fn with_abort_band(mut self, band: T) -> Self {
        self.abort_band = band;
        self
    }

    pub fn state(&self) -> &SystemState<T> {
        &self.state
    }

    pub fn devices(&self) -> &DeviceSet<T> {
        &self.devices
    }

    pub fn plan(&self) -> TickPlan {
        self.plan
    }

    pub fn time(&self) -> T {
        T::from_usize(self.state.step).expect("step index fits") * self.step
    }

    /// Overwrites device states, e.g. to start from a perturbed point, and
    /// re-solves the network for them.
    pub fn set_device_states(&mut self, sg: Vec<SgState<T>>, gfm: Vec<GfmState<T>>) -> Result<(), SimError> {
        if sg.len() != self.state.sg.len() || gfm.len() != self.state.gfm.len() {
            return Err(SimError::Config("device state count mismatch".into()));
        }
        self.state.sg = sg;
        self.state.gfm = gfm;
        self.resolve_network()
    }

    fn t_f64(&self) -> f64 {
        self.time().to_f64_lossy()
    }

    fn resolve_network(&mut self) -> Result<(), SimError> {
        let src = sources(&self.devices, &self.state.sg, &self.state.gfm);
        let sol =
            solve_network(&self.state.model, &src, Some(&self.state.network), &self.solver).map_err(|e| SimError::Network {
                t: self.t_f64(),
                source: e,
            })?;
        self.state.network = sol;
        Ok(())
    }

    fn gfm_injection(&self, g: usize) -> (T, T) {
        let j = self.state.model.internal_bus(self.devices.sgs.len() + g);
        self.state.network.injection(self.state.model.ybus(), j)
    }

    fn control_actions(&mut self) -> Result<(), SimError> {
        let k = self.state.step;
        let cfg = &self.control.config;
        let mode = self.control.mode;
        let n_gfm = self.state.gfm.len();
        if n_gfm == 0 {
            return Ok(());
        }
        if mode.uses_consensus() && k.is_multiple_of(self.plan.consensus_every) {
            let p: Vec<T> = self.state.gfm.iter().map(|s| s.p_set).collect();
            let w: Vec<T> = self.state.gfm.iter().map(|s| s.omega).collect();
            let m: Vec<T> = self.devices.gfms.iter().map(|u| u.params.m_p).collect();
            let next = consensus_round(&p, &w, &m, &self.control.graph, cfg)?;
            for (g, &p_next) in next.iter().enumerate() {
                if self.state.gfm_in_service(g) {
                    self.state.p_con[g] = p_next;
                    if mode == ControlMode::Consensus {
                        self.state.gfm[g].p_set = p_next;
                    }
                }
            }
        }
        if k.is_multiple_of(self.plan.safety_every) {
            for g in 0..n_gfm {
                if !self.state.gfm_in_service(g) {
                    continue;
                }
                let (p, q) = self.gfm_injection(g);
                let params = &self.devices.gfms[g].params;
                let bounds = safety_bounds(self.state.gfm[g].omega, p, params.m_p, cfg);
                self.state.bounds[g] = bounds;
                if mode == ControlMode::SafetyConsensus {
                    let composed = compose_safety_consensus(self.state.p_con[g], bounds);
                    self.state.gfm[g].p_set = capacity_clamp(composed, q, params.rating).value;
                }
            }
        }
        Ok(())
    }

    fn apply_due_events(&mut self) -> Result<bool, SimError> {
        let k = self.state.step;
        let mut any = false;
        while self.next_event < self.events.len() && self.events[self.next_event].step <= k {
            let ev = &self.events[self.next_event];
            let model = apply_topology_event(&self.state.model, &ev.event).map_err(|e| SimError::Event {
                t: self.t_f64(),
                event: ev.label.clone(),
                source: e,
            })?;
            if let TopologyEvent::DeviceTrip { device } = ev.event {
                if device >= self.devices.sgs.len() {
                    // a tripped storage unit stops participating
                    let g = device - self.devices.sgs.len();
                    self.state.gfm[g].p_set = T::zero();
                    self.state.p_con[g] = T::zero();
                }
            }
            let t = self.time();
            if let Some(log) = self.log.as_mut() {
                log.events.push(EventMarker {
                    t,
                    label: ev.label.clone(),
                });
            }
            self.state.model = model;
            self.next_event += 1;
            any = true;
        }
        if any {
            self.resolve_network()?;
        }
        Ok(any)
    }

    fn sg_in_service(&self) -> Vec<bool> {
        (0..self.state.sg.len()).map(|i| self.state.sg_in_service(i)).collect()
    }

    fn record(&self) -> Result<LogRecord<T>, SimError> {
        let st = &self.state;
        let n = st.model.n_network();
        let n_sg = st.sg.len();
        let sg_params: Vec<SgParams<T>> = self.devices.sgs.iter().map(|u| u.params.clone()).collect();
        let coi = coi_frequency(&st.sg, &sg_params, &self.sg_in_service())?;
        let omega0 = self.control.config.omega0;
        let gfm = (0..st.gfm.len())
            .map(|g| {
                let (p, q) = self.gfm_injection(g);
                GfmRecord {
                    state: st.gfm[g],
                    p_set_consensus: st.p_con[g],
                    p_low: st.bounds[g].p_low,
                    p_up: st.bounds[g].p_up,
                    p_set: st.gfm[g].p_set,
                    p_injected: p,
                    q_injected: q,
                }
            })
            .collect();
        let mut bus_omega: Vec<T> = st.bus_freq_dev.iter().map(|d| omega0 + *d).collect();
        bus_omega.extend(st.sg.iter().map(|s| s.omega));
        bus_omega.extend(st.gfm.iter().map(|s| s.omega));
        debug_assert_eq!(bus_omega.len(), n + n_sg + st.gfm.len());
        Ok(LogRecord {
            t: self.time(),
            sg: st.sg.clone(),
            gfm,
            bus_v: st.network.v.clone(),
            bus_omega,
            coi_omega: coi,
        })
    }

    fn check_band(&self) -> Result<(), SimError> {
        let omega0 = self.control.config.omega0;
        let n_sg = self.state.sg.len();
        let omegas = self
            .state
            .sg
            .iter()
            .map(|s| s.omega)
            .chain(self.state.gfm.iter().map(|s| s.omega))
            .enumerate();
        for (j, w) in omegas {
            if !self.state.model.couplings()[j].in_service {
                continue;
            }
            let name = self.devices.device_name(j).to_string();
            if !w.is_finite() {
                return Err(SimError::NonFinite {
                    t: self.t_f64(),
                    device: name,
                });
            }
            if (w - omega0).abs() > self.abort_band {
                return Err(SimError::FrequencyAbort {
                    t: self.t_f64(),
                    device: name,
                    freq_hz: (w / T::TAU()).to_f64_lossy(),
                    band_hz: (self.abort_band / T::TAU()).to_f64_lossy(),
                });
            }
        }
        let _ = n_sg;
        Ok(())
    }

    /// One classical RK4 step with a network solve at each stage.
    fn integrate(&mut self) -> Result<(), SimError> {
        let h = self.step;
        let half = h / T::lit(2.0);
        let omega0 = self.control.config.omega0;
        let y0 = pack(&self.state.sg, &self.state.gfm);
        let dim = y0.len();
        let mut k = [
            vec![T::zero(); dim],
            vec![T::zero(); dim],
            vec![T::zero(); dim],
            vec![T::zero(); dim],
        ];
        let mut ytmp = y0.clone();
        rates_at(&self.devices, &self.state, &self.state.network, &mut ytmp, &mut k[0], omega0);

        let mut warm = self.state.network.clone();
        let mut sg = self.state.sg.clone();
        let mut gfm = self.state.gfm.clone();
        for stage in 1..4 {
            let a = if stage == 3 { h } else { half };
            for i in 0..dim {
                ytmp[i] = y0[i] + a * k[stage - 1][i];
            }
            unpack(&ytmp, &mut sg, &mut gfm);
            let src = sources(&self.devices, &sg, &gfm);
            warm = solve_network(&self.state.model, &src, Some(&warm), &self.solver).map_err(|e| SimError::Network {
                t: self.t_f64(),
                source: e,
            })?;
            let (head, tail) = k.split_at_mut(stage);
            let _ = head;
            rates_at(&self.devices, &self.state, &warm, &mut ytmp, &mut tail[0], omega0);
        }
        let sixth = h / T::lit(6.0);
        let two = T::lit(2.0);
        let y1: Vec<T> = (0..dim)
            .map(|i| y0[i] + sixth * (k[0][i] + two * k[1][i] + two * k[2][i] + k[3][i]))
            .collect();

        let theta_before: Vec<T> = self.state.network.theta[..self.state.model.n_network()].to_vec();
        unpack(&y1, &mut self.state.sg, &mut self.state.gfm);
        self.state.step += 1;
        self.state.network = warm;
        self.resolve_network()?;

        // filtered angle derivative for network-bus frequency estimates
        let tf = self.control.config.safety_period;
        let a = T::one() - (-h / tf).exp();
        for (i, dev) in self.state.bus_freq_dev.iter_mut().enumerate() {
            let raw = (self.state.network.theta[i] - theta_before[i]) / h;
            *dev += a * (raw - *dev);
        }
        self.check_band()
    }

    /// Processes the current grid time (control, events, logging) and then
    /// advances one step. Returns `false` once the horizon is reached.
    pub fn step(&mut self) -> Result<bool, SimError> {
        self.control_actions()?;
        self.apply_due_events()?;
        if let Some(log) = self.log.as_ref() {
            let _ = log;
            let rec = self.record()?;
            self.log.as_mut().expect("checked").records.push(rec);
        } else {
            // keep the CoI metric error observable even without logging
            let sg_params: Vec<SgParams<T>> = self.devices.sgs.iter().map(|u| u.params.clone()).collect();
            coi_frequency(&self.state.sg, &sg_params, &self.sg_in_service())?;
        }
        if self.state.step >= self.plan.steps {
            return Ok(false);
        }
        self.integrate()?;
        Ok(true)
    }

    fn empty_log(&self) -> TrajectoryLog<T> {
        let model = &self.state.model;
        let bus_labels = (0..model.n_total())
            .map(|i| {
                if i < model.n_network() {
                    model.buses()[i].id.to_string()
                } else {
                    model.couplings()[i - model.n_network()].name.clone()
                }
            })
            .collect();
        TrajectoryLog {
            mode: self.control.mode,
            omega0: self.control.config.omega0,
            sg_names: self.devices.sgs.iter().map(|u| u.name.clone()).collect(),
            gfm_names: self.devices.gfms.iter().map(|u| u.name.clone()).collect(),
            gfm_droop: self.devices.gfms.iter().map(|u| u.params.m_p).collect(),
            bus_labels,
            records: Vec::with_capacity(self.plan.steps + 1),
            events: Vec::new(),
        }
    }

    /// Runs to the end time and returns the full log.
    pub fn run(mut self) -> Result<TrajectoryLog<T>, SimError> {
        self.log = Some(self.empty_log());
        while self.step()? {}
        Ok(self.log.take().expect("log present"))
    }

    /// Advances without logging, `n` grid steps at most.
    pub fn advance(&mut self, n: usize) -> Result<(), SimError> {
        for _ in 0..n {
            if !self.step()? {
                break;
            }
        }
        Ok(())
    }
}

fn resolve_events<T: Scalar>(
    model: &GridModel<T>,
    devices: &DeviceSet<T>,
    scenario: &ScenarioScript<T>,
    h: T,
) -> Result<Vec<ScheduledEvent<T>>, SimError> {
    let mut out = Vec::with_capacity(scenario.events.len());
    for ev in &scenario.events {
        let (event, label) = match &ev.kind {
            EventKind::LoadStep { bus, amount } => {
                let idx = model
                    .buses()
                    .iter()
                    .position(|b| b.id == *bus)
                    .ok_or_else(|| SimError::Config(format!("load step targets unknown bus {bus}")))?;
                let (dp, dq, what) = match *amount {
                    LoadAmount::Fraction(f) => (
                        f * model.base_load(),
                        T::zero(),
                        format!("{}% of total load", (f * T::lit(100.0)).to_f64_lossy()),
                    ),
                    LoadAmount::Absolute { p, q } => (p, q, format!("{} p.u.", p.to_f64_lossy())),
                };
                (
                    TopologyEvent::LoadStep {
                        bus: idx,
                        delta_p: dp,
                        delta_q: dq,
                    },
                    format!("load step at bus {bus}: {what}"),
                )
            }
            EventKind::GenTrip { device } => {
                let j = devices
                    .find(device)
                    .ok_or_else(|| SimError::Config(format!("trip targets unknown device {device}")))?;
                (TopologyEvent::DeviceTrip { device: j }, format!("trip {device}"))
            }
            EventKind::BranchTrip { branch } => {
                let b = model
                    .branches()
                    .iter()
                    .position(|br| br.id == *branch)
                    .ok_or_else(|| SimError::Config(format!("trip targets unknown branch {branch}")))?;
                (TopologyEvent::BranchTrip { branch: b }, format!("trip branch {branch}"))
            }
        };
        // first grid time at or after the scheduled time
        let r = ev.time / h;
        let near = r.round();
        let step = if (r - near).abs() <= grid_tolerance::<T>() * r.max(T::one()) {
            near
        } else {
            r.ceil()
        };
        out.push(ScheduledEvent {
            step: step.to_usize().unwrap_or(usize::MAX),
            event,
            label,
        });
    }
    Ok(out)
}

/// Convenience wrapper: initialise, run the scenario to the end time, return the log.
pub fn run_scenario<T: Scalar>(
    model: &GridModel<T>,
    devices: &DeviceSet<T>,
    control: ControlSetup<T>,
    schedule: ScheduleConfig<T>,
    scenario: &ScenarioScript<T>,
) -> Result<TrajectoryLog<T>, SimError> {
    Simulator::new(model, devices, control, schedule, scenario)?.run()
}
