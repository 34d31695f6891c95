//! Static network description, bus admittance matrix and the algebraic
//! network solve that couples devices and constant-power loads.
//!
//! Every dynamic device is a voltage source `E∠θ` behind a coupling
//! reactance. Each device contributes one internal bus, appended after the
//! network buses: device `j` owns bus index `n_network + j`. Device internal
//! buses carry fixed boundary voltages during a solve; the unknowns are the
//! magnitudes and angles of the network (load and passive) buses.

use std::fmt;

use thiserror::Error;

use crate::linalg::lu_solve_in_place;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BusKind {
    SgInternal,
    GfmInternal,
    Load,
    Passive,
}

impl fmt::Display for BusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BusKind::SgInternal => "sg-internal",
            BusKind::GfmInternal => "gfm-internal",
            BusKind::Load => "load",
            BusKind::Passive => "passive",
        })
    }
}

/// A network bus. Voltage fields hold the most recent solved operating point.
#[derive(Clone, Debug, PartialEq)]
pub struct Bus<T> {
    pub id: u32,
    pub kind: BusKind,
    pub voltage_magnitude: T,
    pub voltage_angle: T,
    pub load_active: T,
    pub load_reactive: T,
}

impl<T: Scalar> Bus<T> {
    pub fn passive(id: u32) -> Self {
        Self {
            id,
            kind: BusKind::Passive,
            voltage_magnitude: T::one(),
            voltage_angle: T::zero(),
            load_active: T::zero(),
            load_reactive: T::zero(),
        }
    }

    pub fn load(id: u32, p: T, q: T) -> Self {
        Self {
            kind: BusKind::Load,
            load_active: p,
            load_reactive: q,
            ..Self::passive(id)
        }
    }
}

/// Series branch between two network buses, stored as its series admittance
/// `conductance + j·susceptance`.
#[derive(Clone, Debug, PartialEq)]
pub struct Branch<T> {
    pub id: String,
    pub from_bus: usize,
    pub to_bus: usize,
    pub conductance: T,
    pub susceptance: T,
    pub in_service: bool,
}

impl<T: Scalar> Branch<T> {
    /// Builds a branch from its series impedance `r + j·x`.
    pub fn from_impedance(id: impl Into<String>, from_bus: usize, to_bus: usize, r: T, x: T) -> Self {
        let d = r * r + x * x;
        Self {
            id: id.into(),
            from_bus,
            to_bus,
            conductance: r / d,
            susceptance: -x / d,
            in_service: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceKind {
    Sg,
    Gfm,
}

/// Coupling of one device's internal bus to its terminal network bus.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceCoupling<T> {
    pub name: String,
    pub kind: DeviceKind,
    pub terminal: usize,
    pub reactance: T,
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NetError {
    #[error("{element} references unknown bus index {bus}")]
    UnknownBus { element: String, bus: usize },
    #[error("{element} connects a bus to itself")]
    SelfLoop { element: String },
    #[error("{element}: coupling reactance must be positive")]
    NonPositiveReactance { element: String },
    #[error("network is islanded; buses cut off from the main island: {}", .buses.join(", "))]
    Islanded { buses: Vec<String> },
    #[error("no in-service source device remains in the network")]
    Sourceless,
    #[error("network solve did not converge after {iterations} iterations (max mismatch {max_mismatch:.3e} p.u.)")]
    NonConvergence {
        iterations: usize,
        max_mismatch: f64,
        mismatch: Vec<f64>,
    },
    #[error("singular network Jacobian at iteration {iteration}")]
    SingularJacobian { iteration: usize },
    #[error("non-positive voltage magnitude {value:.4} at bus {bus}")]
    NonPhysicalVoltage { bus: u32, value: f64 },
    #[error("unknown {kind} {index}")]
    UnknownElement { kind: &'static str, index: usize },
    #[error("{kind} {name} is already out of service")]
    AlreadyTripped { kind: &'static str, name: String },
    #[error("expected {expected} source voltages, got {got}")]
    SourceCount { expected: usize, got: usize },
}

/// Dense complex bus admittance matrix, `Y = G + jB`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct AdmittanceMatrix<T> {
    n: usize,
    g: Vec<T>,
    b: Vec<T>,
}

impl<T: Scalar> AdmittanceMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            g: vec![T::zero(); n * n],
            b: vec![T::zero(); n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn g(&self, i: usize, k: usize) -> T {
        self.g[i * self.n + k]
    }

    #[inline]
    pub fn b(&self, i: usize, k: usize) -> T {
        self.b[i * self.n + k]
    }

    pub fn is_zero(&self) -> bool {
        self.g.iter().chain(&self.b).all(|v| *v == T::zero())
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.n).all(|i| (0..i).all(|k| self.g(i, k) == self.g(k, i) && self.b(i, k) == self.b(k, i)))
    }

    fn add_series(&mut self, i: usize, k: usize, g: T, b: T) {
        let n = self.n;
        self.g[i * n + i] += g;
        self.b[i * n + i] += b;
        self.g[k * n + k] += g;
        self.b[k * n + k] += b;
        self.g[i * n + k] -= g;
        self.b[i * n + k] -= b;
        self.g[k * n + i] -= g;
        self.b[k * n + i] -= b;
    }
}

/// Assembles the bus admittance matrix over the network buses plus one
/// internal bus per device coupling. Out-of-service elements contribute
/// nothing. Connectivity is not checked here; see [`GridModel::new`].
pub fn assemble_ybus<T: Scalar>(
    buses: &[Bus<T>],
    branches: &[Branch<T>],
    couplings: &[DeviceCoupling<T>],
) -> Result<AdmittanceMatrix<T>, NetError> {
    let n_net = buses.len();
    let mut y = AdmittanceMatrix::zeros(n_net + couplings.len());
    for br in branches {
        for bus in [br.from_bus, br.to_bus] {
            if bus >= n_net {
                return Err(NetError::UnknownBus {
                    element: format!("branch {}", br.id),
                    bus,
                });
            }
        }
        if br.from_bus == br.to_bus {
            return Err(NetError::SelfLoop {
                element: format!("branch {}", br.id),
            });
        }
        if br.in_service {
            y.add_series(br.from_bus, br.to_bus, br.conductance, br.susceptance);
        }
    }
    for (j, c) in couplings.iter().enumerate() {
        if c.terminal >= n_net {
            return Err(NetError::UnknownBus {
                element: format!("device {}", c.name),
                bus: c.terminal,
            });
        }
        if !(c.reactance > T::zero()) {
            return Err(NetError::NonPositiveReactance {
                element: format!("device {}", c.name),
            });
        }
        if c.in_service {
            y.add_series(c.terminal, n_net + j, T::zero(), -c.reactance.recip());
        }
    }
    Ok(y)
}

/// Active and reactive power injected at bus `i`:
///
/// ```text
/// P_i = V_i Σ_k V_k [G_ik cos(θ_i − θ_k) + B_ik sin(θ_i − θ_k)]
/// Q_i = V_i Σ_k V_k [G_ik sin(θ_i − θ_k) − B_ik cos(θ_i − θ_k)]
/// ```
pub fn power_injection<T: Scalar>(v: &[T], theta: &[T], y: &AdmittanceMatrix<T>, i: usize) -> (T, T) {
    let n = y.dim();
    let mut p = T::zero();
    let mut q = T::zero();
    for k in 0..n {
        let g = y.g(i, k);
        let b = y.b(i, k);
        if g == T::zero() && b == T::zero() {
            continue;
        }
        let (s, c) = (theta[i] - theta[k]).sin_cos();
        p += v[k] * (g * c + b * s);
        q += v[k] * (g * s - b * c);
    }
    (v[i] * p, v[i] * q)
}

/// Topology or load change addressed to an existing element.
#[derive(Clone, Debug, PartialEq)]
pub enum TopologyEvent<T> {
    /// Adds `delta_p`/`delta_q` (p.u.) to the constant-power load of a network bus.
    LoadStep {
        bus: usize,
        delta_p: T,
        delta_q: T,
    },
    DeviceTrip {
        device: usize,
    },
    BranchTrip {
        branch: usize,
    },
}

/// Network buses, branches and device couplings plus the assembled Y-bus.
#[derive(Clone, Debug, PartialEq)]
pub struct GridModel<T> {
    buses: Vec<Bus<T>>,
    branches: Vec<Branch<T>>,
    couplings: Vec<DeviceCoupling<T>>,
    base_load: T,
    ybus: AdmittanceMatrix<T>,
}

impl<T: Scalar> GridModel<T> {
    /// Validates references, assembles Y and checks that every in-service
    /// element sits on one island with at least one source.
    pub fn new(buses: Vec<Bus<T>>, branches: Vec<Branch<T>>, couplings: Vec<DeviceCoupling<T>>) -> Result<Self, NetError> {
        let ybus = assemble_ybus(&buses, &branches, &couplings)?;
        let base_load = buses.iter().fold(T::zero(), |acc, b| acc + b.load_active);
        let model = Self {
            buses,
            branches,
            couplings,
            base_load,
            ybus,
        };
        model.check_connectivity()?;
        Ok(model)
    }

    pub fn buses(&self) -> &[Bus<T>] {
        &self.buses
    }

    pub fn branches(&self) -> &[Branch<T>] {
        &self.branches
    }

    pub fn couplings(&self) -> &[DeviceCoupling<T>] {
        &self.couplings
    }

    pub fn ybus(&self) -> &AdmittanceMatrix<T> {
        &self.ybus
    }

    pub fn n_network(&self) -> usize {
        self.buses.len()
    }

    /// Network buses plus device internal buses.
    pub fn n_total(&self) -> usize {
        self.buses.len() + self.couplings.len()
    }

    pub fn internal_bus(&self, device: usize) -> usize {
        self.buses.len() + device
    }

    /// Total active and reactive load currently connected.
    pub fn total_load(&self) -> (T, T) {
        self.buses
            .iter()
            .fold((T::zero(), T::zero()), |(p, q), b| (p + b.load_active, q + b.load_reactive))
    }

    /// Total active load when the model was first built; load steps given as
    /// a fraction of system load refer to this value.
    pub fn base_load(&self) -> T {
        self.base_load
    }

    /// Human-readable label for any bus index, network or internal.
    pub fn bus_label(&self, index: usize) -> String {
        if index < self.buses.len() {
            format!("bus {}", self.buses[index].id)
        } else {
            format!("{} internal", self.couplings[index - self.buses.len()].name)
        }
    }

    pub fn bus_kind(&self, index: usize) -> BusKind {
        if index < self.buses.len() {
            self.buses[index].kind
        } else {
            match self.couplings[index - self.buses.len()].kind {
                DeviceKind::Sg => BusKind::SgInternal,
                DeviceKind::Gfm => BusKind::GfmInternal,
            }
        }
    }

    pub fn check_connectivity(&self) -> Result<(), NetError> {
        let n_net = self.buses.len();
        let n = self.n_total();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        let mut union = |a: usize, b: usize| {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra != rb {
                parent[ra.max(rb)] = ra.min(rb);
            }
        };
        for br in self.branches.iter().filter(|b| b.in_service) {
            union(br.from_bus, br.to_bus);
        }
        for (j, c) in self.couplings.iter().enumerate().filter(|(_, c)| c.in_service) {
            union(c.terminal, n_net + j);
        }
        let Some(first_source) = self.couplings.iter().position(|c| c.in_service) else {
            return Err(NetError::Sourceless);
        };
        let root = find(&mut parent, n_net + first_source);
        let mut cut = Vec::new();
        for i in 0..n {
            let active = i < n_net || self.couplings[i - n_net].in_service;
            if active && find(&mut parent, i) != root {
                cut.push(self.bus_label(i));
            }
        }
        if cut.is_empty() {
            Ok(())
        } else {
            Err(NetError::Islanded { buses: cut })
        }
    }

    /// Stores a solved operating point on the network buses.
    pub fn store_solution(&mut self, sol: &NetworkSolution<T>) {
        for (i, bus) in self.buses.iter_mut().enumerate() {
            bus.voltage_magnitude = sol.v[i];
            bus.voltage_angle = sol.theta[i];
        }
    }
}

/// Applies one event and returns the updated model with Y re-assembled.
pub fn apply_topology_event<T: Scalar>(model: &GridModel<T>, event: &TopologyEvent<T>) -> Result<GridModel<T>, NetError> {
    let mut next = model.clone();
    match *event {
        TopologyEvent::LoadStep { bus, delta_p, delta_q } => {
            let b = next
                .buses
                .get_mut(bus)
                .ok_or(NetError::UnknownElement { kind: "bus", index: bus })?;
            b.kind = BusKind::Load;
            b.load_active += delta_p;
            b.load_reactive += delta_q;
            // load changes leave Y untouched
            return Ok(next);
        }
        TopologyEvent::DeviceTrip { device } => {
            let c = next.couplings.get_mut(device).ok_or(NetError::UnknownElement {
                kind: "device",
                index: device,
            })?;
            if !c.in_service {
                return Err(NetError::AlreadyTripped {
                    kind: "device",
                    name: c.name.clone(),
                });
            }
            c.in_service = false;
        }
        TopologyEvent::BranchTrip { branch } => {
            let br = next.branches.get_mut(branch).ok_or(NetError::UnknownElement {
                kind: "branch",
                index: branch,
            })?;
            if !br.in_service {
                return Err(NetError::AlreadyTripped {
                    kind: "branch",
                    name: br.id.clone(),
                });
            }
            br.in_service = false;
        }
    }
    next.ybus = assemble_ybus(&next.buses, &next.branches, &next.couplings)?;
    next.check_connectivity()?;
    Ok(next)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions<T> {
    pub tolerance: T,
    pub max_iterations: usize,
}

impl<T: Scalar> Default for SolverOptions<T> {
    fn default() -> Self {
        // 1e-8 p.u.; single precision cannot resolve that, so floor it
        Self {
            tolerance: T::lit(1e-8).max(T::epsilon() * T::lit(1e3)),
            max_iterations: 20,
        }
    }
}

/// Internal EMF of a device: magnitude and angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SourceVoltage<T> {
    pub magnitude: T,
    pub angle: T,
}

/// Voltage profile over all buses (network first, then device internal buses).
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSolution<T> {
    pub v: Vec<T>,
    pub theta: Vec<T>,
    /// Newton updates performed to reach this point.
    pub iterations: usize,
    pub max_mismatch: T,
}

impl<T: Scalar> NetworkSolution<T> {
    /// Flat start: unit magnitudes, all network angles at `angle`.
    pub fn flat(n_total: usize, angle: T) -> Self {
        Self {
            v: vec![T::one(); n_total],
            theta: vec![angle; n_total],
            iterations: 0,
            max_mismatch: T::infinity(),
        }
    }

    pub fn injection(&self, y: &AdmittanceMatrix<T>, bus: usize) -> (T, T) {
        power_injection(&self.v, &self.theta, y, bus)
    }

    /// `(P, Q)` injected by each device at its internal bus.
    pub fn device_injections(&self, model: &GridModel<T>) -> Vec<(T, T)> {
        (0..model.couplings().len())
            .map(|j| {
                if model.couplings()[j].in_service {
                    self.injection(model.ybus(), model.internal_bus(j))
                } else {
                    (T::zero(), T::zero())
                }
            })
            .collect()
    }
}

fn mismatch<T: Scalar>(model: &GridModel<T>, v: &[T], theta: &[T], out: &mut [T], pq: &mut [(T, T)]) -> T {
    let n = model.n_network();
    let mut worst = T::zero();
    for (i, bus) in model.buses().iter().enumerate() {
        let (p, q) = power_injection(v, theta, model.ybus(), i);
        pq[i] = (p, q);
        out[i] = p + bus.load_active;
        out[n + i] = q + bus.load_reactive;
        worst = worst.max(out[i].abs()).max(out[n + i].abs());
        if !out[i].is_finite() || !out[n + i].is_finite() {
            worst = T::infinity();
        }
    }
    worst
}

/// Row-major Jacobian of the network-bus mismatch with respect to
/// `[θ_0..θ_{n-1}, V_0..V_{n-1}]`.
pub(crate) fn network_jacobian<T: Scalar>(model: &GridModel<T>, v: &[T], theta: &[T], pq: &[(T, T)], jac: &mut [T]) {
    let n = model.n_network();
    let m = 2 * n;
    let y = model.ybus();
    for x in jac.iter_mut() {
        *x = T::zero();
    }
    for i in 0..n {
        let (p_i, q_i) = pq[i];
        for k in 0..n {
            if k == i {
                let gii = y.g(i, i);
                let bii = y.b(i, i);
                jac[i * m + i] = -q_i - bii * v[i] * v[i];
                jac[i * m + n + i] = p_i / v[i] + gii * v[i];
                jac[(n + i) * m + i] = p_i - gii * v[i] * v[i];
                jac[(n + i) * m + n + i] = q_i / v[i] - bii * v[i];
            } else {
                let g = y.g(i, k);
                let b = y.b(i, k);
                if g == T::zero() && b == T::zero() {
                    continue;
                }
                let (s, c) = (theta[i] - theta[k]).sin_cos();
                let gs_bc = g * s - b * c;
                let gc_bs = g * c + b * s;
                jac[i * m + k] = v[i] * v[k] * gs_bc;
                jac[i * m + n + k] = v[i] * gc_bs;
                jac[(n + i) * m + k] = -v[i] * v[k] * gc_bs;
                jac[(n + i) * m + n + k] = v[i] * gs_bc;
            }
        }
    }
}

/// Newton–Raphson solve of the constant-power balance at every network bus,
/// with device internal buses held at `sources`. `start` supplies the warm
/// start; without one the network starts flat at the first source angle.
pub fn solve_network<T: Scalar>(
    model: &GridModel<T>,
    sources: &[SourceVoltage<T>],
    start: Option<&NetworkSolution<T>>,
    opts: &SolverOptions<T>,
) -> Result<NetworkSolution<T>, NetError> {
    let n = model.n_network();
    let n_dev = model.couplings().len();
    if sources.len() != n_dev {
        return Err(NetError::SourceCount {
            expected: n_dev,
            got: sources.len(),
        });
    }
    let mut sol = match start {
        Some(s) if s.v.len() == model.n_total() => s.clone(),
        _ => {
            let angle = model
                .couplings()
                .iter()
                .zip(sources)
                .find(|(c, _)| c.in_service)
                .map(|(_, s)| s.angle)
                .unwrap_or_else(T::zero);
            NetworkSolution::flat(model.n_total(), angle)
        }
    };
    for (j, src) in sources.iter().enumerate() {
        sol.v[n + j] = src.magnitude;
        sol.theta[n + j] = src.angle;
    }

    let m = 2 * n;
    let mut f = vec![T::zero(); m];
    let mut pq = vec![(T::zero(), T::zero()); n];
    let mut jac = vec![T::zero(); m * m];
    for iter in 0..=opts.max_iterations {
        let worst = mismatch(model, &sol.v, &sol.theta, &mut f, &mut pq);
        if worst <= opts.tolerance {
            sol.iterations = iter;
            sol.max_mismatch = worst;
            if let Some((i, bus)) = model.buses().iter().enumerate().find(|(i, _)| !(sol.v[*i] > T::zero())) {
                return Err(NetError::NonPhysicalVoltage {
                    bus: bus.id,
                    value: sol.v[i].to_f64_lossy(),
                });
            }
            return Ok(sol);
        }
        if iter == opts.max_iterations || !worst.is_finite() {
            return Err(NetError::NonConvergence {
                iterations: iter,
                max_mismatch: worst.to_f64_lossy(),
                mismatch: f.iter().map(|x| x.to_f64_lossy()).collect(),
            });
        }
        network_jacobian(model, &sol.v, &sol.theta, &pq, &mut jac);
        for x in f.iter_mut() {
            *x = -*x;
        }
        if !lu_solve_in_place(&mut jac, &mut f, m) {
            return Err(NetError::SingularJacobian { iteration: iter });
        }
        for i in 0..n {
            sol.theta[i] += f[i];
            sol.v[i] += f[n + i];
        }
    }
    unreachable!("loop returns on its last iteration")
}
