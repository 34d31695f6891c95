//! System and scenario files (TOML), result serialisation and the CLI.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::control::{theorem1_preconditions, CommGraph, ControlConfig, ControlMode, Theorem1Report};
use crate::devices::{GfmParams, SgParams};
use crate::netmodel::{Branch, Bus, GridModel};
use crate::scalar::Scalar;
use crate::simulator::{
    max_deviation_map, run_scenario, ControlSetup, DeviceSet, GfmUnit, ScheduleConfig, SgUnit, SimError, TrajectoryLog,
};

/// Everything read from a system file.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec<T> {
    pub name: String,
    pub model: GridModel<T>,
    pub devices: DeviceSet<T>,
    pub control: ControlSetup<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LoadAmount<T> {
    /// Fraction of the base-case total active load.
    Fraction(T),
    Absolute {
        p: T,
        q: T,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum EventKind<T> {
    LoadStep { bus: u32, amount: LoadAmount<T> },
    GenTrip { device: String },
    BranchTrip { branch: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioEvent<T> {
    pub time: T,
    pub kind: EventKind<T>,
}

/// Ordered disturbance events plus optional run settings.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ScenarioScript<T> {
    pub events: Vec<ScenarioEvent<T>>,
    pub end_time: Option<T>,
    pub step: Option<T>,
}

impl<T: Scalar> ScenarioScript<T> {
    pub fn empty() -> Self {
        Self {
            events: Vec::new(),
            end_time: None,
            step: None,
        }
    }

    /// Checks every event target against a parsed system.
    pub fn check_targets(&self, system: &SystemSpec<T>) -> Result<(), ParseError> {
        let mut errors = Vec::new();
        for (k, ev) in self.events.iter().enumerate() {
            match &ev.kind {
                EventKind::LoadStep { bus, .. } => {
                    if !system.model.buses().iter().any(|b| b.id == *bus) {
                        errors.push(format!("event {}: unknown bus {bus}", k + 1));
                    }
                }
                EventKind::GenTrip { device } => {
                    if system.devices.find(device).is_none() {
                        errors.push(format!("event {}: unknown device `{device}`", k + 1));
                    }
                }
                EventKind::BranchTrip { branch } => {
                    if !system.model.branches().iter().any(|b| b.id == *branch) {
                        errors.push(format!("event {}: unknown branch `{branch}`", k + 1));
                    }
                }
            }
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ParseError::Invalid(errors))
        }
    }

    /// Largest single active-power step in the script, p.u.
    pub fn largest_step(&self, base_load: T) -> Option<T> {
        self.events
            .iter()
            .filter_map(|e| match e.kind {
                EventKind::LoadStep {
                    amount: LoadAmount::Fraction(f),
                    ..
                } => Some((f * base_load).abs()),
                EventKind::LoadStep {
                    amount: LoadAmount::Absolute { p, .. },
                    ..
                } => Some(p.abs()),
                _ => None,
            })
            .reduce(T::max)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParseError {
    #[error("syntax error: {0}")]
    Syntax(String),
    #[error("{} validation error(s):\n  {}", .0.len(), .0.join("\n  "))]
    Invalid(Vec<String>),
}

impl ParseError {
    pub fn messages(&self) -> Vec<String> {
        match self {
            ParseError::Syntax(m) => vec![m.clone()],
            ParseError::Invalid(v) => v.clone(),
        }
    }
}

// ---- on-disk shapes ----

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    control: Option<RawControl>,
    #[serde(default, rename = "bus")]
    buses: Vec<RawBus>,
    #[serde(default, rename = "branch")]
    branches: Vec<RawBranch>,
    #[serde(default, rename = "sg")]
    sgs: Vec<RawSg>,
    #[serde(default, rename = "gfm")]
    gfms: Vec<RawGfm>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawBus {
    id: u32,
    #[serde(default)]
    load_p: f64,
    #[serde(default)]
    load_q: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawBranch {
    id: String,
    from: u32,
    to: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    r: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    x: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    g: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[serde(default = "yes")]
    in_service: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawSg {
    id: String,
    bus: u32,
    inertia: f64,
    damping: f64,
    t_ch: f64,
    r_gov: f64,
    xd_prime: f64,
    emf: f64,
    #[serde(default)]
    dispatch: f64,
    #[serde(default)]
    slack: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawGfm {
    id: String,
    bus: u32,
    m_p: f64,
    m_q: f64,
    tau: f64,
    #[serde(default = "default_k_pv")]
    k_pv: f64,
    #[serde(default = "default_k_iv")]
    k_iv: f64,
    rating: f64,
    #[serde(default = "default_coupling_x")]
    coupling_x: f64,
    #[serde(default)]
    q_set: f64,
}

fn default_k_pv() -> f64 {
    GfmParams::<f64>::default_k_pv()
}
fn default_k_iv() -> f64 {
    GfmParams::<f64>::default_k_iv()
}
fn default_coupling_x() -> f64 {
    GfmParams::<f64>::default_coupling_reactance()
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawControl {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mode: Option<String>,
    #[serde(default = "d_zeta1")]
    zeta1: f64,
    #[serde(default = "d_zeta2")]
    zeta2: f64,
    #[serde(default = "d_alpha_bar")]
    alpha_bar: f64,
    #[serde(default = "d_p")]
    p: u32,
    #[serde(default = "d_f0")]
    f0_hz: f64,
    #[serde(default = "d_fmin")]
    f_min_hz: f64,
    #[serde(default = "d_fmax")]
    f_max_hz: f64,
    #[serde(default = "d_consensus")]
    consensus_period: f64,
    #[serde(default = "d_safety")]
    safety_period: f64,
    /// Undirected edges between grid-forming unit ids; ring when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    graph: Option<Vec<[String; 2]>>,
}

fn d_zeta1() -> f64 {
    2.0
}
fn d_zeta2() -> f64 {
    0.05
}
fn d_alpha_bar() -> f64 {
    5.0e6
}
fn d_p() -> u32 {
    3
}
fn d_f0() -> f64 {
    60.0
}
fn d_fmin() -> f64 {
    59.5
}
fn d_fmax() -> f64 {
    60.5
}
fn d_consensus() -> f64 {
    4.0
}
fn d_safety() -> f64 {
    0.05
}

impl Default for RawControl {
    fn default() -> Self {
        Self {
            mode: None,
            zeta1: d_zeta1(),
            zeta2: d_zeta2(),
            alpha_bar: d_alpha_bar(),
            p: d_p(),
            f0_hz: d_f0(),
            f_min_hz: d_fmin(),
            f_max_hz: d_fmax(),
            consensus_period: d_consensus(),
            safety_period: d_safety(),
            graph: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawScenario {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    run: Option<RawRun>,
    #[serde(default, rename = "event")]
    events: Vec<RawEvent>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawRun {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end_time: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    time: f64,
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bus: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    device: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    branch: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    delta_q: Option<f64>,
}

fn syntax(e: toml::de::Error) -> ParseError {
    ParseError::Syntax(e.to_string().trim_end().to_string())
}

/// Parses and validates a system description. All semantic problems are
/// reported together.
pub fn parse_system<T: Scalar>(text: &str) -> Result<SystemSpec<T>, ParseError> {
    let raw: RawSystem = toml::from_str(text).map_err(syntax)?;
    build_system(&raw)
}

fn build_system<T: Scalar>(raw: &RawSystem) -> Result<SystemSpec<T>, ParseError> {
    let mut errors: Vec<String> = Vec::new();
    let l = T::lit;

    let mut index: HashMap<u32, usize> = HashMap::new();
    let mut buses = Vec::with_capacity(raw.buses.len());
    for b in &raw.buses {
        if index.insert(b.id, buses.len()).is_some() {
            errors.push(format!("bus {}: duplicate id", b.id));
            continue;
        }
        if !b.load_p.is_finite() || !b.load_q.is_finite() {
            errors.push(format!("bus {}: non-finite load", b.id));
        }
        buses.push(if b.load_p != 0.0 || b.load_q != 0.0 {
            Bus::load(b.id, l(b.load_p), l(b.load_q))
        } else {
            Bus::passive(b.id)
        });
    }
    if buses.is_empty() {
        errors.push("system has no buses".into());
    }
    let lookup = |what: &str, id: u32, errors: &mut Vec<String>| -> Option<usize> {
        let r = index.get(&id).copied();
        if r.is_none() {
            errors.push(format!("{what}: unknown bus {id}"));
        }
        r
    };

    let mut branch_ids = BTreeSet::new();
    let mut branches = Vec::with_capacity(raw.branches.len());
    for br in &raw.branches {
        let what = format!("branch {}", br.id);
        if !branch_ids.insert(br.id.clone()) {
            errors.push(format!("{what}: duplicate id"));
        }
        let from = lookup(&what, br.from, &mut errors);
        let to = lookup(&what, br.to, &mut errors);
        if br.from == br.to {
            errors.push(format!("{what}: connects bus {} to itself", br.from));
        }
        let admittance = match (br.r, br.x, br.g, br.b) {
            (r, Some(x), None, None) => {
                let r = r.unwrap_or(0.0);
                if !(x > 0.0) || r < 0.0 {
                    errors.push(format!("{what}: needs x > 0 and r >= 0"));
                    None
                } else {
                    let d = r * r + x * x;
                    Some((r / d, -x / d))
                }
            }
            (None, None, g, Some(b)) => {
                let g = g.unwrap_or(0.0);
                if !(b < 0.0) || g < 0.0 {
                    errors.push(format!("{what}: needs b < 0 (inductive series admittance) and g >= 0"));
                    None
                } else {
                    Some((g, b))
                }
            }
            _ => {
                errors.push(format!("{what}: give either r/x or g/b"));
                None
            }
        };
        if let (Some(f), Some(t), Some((g, b))) = (from, to, admittance) {
            branches.push(Branch {
                id: br.id.clone(),
                from_bus: f,
                to_bus: t,
                conductance: l(g),
                susceptance: l(b),
                in_service: br.in_service,
            });
        }
    }

    let mut names = BTreeSet::new();
    let mut devices = DeviceSet::default();
    for sg in &raw.sgs {
        let what = format!("generator {}", sg.id);
        if !names.insert(sg.id.clone()) {
            errors.push(format!("{what}: duplicate device id"));
        }
        let bus = lookup(&what, sg.bus, &mut errors);
        let params = SgParams {
            inertia: l(sg.inertia),
            damping: l(sg.damping),
            t_ch: l(sg.t_ch),
            r_gov: l(sg.r_gov),
            transient_reactance: l(sg.xd_prime),
            emf: l(sg.emf),
            p_ref: T::zero(),
        };
        if let Err(m) = params.validate() {
            errors.push(format!("{what}: {m}"));
        }
        if let Some(bus) = bus {
            devices.sgs.push(SgUnit {
                name: sg.id.clone(),
                bus,
                params,
                dispatch: l(sg.dispatch),
                slack: sg.slack,
            });
        }
    }
    if raw.sgs.iter().filter(|s| s.slack).count() > 1 {
        errors.push("more than one slack generator".into());
    }
    for g in &raw.gfms {
        let what = format!("storage unit {}", g.id);
        if !names.insert(g.id.clone()) {
            errors.push(format!("{what}: duplicate device id"));
        }
        let bus = lookup(&what, g.bus, &mut errors);
        let params = GfmParams {
            m_p: l(g.m_p),
            m_q: l(g.m_q),
            tau: l(g.tau),
            k_pv: l(g.k_pv),
            k_iv: l(g.k_iv),
            rating: l(g.rating),
            coupling_reactance: l(g.coupling_x),
            v_set: T::one(),
            q_set: l(g.q_set),
        };
        if let Err(m) = params.validate() {
            errors.push(format!("{what}: {m}"));
        }
        if let Some(bus) = bus {
            devices.gfms.push(GfmUnit {
                name: g.id.clone(),
                bus,
                params,
            });
        }
    }

    let rc = raw.control.clone().unwrap_or_default();
    let tau_hz = |f: f64| l(f) * T::TAU();
    let config = ControlConfig {
        zeta1: l(rc.zeta1),
        zeta2: l(rc.zeta2),
        alpha_bar: l(rc.alpha_bar),
        exponent: rc.p,
        omega_min: tau_hz(rc.f_min_hz),
        omega_max: tau_hz(rc.f_max_hz),
        omega0: tau_hz(rc.f0_hz),
        consensus_period: l(rc.consensus_period),
        safety_period: l(rc.safety_period),
    };
    if let Err(e) = config.validate() {
        errors.push(format!("control: {e}"));
    }
    let mode = match rc.mode.as_deref() {
        None => ControlMode::SafetyConsensus,
        Some(s) => s.parse().unwrap_or_else(|e| {
            errors.push(format!("control: {e}"));
            ControlMode::SafetyConsensus
        }),
    };
    let n_gfm = raw.gfms.len();
    let graph = match &rc.graph {
        None => CommGraph::ring(n_gfm),
        Some(edges) => {
            let pos: HashMap<&str, usize> = raw.gfms.iter().enumerate().map(|(i, g)| (g.id.as_str(), i)).collect();
            let mut idx = Vec::with_capacity(edges.len());
            for [a, b] in edges {
                match (pos.get(a.as_str()), pos.get(b.as_str())) {
                    (Some(&i), Some(&j)) => idx.push((i, j)),
                    _ => errors.push(format!("control graph: edge {a}-{b} names an unknown storage unit")),
                }
            }
            CommGraph::from_edges(n_gfm, &idx).unwrap_or_else(|e| {
                errors.push(format!("control {e}"));
                CommGraph::ring(n_gfm)
            })
        }
    };

    if !errors.is_empty() {
        return Err(ParseError::Invalid(errors));
    }
    let model = GridModel::new(buses, branches, devices.couplings()).map_err(|e| ParseError::Invalid(vec![e.to_string()]))?;
    Ok(SystemSpec {
        name: raw.name.clone().unwrap_or_else(|| "system".into()),
        model,
        devices,
        control: ControlSetup { config, mode, graph },
    })
}

/// Parses a scenario; event targets are checked separately with
/// [`ScenarioScript::check_targets`].
pub fn parse_scenario<T: Scalar>(text: &str) -> Result<ScenarioScript<T>, ParseError> {
    let raw: RawScenario = toml::from_str(text).map_err(syntax)?;
    let mut errors = Vec::new();
    let mut events = Vec::with_capacity(raw.events.len());
    let mut last = 0.0f64;
    for (k, e) in raw.events.iter().enumerate() {
        let tag = format!("event {} (t = {})", k + 1, e.time);
        if !(e.time >= 0.0) || !e.time.is_finite() {
            errors.push(format!("{tag}: time must be non-negative"));
        } else if e.time < last {
            errors.push(format!("{tag}: times must be non-decreasing"));
        }
        last = last.max(e.time);
        let kind = match e.kind.as_str() {
            "load_step" => {
                let amount = match (e.fraction, e.delta_p, e.delta_q) {
                    (Some(f), None, None) => Some(LoadAmount::Fraction(T::lit(f))),
                    (None, Some(p), q) => Some(LoadAmount::Absolute {
                        p: T::lit(p),
                        q: T::lit(q.unwrap_or(0.0)),
                    }),
                    _ => {
                        errors.push(format!("{tag}: load_step needs either `fraction` or `delta_p`"));
                        None
                    }
                };
                match (e.bus, amount) {
                    (Some(bus), Some(amount)) => Some(EventKind::LoadStep { bus, amount }),
                    (None, _) => {
                        errors.push(format!("{tag}: load_step needs `bus`"));
                        None
                    }
                    _ => None,
                }
            }
            "gen_trip" => match &e.device {
                Some(d) => Some(EventKind::GenTrip { device: d.clone() }),
                None => {
                    errors.push(format!("{tag}: gen_trip needs `device`"));
                    None
                }
            },
            "branch_trip" => match &e.branch {
                Some(b) => Some(EventKind::BranchTrip { branch: b.clone() }),
                None => {
                    errors.push(format!("{tag}: branch_trip needs `branch`"));
                    None
                }
            },
            other => {
                errors.push(format!("{tag}: unknown kind `{other}`"));
                None
            }
        };
        if let Some(kind) = kind {
            events.push(ScenarioEvent {
                time: T::lit(e.time),
                kind,
            });
        }
    }
    let run = raw.run.unwrap_or(RawRun {
        end_time: None,
        step: None,
    });
    if let Some(t) = run.end_time {
        if !(t >= 0.0) {
            errors.push("run: end_time must be non-negative".into());
        }
    }
    if let Some(h) = run.step {
        if !(h > 0.0) {
            errors.push("run: step must be positive".into());
        }
    }
    if !errors.is_empty() {
        return Err(ParseError::Invalid(errors));
    }
    Ok(ScenarioScript {
        events,
        end_time: run.end_time.map(T::lit),
        step: run.step.map(T::lit),
    })
}

fn raw_from_system<T: Scalar>(sys: &SystemSpec<T>) -> RawSystem {
    let f = |x: T| x.to_f64_lossy();
    let model = &sys.model;
    let bus_id = |i: usize| model.buses()[i].id;
    let cfg = &sys.control.config;
    let gfm_names: Vec<&str> = sys.devices.gfms.iter().map(|g| g.name.as_str()).collect();
    RawSystem {
        name: Some(sys.name.clone()),
        control: Some(RawControl {
            mode: Some(sys.control.mode.name().to_string()),
            zeta1: f(cfg.zeta1),
            zeta2: f(cfg.zeta2),
            alpha_bar: f(cfg.alpha_bar),
            p: cfg.exponent,
            f0_hz: f(cfg.omega0 / T::TAU()),
            f_min_hz: f(cfg.omega_min / T::TAU()),
            f_max_hz: f(cfg.omega_max / T::TAU()),
            consensus_period: f(cfg.consensus_period),
            safety_period: f(cfg.safety_period),
            graph: Some(
                sys.control
                    .graph
                    .edges()
                    .into_iter()
                    .map(|(a, b)| [gfm_names[a].to_string(), gfm_names[b].to_string()])
                    .collect(),
            ),
        }),
        buses: model
            .buses()
            .iter()
            .map(|b| RawBus {
                id: b.id,
                load_p: f(b.load_active),
                load_q: f(b.load_reactive),
            })
            .collect(),
        branches: model
            .branches()
            .iter()
            .map(|br| RawBranch {
                id: br.id.clone(),
                from: bus_id(br.from_bus),
                to: bus_id(br.to_bus),
                r: None,
                x: None,
                g: Some(f(br.conductance)),
                b: Some(f(br.susceptance)),
                in_service: br.in_service,
            })
            .collect(),
        sgs: sys
            .devices
            .sgs
            .iter()
            .map(|u| RawSg {
                id: u.name.clone(),
                bus: bus_id(u.bus),
                inertia: f(u.params.inertia),
                damping: f(u.params.damping),
                t_ch: f(u.params.t_ch),
                r_gov: f(u.params.r_gov),
                xd_prime: f(u.params.transient_reactance),
                emf: f(u.params.emf),
                dispatch: f(u.dispatch),
                slack: u.slack,
            })
            .collect(),
        gfms: sys
            .devices
            .gfms
            .iter()
            .map(|u| RawGfm {
                id: u.name.clone(),
                bus: bus_id(u.bus),
                m_p: f(u.params.m_p),
                m_q: f(u.params.m_q),
                tau: f(u.params.tau),
                k_pv: f(u.params.k_pv),
                k_iv: f(u.params.k_iv),
                rating: f(u.params.rating),
                coupling_x: f(u.params.coupling_reactance),
                q_set: f(u.params.q_set),
            })
            .collect(),
    }
}

/// Canonical text form of a system: branches as series admittance, every
/// field explicit. Parsing the output reproduces the same model.
pub fn serialize_system<T: Scalar>(sys: &SystemSpec<T>) -> String {
    toml::to_string(&raw_from_system(sys)).expect("system serialises")
}

pub fn serialize_scenario<T: Scalar>(sc: &ScenarioScript<T>) -> String {
    let f = |x: T| x.to_f64_lossy();
    let raw = RawScenario {
        run: if sc.end_time.is_some() || sc.step.is_some() {
            Some(RawRun {
                end_time: sc.end_time.map(f),
                step: sc.step.map(f),
            })
        } else {
            None
        },
        events: sc
            .events
            .iter()
            .map(|e| {
                let mut r = RawEvent {
                    time: f(e.time),
                    kind: String::new(),
                    bus: None,
                    device: None,
                    branch: None,
                    fraction: None,
                    delta_p: None,
                    delta_q: None,
                };
                match &e.kind {
                    EventKind::LoadStep { bus, amount } => {
                        r.kind = "load_step".into();
                        r.bus = Some(*bus);
                        match *amount {
                            LoadAmount::Fraction(x) => r.fraction = Some(f(x)),
                            LoadAmount::Absolute { p, q } => {
                                r.delta_p = Some(f(p));
                                r.delta_q = Some(f(q));
                            }
                        }
                    }
                    EventKind::GenTrip { device } => {
                        r.kind = "gen_trip".into();
                        r.device = Some(device.clone());
                    }
                    EventKind::BranchTrip { branch } => {
                        r.kind = "branch_trip".into();
                        r.branch = Some(branch.clone());
                    }
                }
                r
            })
            .collect(),
    };
    toml::to_string(&raw).expect("scenario serialises")
}

// ---- results ----

/// Band used for settling and steady-state checks, Hz.
pub const SETTLING_BAND_HZ: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub mode: ControlMode,
    pub max_coi_deviation_hz: f64,
    /// How far CoI frequency went beyond the nearer limit; zero if never.
    pub violation_depth_hz: f64,
    pub steady_state_deviation_hz: f64,
    /// Time from the last event until CoI deviation stays inside the
    /// settling band; `None` if it never does.
    pub settling_time_s: Option<f64>,
    pub sharing_mismatch: f64,
    pub min_coi_hz: f64,
    pub max_coi_hz: f64,
}

pub fn summarize<T: Scalar>(log: &TrajectoryLog<T>, cfg: &ControlConfig<T>) -> RunSummary {
    let f0 = (cfg.omega0 / T::TAU()).to_f64_lossy();
    let f_min = (cfg.omega_min / T::TAU()).to_f64_lossy();
    let f_max = (cfg.omega_max / T::TAU()).to_f64_lossy();
    let coi: Vec<f64> = log.coi_hz().into_iter().map(|x| x.to_f64_lossy()).collect();
    let times: Vec<f64> = log.times().map(|x| x.to_f64_lossy()).collect();
    let lo = coi.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = coi.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let max_dev = coi.iter().map(|f| (f - f0).abs()).fold(0.0, f64::max);
    let depth = coi.iter().map(|&f| (f_min - f).max(f - f_max)).fold(0.0, f64::max);
    let steady = coi.last().map(|f| (f - f0).abs()).unwrap_or(0.0);
    let t_last = log.last_event_time().map(|t| t.to_f64_lossy()).unwrap_or(0.0);
    // last sample outside the band; settled from the next one on
    let settling = match coi.iter().rposition(|f| (f - f0).abs() > SETTLING_BAND_HZ) {
        None => Some(0.0),
        Some(k) if k + 1 < coi.len() => Some((times[k + 1] - t_last).max(0.0)),
        Some(_) => None,
    };
    let sharing = if log.records.is_empty() {
        0.0
    } else {
        log.sharing_mismatch(log.records.len() - 1).to_f64_lossy()
    };
    RunSummary {
        mode: log.mode,
        max_coi_deviation_hz: max_dev,
        violation_depth_hz: depth,
        steady_state_deviation_hz: steady,
        settling_time_s: settling,
        sharing_mismatch: sharing,
        min_coi_hz: if coi.is_empty() { f0 } else { lo },
        max_coi_hz: if coi.is_empty() { f0 } else { hi },
    }
}

/// Fixed-point rendering used in every output file.
pub fn fmt_num(x: f64) -> String {
    let s = format!("{x:.12}");
    if s == "-0.000000000000" {
        "0.000000000000".into()
    } else {
        s
    }
}

fn summary_lines(s: &RunSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "mode: {}", s.mode);
    let _ = writeln!(out, "max_coi_deviation_hz: {}", fmt_num(s.max_coi_deviation_hz));
    let _ = writeln!(out, "min_coi_hz: {}", fmt_num(s.min_coi_hz));
    let _ = writeln!(out, "max_coi_hz: {}", fmt_num(s.max_coi_hz));
    let _ = writeln!(out, "violation_depth_hz: {}", fmt_num(s.violation_depth_hz));
    let _ = writeln!(out, "steady_state_deviation_hz: {}", fmt_num(s.steady_state_deviation_hz));
    let _ = writeln!(
        out,
        "settling_time_s: {}",
        s.settling_time_s.map(fmt_num).unwrap_or_else(|| "none".into())
    );
    let _ = writeln!(out, "sharing_mismatch_pu: {}", fmt_num(s.sharing_mismatch));
    out
}

#[derive(Debug, Error)]
#[error("{path}: {source}")]
pub struct OutputError {
    pub path: PathBuf,
    pub source: std::io::Error,
}

fn io_at(path: &Path) -> impl Fn(std::io::Error) -> OutputError + '_ {
    move |source| OutputError {
        path: path.to_path_buf(),
        source,
    }
}

pub const TRAJECTORY_FILE: &str = "trajectories.csv";
pub const HEATMAP_FILE: &str = "heatmap.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Column names of `trajectories.csv` for a log.
pub fn trajectory_header<T>(log: &TrajectoryLog<T>) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend(log.sg_names.iter().map(|n| format!("{n}_f_hz")));
    for n in &log.gfm_names {
        for c in ["f_hz", "p_set_con", "p_low", "p_up", "p_set", "p_inj"] {
            h.push(format!("{n}_{c}"));
        }
    }
    h.push("coi_f_hz".into());
    h
}

/// Writes `trajectories.csv`, `heatmap.csv` and `summary.txt` into `out_dir`.
pub fn emit_results<T: Scalar>(log: &TrajectoryLog<T>, summary: &RunSummary, out_dir: &Path) -> Result<(), OutputError> {
    fs::create_dir_all(out_dir).map_err(io_at(out_dir))?;
    let hz = |w: T| fmt_num((w / T::TAU()).to_f64_lossy());
    let n = |x: T| fmt_num(x.to_f64_lossy());

    let path = out_dir.join(TRAJECTORY_FILE);
    let file = fs::File::create(&path).map_err(io_at(&path))?;
    let mut w = BufWriter::new(file);
    let mut line = trajectory_header(log).join(",");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(io_at(&path))?;
    for r in &log.records {
        line.clear();
        line.push_str(&n(r.t));
        for s in &r.sg {
            line.push(',');
            line.push_str(&hz(s.omega));
        }
        for g in &r.gfm {
            for v in [
                hz(g.state.omega),
                n(g.p_set_consensus),
                n(g.p_low),
                n(g.p_up),
                n(g.p_set),
                n(g.p_injected),
            ] {
                line.push(',');
                line.push_str(&v);
            }
        }
        line.push(',');
        line.push_str(&hz(r.coi_omega));
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io_at(&path))?;
    }
    w.flush().map_err(io_at(&path))?;

    let path = out_dir.join(HEATMAP_FILE);
    let mut text = String::from("bus,max_df_hz\n");
    for (label, df) in max_deviation_map(log) {
        let _ = writeln!(text, "{label},{}", n(df));
    }
    fs::write(&path, text).map_err(io_at(&path))?;

    let path = out_dir.join(SUMMARY_FILE);
    let mut text = summary_lines(summary);
    for e in &log.events {
        let _ = writeln!(text, "event: {} {}", n(e.t), e.label);
    }
    fs::write(&path, text).map_err(io_at(&path))?;
    Ok(())
}

// ---- command line ----

#[derive(Parser, Debug)]
#[command(
    name = "safecon",
    version,
    about = "Grid transient simulator with safety-consensus storage control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate one scenario in one control mode.
    Run(RunArgs),
    /// Check a system (and optionally a scenario) and report the stability preconditions.
    Validate {
        /// System file (TOML).
        #[arg(long)]
        system: PathBuf,
        /// Scenario file; its largest load step is used as the disturbance bound.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Run several control modes on the same scenario.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated control modes.
        #[arg(long, value_delimiter = ',', default_value = "no-secondary,consensus,safety-consensus")]
        modes: Vec<String>,
    },
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// no-secondary, consensus or safety-consensus; defaults to the system file's mode.
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// System file (TOML).
    #[arg(long)]
    system: PathBuf,
    /// Scenario file; without one the system is held at its initial equilibrium.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: PathBuf,
    /// Integration step, s.
    #[arg(long)]
    step: Option<f64>,
    /// Simulated seconds; overrides the scenario's end time.
    #[arg(long = "end-time")]
    end_time: Option<f64>,
    /// Re-run and require a bit-identical log (no randomness anywhere).
    #[arg(long = "seed-free")]
    seed_free: bool,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

enum Failure {
    Invalid(String),
    Runtime(String),
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::Control(_) => Failure::Invalid(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_system(path: &Path) -> Result<SystemSpec<f64>, Failure> {
    parse_system(&read(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn load_scenario(path: Option<&Path>, sys: &SystemSpec<f64>) -> Result<ScenarioScript<f64>, Failure> {
    let Some(path) = path else {
        return Ok(ScenarioScript::empty());
    };
    let sc: ScenarioScript<f64> =
        parse_scenario(&read(path)?).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    sc.check_targets(sys)
        .map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    Ok(sc)
}

/// Precondition report per storage unit. `ΔP` is the largest scripted load
/// step, or the unit rating when there is no script.
pub fn precondition_reports<T: Scalar>(
    sys: &SystemSpec<T>,
    scenario: Option<&ScenarioScript<T>>,
) -> Vec<(String, Theorem1Report<T>)> {
    let base = sys.model.base_load();
    sys.devices
        .gfms
        .iter()
        .map(|u| {
            let dp = scenario.and_then(|s| s.largest_step(base)).unwrap_or(u.params.rating);
            let r = theorem1_preconditions(u.params.m_p, u.params.tau, u.params.rating, &sys.control.config, dp);
            (u.name.clone(), r)
        })
        .collect()
}

fn schedule_for(common: &CommonArgs, sc: &ScenarioScript<f64>, cfg: &ControlConfig<f64>) -> ScheduleConfig<f64> {
    let step = common.step.or(sc.step).unwrap_or(1e-3);
    let end = common.end_time.or(sc.end_time).unwrap_or(60.0);
    ScheduleConfig::new(step, end, cfg)
}

fn simulate(
    sys: &SystemSpec<f64>,
    sc: &ScenarioScript<f64>,
    mode: ControlMode,
    common: &CommonArgs,
) -> Result<(TrajectoryLog<f64>, RunSummary), Failure> {
    let mut control = sys.control.clone();
    control.mode = mode;
    let schedule = schedule_for(common, sc, &control.config);
    schedule.plan()?;
    let log = run_scenario(&sys.model, &sys.devices, control.clone(), schedule, sc)?;
    if common.seed_free {
        let again = run_scenario(&sys.model, &sys.devices, control.clone(), schedule, sc)?;
        if again != log {
            return Err(Failure::Runtime(format!("seed-free audit failed: {mode} runs differ")));
        }
        eprintln!("seed-free audit passed for {mode}: repeated run is bit-identical");
    }
    let summary = summarize(&log, &control.config);
    Ok((log, summary))
}

fn emit(log: &TrajectoryLog<f64>, summary: &RunSummary, dir: &Path) -> Result<(), Failure> {
    emit_results(log, summary, dir).map_err(|e| Failure::Runtime(e.to_string()))
}

fn dispatch(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Validate { system, scenario } => {
            let sys = load_system(&system)?;
            let sc = match &scenario {
                Some(p) => Some(load_scenario(Some(p), &sys)?),
                None => None,
            };
            println!(
                "{}: {} buses, {} branches, {} generators, {} storage units",
                sys.name,
                sys.model.n_network(),
                sys.model.branches().len(),
                sys.devices.sgs.len(),
                sys.devices.gfms.len()
            );
            let mut warnings = 0;
            for (name, r) in precondition_reports(&sys, sc.as_ref()) {
                println!(
                    "{name}: delta = {:.6e} rad/s, set-point bound = {:.6} p.u., droop slack = {:.6}",
                    r.delta, r.setpoint_bound, r.droop_slack
                );
                for w in r.warnings() {
                    println!("  warning: {w}");
                    warnings += 1;
                }
            }
            if let Some(sc) = &sc {
                println!("scenario: {} events", sc.events.len());
            }
            println!("{warnings} warning(s)");
            Ok(())
        }
        Command::Run(args) => {
            let sys = load_system(&args.common.system)?;
            let sc = load_scenario(args.common.scenario.as_deref(), &sys)?;
            let mode = match &args.mode {
                Some(m) => m
                    .parse()
                    .map_err(|e: crate::control::ControlError| Failure::Invalid(e.to_string()))?,
                None => sys.control.mode,
            };
            let (log, summary) = simulate(&sys, &sc, mode, &args.common)?;
            emit(&log, &summary, &args.common.out)?;
            print!("{}", summary_lines(&summary));
            Ok(())
        }
        Command::Compare { common, modes } => {
            let sys = load_system(&common.system)?;
            let sc = load_scenario(common.scenario.as_deref(), &sys)?;
            let mut parsed = Vec::new();
            for m in &modes {
                let mode: ControlMode = m
                    .trim()
                    .parse()
                    .map_err(|e: crate::control::ControlError| Failure::Invalid(e.to_string()))?;
                if !parsed.contains(&mode) {
                    parsed.push(mode);
                }
            }
            // independent runs share only immutable inputs
            let results: Vec<Result<(TrajectoryLog<f64>, RunSummary), Failure>> = std::thread::scope(|s| {
                let (sys, sc, common) = (&sys, &sc, &common);
                let handles: Vec<_> = parsed
                    .iter()
                    .map(|&m| s.spawn(move || simulate(sys, sc, m, common)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("run thread")).collect()
            });
            let mut joint = String::new();
            for (mode, res) in parsed.iter().zip(results) {
                let (log, summary) = res?;
                emit(&log, &summary, &common.out.join(mode.name()))?;
                joint.push_str(&summary_lines(&summary));
                joint.push('\n');
            }
            let path = common.out.join(SUMMARY_FILE);
            fs::write(&path, &joint).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
            print!("{joint}");
            Ok(())
        }
    }
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn cli_main<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            EXIT_RUNTIME
        }
    }
}
