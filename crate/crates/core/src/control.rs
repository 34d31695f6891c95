//! Set-point pipeline for the grid-forming units: distributed consensus
//! update, barrier-function safety bounds, their min/max composition and the
//! apparent-power capacity clamp.
//!
//! All functions are stateless; the simulator owns the zero-order hold and
//! decides when each layer runs.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ControlMode {
    /// Droop only; set-points stay at their initial values.
    NoSecondary,
    Consensus,
    SafetyConsensus,
}

impl ControlMode {
    pub const ALL: [ControlMode; 3] = [ControlMode::NoSecondary, ControlMode::Consensus, ControlMode::SafetyConsensus];

    pub fn name(self) -> &'static str {
        match self {
            ControlMode::NoSecondary => "no-secondary",
            ControlMode::Consensus => "consensus",
            ControlMode::SafetyConsensus => "safety-consensus",
        }
    }

    pub fn uses_consensus(self) -> bool {
        !matches!(self, ControlMode::NoSecondary)
    }
}

impl fmt::Display for ControlMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ControlMode {
    type Err = ControlError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ControlMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ControlError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    #[error("unknown control mode `{0}` (expected no-secondary, consensus or safety-consensus)")]
    UnknownMode(String),
    #[error("invalid control configuration: {0}")]
    Config(String),
    #[error("communication graph: {0}")]
    Graph(String),
}

/// Gains, limits and layer periods. Frequencies in rad/s, periods in s.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlConfig<T> {
    pub zeta1: T,
    pub zeta2: T,
    /// Barrier gain ᾱ = τα/m_p as entered by the user.
    pub alpha_bar: T,
    /// Odd positive barrier exponent.
    pub exponent: u32,
    pub omega_min: T,
    pub omega_max: T,
    pub omega0: T,
    pub consensus_period: T,
    pub safety_period: T,
}

impl<T: Scalar> ControlConfig<T> {
    /// Gains from the reference study at 60 Hz with a ±0.5 Hz band.
    pub fn reference() -> Self {
        let two_pi = T::TAU();
        Self {
            zeta1: T::lit(2.0),
            zeta2: T::lit(0.05),
            alpha_bar: T::lit(5.0e6),
            exponent: 3,
            omega_min: T::lit(59.5) * two_pi,
            omega_max: T::lit(60.5) * two_pi,
            omega0: T::lit(60.0) * two_pi,
            consensus_period: T::lit(4.0),
            safety_period: T::lit(0.05),
        }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let bad = |m: &str| Err(ControlError::Config(m.to_string()));
        if !(self.zeta1 > T::zero()) || !(self.zeta2 > T::zero()) {
            return bad("consensus gains must be positive");
        }
        if !(self.alpha_bar > T::zero()) {
            return bad("barrier gain must be positive");
        }
        if self.exponent == 0 || self.exponent.is_multiple_of(2) {
            return bad("barrier exponent must be an odd positive integer");
        }
        if !(self.omega_min < self.omega0 && self.omega0 < self.omega_max) {
            return bad("frequency limits must bracket the nominal frequency");
        }
        if !(self.safety_period > T::zero()) || !(self.consensus_period > T::zero()) {
            return bad("layer periods must be positive");
        }
        if self.safety_period > self.consensus_period {
            return bad("safety period must not exceed the consensus period");
        }
        Ok(())
    }

    /// Half-width of the safe band; the smaller side when limits are asymmetric.
    pub fn delta_omega(&self) -> T {
        (self.omega0 - self.omega_min).min(self.omega_max - self.omega0)
    }

    pub fn is_symmetric(&self) -> bool {
        let lo = self.omega0 - self.omega_min;
        let hi = self.omega_max - self.omega0;
        (lo - hi).abs() <= T::epsilon() * T::lit(16.0) * self.omega0
    }
}

/// Undirected neighbour sets over the grid-forming units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommGraph {
    neighbors: Vec<Vec<usize>>,
}

impl CommGraph {
    /// Builds the graph from an undirected edge list, rejecting self-loops,
    /// out-of-range endpoints and disconnected graphs.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self, ControlError> {
        let mut neighbors = vec![Vec::new(); n];
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(ControlError::Graph(format!(
                    "edge ({a}, {b}) references a unit outside 0..{n}"
                )));
            }
            if a == b {
                return Err(ControlError::Graph(format!("self-loop on unit {a}")));
            }
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        let g = Self { neighbors };
        g.check_connected()?;
        Ok(g)
    }

    /// Ring over unit indices: 0-1, 1-2, ..., (n-1)-0.
    pub fn ring(n: usize) -> Self {
        let edges: Vec<(usize, usize)> = match n {
            0 | 1 => Vec::new(),
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Self::from_edges(n, &edges).expect("ring is connected")
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.neighbors.iter().enumerate() {
            out.extend(list.iter().filter(|&&j| j > i).map(|&j| (i, j)));
        }
        out
    }

    fn check_connected(&self) -> Result<(), ControlError> {
        let n = self.neighbors.len();
        if n <= 1 {
            return Ok(());
        }
        if let Some(i) = self.neighbors.iter().position(|l| l.is_empty()) {
            return Err(ControlError::Graph(format!("unit {i} has no neighbours")));
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &self.neighbors[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            Some(i) => Err(ControlError::Graph(format!("unit {i} is not reachable from unit 0"))),
            None => Ok(()),
        }
    }
}

/// One agent's consensus step:
/// `P⁺ = P − ζ₁(ω − ω₀) − ζ₂ Σⱼ (m_pᵢ Pᵢ − m_pⱼ Pⱼ)`.
///
/// `neighbor_setpoints` holds `(m_pⱼ, Pⱼ)` as published at the previous tick.
pub fn consensus_update<T: Scalar>(p_set: T, omega: T, m_p: T, neighbor_setpoints: &[(T, T)], cfg: &ControlConfig<T>) -> T {
    let own = m_p * p_set;
    let mismatch = neighbor_setpoints
        .iter()
        .fold(T::zero(), |acc, &(m_j, p_j)| acc + (own - m_j * p_j));
    p_set - cfg.zeta1 * (omega - cfg.omega0) - cfg.zeta2 * mismatch
}

/// Synchronous (Jacobi) consensus round over all units: every unit reads its
/// neighbours' values from `p_set` before anyone is updated.
pub fn consensus_round<T: Scalar>(
    p_set: &[T],
    omega: &[T],
    m_p: &[T],
    graph: &CommGraph,
    cfg: &ControlConfig<T>,
) -> Result<Vec<T>, ControlError> {
    let n = p_set.len();
    if omega.len() != n || m_p.len() != n || graph.len() != n {
        return Err(ControlError::Config(format!(
            "consensus round over {n} set-points with {} frequencies, {} gains and a {}-unit graph",
            omega.len(),
            m_p.len(),
            graph.len()
        )));
    }
    let mut scratch = Vec::new();
    Ok((0..n)
        .map(|i| {
            if n > 1 && graph.neighbors(i).is_empty() {
                unreachable!("graph construction rejects isolated units");
            }
            scratch.clear();
            scratch.extend(graph.neighbors(i).iter().map(|&j| (m_p[j], p_set[j])));
            consensus_update(p_set[i], omega[i], m_p[i], &scratch, cfg)
        })
        .collect())
}

/// Barrier values `(ω − ω_min, ω_max − ω)`.
pub fn barrier_values<T: Scalar>(omega: T, cfg: &ControlConfig<T>) -> (T, T) {
    (omega - cfg.omega_min, cfg.omega_max - omega)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SetpointBounds<T> {
    pub p_low: T,
    pub p_up: T,
}

/// Set-point interval that enforces the barrier derivative conditions:
///
/// ```text
/// P_low = P + (ω − ω₀)/m_p − ᾱ (ω − ω_min)^p
/// P_up  = P + (ω − ω₀)/m_p − ᾱ (ω − ω_max)^p
/// ```
pub fn safety_bounds<T: Scalar>(omega: T, p_injected: T, m_p: T, cfg: &ControlConfig<T>) -> SetpointBounds<T> {
    let base = p_injected + (omega - cfg.omega0) / m_p;
    let e = cfg.exponent as i32;
    SetpointBounds {
        p_low: base - cfg.alpha_bar * (omega - cfg.omega_min).powi(e),
        p_up: base - cfg.alpha_bar * (omega - cfg.omega_max).powi(e),
    }
}

/// `min(P_up, max(P_low, P_con))`. Closed interval: a consensus value on a
/// bound is returned unchanged.
///
/// # Panics
/// If `p_low > p_up`, which valid configurations cannot produce.
pub fn compose_safety_consensus<T: Scalar>(p_con: T, bounds: SetpointBounds<T>) -> T {
    assert!(
        !(bounds.p_low > bounds.p_up),
        "inverted safety bounds: {:?} > {:?}",
        bounds.p_low,
        bounds.p_up
    );
    bounds.p_up.min(bounds.p_low.max(p_con))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClampOutcome<T> {
    pub value: T,
    /// Reactive loading alone exceeded the rating; the set-point was zeroed.
    pub reactive_overload: bool,
}

/// Symmetric clamp to `±√(S² − Q²)`.
pub fn capacity_clamp<T: Scalar>(p_hat: T, q: T, rating: T) -> ClampOutcome<T> {
    if q.abs() > rating {
        return ClampOutcome {
            value: T::zero(),
            reactive_overload: true,
        };
    }
    let p_max = (rating * rating - q * q).sqrt();
    ClampOutcome {
        value: p_max.min((-p_max).max(p_hat)),
        reactive_overload: false,
    }
}

/// Barrier gain α recovered from ᾱ: `α = ᾱ m_p / τ`.
pub fn barrier_alpha<T: Scalar>(m_p: T, tau: T, cfg: &ControlConfig<T>) -> T {
    cfg.alpha_bar * m_p / tau
}

/// Overshoot margin `δ = (2Δω / (α m_p))^(1/p)`.
pub fn delta_margin<T: Scalar>(m_p: T, tau: T, cfg: &ControlConfig<T>) -> T {
    let alpha = barrier_alpha(m_p, tau, cfg);
    let arg = T::lit(2.0) * cfg.delta_omega() / (alpha * m_p);
    arg.powf(T::one() / T::from_u32(cfg.exponent).expect("small integer"))
}

/// Sufficient conditions for the minimally-invasive and safety-enforcing
/// properties, with numeric slack for each.
#[derive(Clone, Debug, PartialEq)]
pub struct Theorem1Report<T> {
    pub delta_omega: T,
    /// False when the limits were asymmetric and Δω was taken as the smaller side.
    pub symmetric_limits: bool,
    pub alpha: T,
    pub delta: T,
    /// `m_p < Δω / S`
    pub droop_ok: bool,
    pub droop_slack: T,
    /// `S − δ/m_p`: consensus set-points must stay strictly inside ±this.
    pub setpoint_bound: T,
    pub setpoint_bound_positive: bool,
    /// Upper end of the admissible disturbance interval, `Δω/m_p − S`.
    pub disturbance_limit: T,
    pub disturbance_interval_nonempty: bool,
    /// `ΔP ∈ (0, Δω/m_p − S)`
    pub disturbance_ok: bool,
}

impl<T: Scalar> Theorem1Report<T> {
    pub fn all_hold(&self) -> bool {
        self.droop_ok && self.setpoint_bound_positive && self.disturbance_interval_nonempty && self.disturbance_ok
    }

    pub fn consensus_admissible(&self, p_con: T) -> bool {
        p_con.abs() < self.setpoint_bound
    }

    /// Human-readable warnings for every failed condition.
    pub fn warnings(&self) -> Vec<String> {
        let mut w = Vec::new();
        if !self.symmetric_limits {
            w.push(format!(
                "asymmetric frequency limits; using the smaller half-width {:.6} rad/s",
                self.delta_omega.to_f64_lossy()
            ));
        }
        if !self.droop_ok {
            w.push(format!(
                "droop gain too large: m_p exceeds dw/S by {:.6}",
                (-self.droop_slack).to_f64_lossy()
            ));
        }
        if !self.setpoint_bound_positive {
            w.push(format!(
                "no admissible consensus set-point: S - delta/m_p = {:.6}",
                self.setpoint_bound.to_f64_lossy()
            ));
        }
        if !self.disturbance_interval_nonempty {
            w.push(format!(
                "empty disturbance interval: dw/m_p - S = {:.6}",
                self.disturbance_limit.to_f64_lossy()
            ));
        } else if !self.disturbance_ok {
            w.push(format!(
                "disturbance bound outside (0, {:.6})",
                self.disturbance_limit.to_f64_lossy()
            ));
        }
        w
    }
}

/// Evaluates the droop, set-point and disturbance conditions for one unit.
pub fn theorem1_preconditions<T: Scalar>(m_p: T, tau: T, rating: T, cfg: &ControlConfig<T>, delta_p: T) -> Theorem1Report<T> {
    let dw = cfg.delta_omega();
    let delta = delta_margin(m_p, tau, cfg);
    let droop_slack = dw / rating - m_p;
    let setpoint_bound = rating - delta / m_p;
    let disturbance_limit = dw / m_p - rating;
    Theorem1Report {
        delta_omega: dw,
        symmetric_limits: cfg.is_symmetric(),
        alpha: barrier_alpha(m_p, tau, cfg),
        delta,
        droop_ok: droop_slack > T::zero(),
        droop_slack,
        setpoint_bound,
        setpoint_bound_positive: setpoint_bound > T::zero(),
        disturbance_limit,
        disturbance_interval_nonempty: disturbance_limit > T::zero(),
        disturbance_ok: delta_p > T::zero() && delta_p < disturbance_limit,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn cfg() -> ControlConfig<f64> {
        ControlConfig::reference()
    }

    #[test]
    fn reference_config_is_valid() {
        let c = cfg();
        c.validate().unwrap();
        assert!(c.is_symmetric());
        assert_relative_eq!(c.delta_omega(), PI, epsilon = 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.exponent = 2;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.safety_period = 5.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.omega_min = c.omega0 + 1.0;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.zeta2 = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn mode_names_round_trip() {
        for m in ControlMode::ALL {
            assert_eq!(m.name().parse::<ControlMode>().unwrap(), m);
        }
        assert!("secondary".parse::<ControlMode>().is_err());
    }

    #[test]
    fn consensus_examples() {
        let c = cfg();
        let w0 = c.omega0;
        // balanced and nominal: unchanged
        assert_eq!(consensus_update(0.4, w0, 0.05, &[(0.05, 0.4), (0.05, 0.4)], &c), 0.4);
        // frequency term only
        let p = consensus_update(0.0, w0 + 0.1, 0.05, &[(0.05, 0.0)], &c);
        assert_relative_eq!(p, -0.2, epsilon = 1e-9);
        // sharing term only
        let p = consensus_update(1.0, w0, 0.05, &[(0.05, 0.0)], &c);
        assert_relative_eq!(p - 1.0, -0.0025, epsilon = 1e-15);
    }

    #[test]
    fn graph_validation() {
        assert!(CommGraph::from_edges(3, &[(0, 1)]).is_err());
        assert!(CommGraph::from_edges(2, &[(0, 0)]).is_err());
        assert!(CommGraph::from_edges(2, &[(0, 5)]).is_err());
        assert!(CommGraph::from_edges(4, &[(0, 1), (2, 3)]).is_err());
        let g = CommGraph::ring(4);
        assert_eq!(g.neighbors(0), &[1, 3]);
        assert_eq!(g.edges(), vec![(0, 1), (0, 3), (1, 2), (2, 3)]);
        assert_eq!(CommGraph::ring(1).neighbors(0), &[] as &[usize]);
    }

    #[test]
    fn barrier_examples() {
        let c = cfg();
        assert_eq!(barrier_values(c.omega_min, &c).0, 0.0);
        let (lo, hi) = barrier_values(c.omega0, &c);
        assert_relative_eq!(lo, hi, epsilon = 1e-9);
        assert_relative_eq!(lo, PI, epsilon = 1e-9);
        assert_relative_eq!(barrier_values(c.omega_max + 0.1, &c).1, -0.1, epsilon = 1e-9);
    }

    #[test]
    fn safety_bound_examples() {
        let c = cfg();
        let b = safety_bounds(c.omega_max, 0.0, 0.05, &c);
        assert_relative_eq!(b.p_up, PI / 0.05, epsilon = 1e-6);
        assert_relative_eq!(b.p_up, 62.831_853, epsilon = 1e-5);

        // deep inside the band: ±ᾱ π³ ≈ ±1.5503e8
        let b = safety_bounds(c.omega0, 0.0, 0.05, &c);
        assert_relative_eq!(b.p_low, -155_031_383.401_499_1, max_relative = 1e-9);
        assert_relative_eq!(b.p_up, 155_031_383.401_499_1, max_relative = 1e-9);
    }

    #[test]
    fn compose_examples() {
        let b = SetpointBounds { p_low: -1.0, p_up: 1.0 };
        assert_eq!(compose_safety_consensus(0.3, b), 0.3);
        assert_eq!(compose_safety_consensus(2.0, b), 1.0);
        assert_eq!(compose_safety_consensus(-2.0, b), -1.0);
        assert_eq!(compose_safety_consensus(1.0, b), 1.0);
    }

    #[test]
    #[should_panic(expected = "inverted safety bounds")]
    fn compose_rejects_inverted_bounds() {
        compose_safety_consensus(0.0, SetpointBounds { p_low: 1.0, p_up: -1.0 });
    }

    #[test]
    fn capacity_examples() {
        assert_relative_eq!(capacity_clamp(0.9, 0.6, 1.0).value, 0.8, epsilon = 1e-12);
        assert_eq!(capacity_clamp(0.5, 0.0, 1.0).value, 0.5);
        assert_relative_eq!(capacity_clamp(-0.95, 0.6, 1.0).value, -0.8, epsilon = 1e-12);
        let over = capacity_clamp(0.5, 1.2, 1.0);
        assert_eq!(over.value, 0.0);
        assert!(over.reactive_overload);
    }

    #[test]
    fn delta_margin_examples() {
        let c = cfg();
        assert_relative_eq!(barrier_alpha(0.05, 0.01, &c), 2.5e7, max_relative = 1e-12);
        // (2π / (2.5e7 · 0.05))^(1/3)
        let d = delta_margin(0.05, 0.01, &c);
        assert_relative_eq!(d, 0.017_129_970_633_890_23, max_relative = 1e-8);
        assert_relative_eq!(d / (2.0 * PI), 2.726_3e-3, max_relative = 1e-4);

        let mut lin = c.clone();
        lin.exponent = 1;
        let alpha = barrier_alpha(0.05, 0.01, &lin);
        assert_relative_eq!(
            delta_margin(0.05, 0.01, &lin),
            2.0 * PI / (alpha * 0.05),
            max_relative = 1e-12
        );

        let mut stiff = c.clone();
        stiff.alpha_bar = 1e30;
        assert!(delta_margin(0.05, 0.01, &stiff) < 1e-8);
    }

    #[test]
    fn theorem1_examples() {
        let c = cfg();
        let r = theorem1_preconditions(0.05, 0.01, 1.0, &c, 1.0);
        assert!(r.droop_ok);
        assert_relative_eq!(r.droop_slack, PI - 0.05, epsilon = 1e-9);
        assert_relative_eq!(r.setpoint_bound, 1.0 - 0.017_129_970_633_890_23 / 0.05, epsilon = 1e-7);
        assert_relative_eq!(r.setpoint_bound, 0.657, epsilon = 1e-3);
        assert_relative_eq!(r.disturbance_limit, PI / 0.05 - 1.0, epsilon = 1e-9);
        assert!(r.disturbance_interval_nonempty && r.disturbance_ok && r.all_hold());
        assert!(r.warnings().is_empty());

        let bad = theorem1_preconditions(5.0, 0.01, 1.0, &c, 1.0);
        assert!(!bad.droop_ok);
        assert!(!bad.warnings().is_empty());
    }

    #[test]
    fn asymmetric_limits_use_smaller_side() {
        let mut c = cfg();
        c.omega_max = c.omega0 + 1.0;
        assert!(!c.is_symmetric());
        assert_eq!(c.delta_omega(), 1.0);
        let r = theorem1_preconditions(0.05, 0.01, 1.0, &c, 1.0);
        assert!(!r.symmetric_limits);
        assert!(r.warnings()[0].contains("asymmetric"));
    }

    #[test]
    fn bounds_in_f32() {
        let c = ControlConfig::<f32>::reference();
        let b = safety_bounds(c.omega_max, 0.0_f32, 0.05, &c);
        assert!((b.p_up - 62.83).abs() < 0.05);
    }

    proptest! {
        #[test]
        fn bound_width_matches_odd_power_difference(dw in -6.0f64..6.0, p in -2.0f64..2.0) {
            let c = cfg();
            let w = c.omega0 + dw;
            let b = safety_bounds(w, p, 0.05, &c);
            prop_assert!(b.p_low < b.p_up);
            let width = c.alpha_bar * ((w - c.omega_min).powi(3) - (w - c.omega_max).powi(3));
            prop_assert!(((b.p_up - b.p_low) - width).abs() <= 1e-6 * width.abs().max(1.0));
        }

        #[test]
        fn clamps_are_idempotent(pc in -5.0f64..5.0, lo in -3.0f64..0.0, w in 0.0f64..3.0, q in -0.9f64..0.9) {
            let b = SetpointBounds { p_low: lo, p_up: lo + w };
            let once = compose_safety_consensus(pc, b);
            prop_assert_eq!(compose_safety_consensus(once, b), once);
            let c1 = capacity_clamp(pc, q, 1.0).value;
            prop_assert_eq!(capacity_clamp(c1, q, 1.0).value, c1);
            prop_assert!(crate::devices::check_capacity(c1, q, 1.0));
        }

        #[test]
        fn consensus_round_conserves_sum_at_uniform_droop(
            p in proptest::collection::vec(-1.0f64..1.0, 5),
            extra in proptest::collection::vec((0usize..5, 0usize..5), 0..6),
        ) {
            let c = cfg();
            let mut edges: Vec<(usize, usize)> = (0..5).map(|i| (i, (i + 1) % 5)).collect();
            edges.extend(extra.into_iter().filter(|(a, b)| a != b));
            let g = CommGraph::from_edges(5, &edges).unwrap();
            let omega = vec![c.omega0; 5];
            let m_p = vec![0.05; 5];
            let next = consensus_round(&p, &omega, &m_p, &g, &c).unwrap();
            let before: f64 = p.iter().sum();
            let after: f64 = next.iter().sum();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
