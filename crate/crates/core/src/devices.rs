//! Continuous-time dynamics of synchronous generators and grid-forming
//! storage inverters.
//!
//! Frequencies are angular (rad/s) and powers are per-unit on the system base.
//! Both device types expose their internal EMF to the network as a voltage
//! source; these functions only evaluate state derivatives given the network
//! feedback of the current stage.

use crate::scalar::Scalar;

/// Classical generator with a first-order governor-turbine.
///
/// `p_ref` is the governor load reference. It is zero in the bare model and is
/// set by initialisation to the pre-disturbance dispatch so that a loaded
/// machine starts in equilibrium.
#[derive(Clone, Debug, PartialEq)]
pub struct SgParams<T> {
    pub inertia: T,
    pub damping: T,
    pub t_ch: T,
    pub r_gov: T,
    pub transient_reactance: T,
    pub emf: T,
    pub p_ref: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgState<T> {
    pub theta: T,
    pub omega: T,
    pub p_mech: T,
}

/// Time derivatives of an [`SgState`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SgRates<T> {
    pub theta: T,
    pub omega: T,
    pub p_mech: T,
}

impl<T: Scalar> SgParams<T> {
    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.inertia > T::zero()) {
            return Err("inertia must be positive");
        }
        if !(self.t_ch > T::zero()) {
            return Err("governor time constant must be positive");
        }
        if !(self.r_gov > T::zero()) {
            return Err("governor droop must be positive");
        }
        if !(self.transient_reactance > T::zero()) {
            return Err("transient reactance must be positive");
        }
        if !(self.emf > T::zero()) {
            return Err("internal EMF must be positive");
        }
        if self.damping < T::zero() {
            return Err("damping must be non-negative");
        }
        Ok(())
    }
}

/// Swing equation and governor:
///
/// ```text
/// θ'  = ω − ω₀
/// ω'  = [D(ω₀ − ω) + P_m − P] / M
/// P_m' = −[P_m − P_ref + (ω − ω₀)/R_gov] / T_ch
/// ```
pub fn sg_derivatives<T: Scalar>(state: &SgState<T>, params: &SgParams<T>, p_injected: T, omega0: T) -> SgRates<T> {
    let dw = state.omega - omega0;
    SgRates {
        theta: dw,
        omega: (params.damping * (-dw) + state.p_mech - p_injected) / params.inertia,
        p_mech: -(state.p_mech - params.p_ref + dw / params.r_gov) / params.t_ch,
    }
}

/// Droop-controlled grid-forming inverter with a Q-V PI loop.
#[derive(Clone, Debug, PartialEq)]
pub struct GfmParams<T> {
    pub m_p: T,
    pub m_q: T,
    pub tau: T,
    pub k_pv: T,
    pub k_iv: T,
    /// Apparent power rating.
    pub rating: T,
    pub coupling_reactance: T,
    pub v_set: T,
    pub q_set: T,
}

impl<T: Scalar> GfmParams<T> {
    /// Artifact defaults for the Q-V loop gains (no published values).
    pub fn default_k_pv() -> T {
        T::one()
    }

    pub fn default_k_iv() -> T {
        T::lit(10.0)
    }

    pub fn default_coupling_reactance() -> T {
        T::lit(0.05)
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        if !(self.m_p > T::zero()) {
            return Err("droop gain must be positive");
        }
        if !(self.m_q > T::zero()) {
            return Err("reactive droop gain must be positive");
        }
        if !(self.tau > T::zero()) {
            return Err("filter time constant must be positive");
        }
        if !(self.rating > T::zero()) {
            return Err("apparent power rating must be positive");
        }
        if !(self.coupling_reactance > T::zero()) {
            return Err("coupling reactance must be positive");
        }
        if self.k_pv < T::zero() || self.k_iv < T::zero() {
            return Err("Q-V loop gains must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GfmState<T> {
    pub theta: T,
    pub omega: T,
    pub v_err: T,
    pub emf: T,
    /// Active power set-point; written by the control layer, not integrated.
    pub p_set: T,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GfmRates<T> {
    pub theta: T,
    pub omega: T,
    pub v_err: T,
    pub emf: T,
}

/// P-ω and Q-V droop dynamics:
///
/// ```text
/// θ'  = ω − ω₀
/// ω'  = [ω₀ − ω + m_p (P_set − P)] / τ
/// Vᵉ' = [V_set − V − Vᵉ + m_q (Q_set − Q)] / τ
/// E'  = k_pv Vᵉ' + k_iv Vᵉ
/// ```
pub fn gfm_derivatives<T: Scalar>(
    state: &GfmState<T>,
    params: &GfmParams<T>,
    p_injected: T,
    q_injected: T,
    v_terminal: T,
    omega0: T,
) -> GfmRates<T> {
    let v_err = (params.v_set - v_terminal - state.v_err + params.m_q * (params.q_set - q_injected)) / params.tau;
    GfmRates {
        theta: state.omega - omega0,
        omega: (omega0 - state.omega + params.m_p * (state.p_set - p_injected)) / params.tau,
        v_err,
        emf: params.k_pv * v_err + params.k_iv * state.v_err,
    }
}

/// `√(P² + Q²) ≤ S`, with a 1e-9 allowance.
pub fn check_capacity<T: Scalar>(p: T, q: T, rating: T) -> bool {
    p.hypot(q) <= rating + T::lit(1e-9)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const W0: f64 = 376.991_118_430_775_2;

    fn sg() -> SgParams<f64> {
        SgParams {
            inertia: 10.0,
            damping: 1.0,
            t_ch: 0.5,
            r_gov: 0.05,
            transient_reactance: 0.1,
            emf: 1.0,
            p_ref: 0.0,
        }
    }

    fn gfm() -> GfmParams<f64> {
        GfmParams {
            m_p: 0.05,
            m_q: 0.05,
            tau: 0.01,
            k_pv: 1.0,
            k_iv: 10.0,
            rating: 1.0,
            coupling_reactance: 0.05,
            v_set: 1.0,
            q_set: 0.0,
        }
    }

    #[test]
    fn sg_equilibrium() {
        let s = SgState {
            theta: 0.3,
            omega: W0,
            p_mech: 0.0,
        };
        let r = sg_derivatives(&s, &sg(), 0.0, W0);
        assert_eq!(r, SgRates::default());
    }

    #[test]
    fn sg_swing_example() {
        let s = SgState {
            theta: 0.0,
            omega: W0,
            p_mech: 0.0,
        };
        let r = sg_derivatives(&s, &sg(), 0.5, W0);
        assert_relative_eq!(r.omega, -0.05, epsilon = 1e-15);
    }

    #[test]
    fn sg_governor_example() {
        let s = SgState {
            theta: 0.0,
            omega: W0 + 0.1,
            p_mech: 0.0,
        };
        let r = sg_derivatives(&s, &sg(), 0.0, W0);
        assert_relative_eq!(r.p_mech, -4.0, epsilon = 1e-9);
        assert_relative_eq!(r.theta, 0.1, epsilon = 1e-9);
    }

    #[test]
    fn sg_governor_settles_to_droop() {
        // hold ω − ω₀ = Δ and integrate only the governor
        let p = sg();
        let delta = 0.02;
        let s0 = SgState {
            theta: 0.0,
            omega: W0 + delta,
            p_mech: 0.0,
        };
        let mut pm = 0.0;
        let h = 1e-3;
        for _ in 0..20_000 {
            let f = |pm: f64| sg_derivatives(&SgState { p_mech: pm, ..s0 }, &p, 0.0, W0).p_mech;
            let k1 = f(pm);
            let k2 = f(pm + 0.5 * h * k1);
            let k3 = f(pm + 0.5 * h * k2);
            let k4 = f(pm + h * k3);
            pm += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        }
        assert!((pm + delta / p.r_gov).abs() < 1e-6);
    }

    #[test]
    fn gfm_equilibrium() {
        let p = gfm();
        let s = GfmState {
            theta: 0.1,
            omega: W0,
            v_err: 0.0,
            emf: 1.0,
            p_set: 0.2,
        };
        let r = gfm_derivatives(&s, &p, 0.2, 0.0, 1.0, W0);
        assert_eq!(r, GfmRates::default());
    }

    #[test]
    fn gfm_frequency_example() {
        let s = GfmState {
            theta: 0.0,
            omega: W0,
            v_err: 0.0,
            emf: 1.0,
            p_set: 0.0,
        };
        let r = gfm_derivatives(&s, &gfm(), 0.1, 0.0, 1.0, W0);
        assert_relative_eq!(r.omega, -0.5, epsilon = 1e-12);
    }

    #[test]
    fn gfm_voltage_example() {
        let s = GfmState {
            theta: 0.0,
            omega: W0,
            v_err: 0.0,
            emf: 1.0,
            p_set: 0.0,
        };
        let r = gfm_derivatives(&s, &gfm(), 0.0, 0.0, 0.98, W0);
        assert_relative_eq!(r.v_err, 2.0, epsilon = 1e-12);
        assert_relative_eq!(r.emf, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn gfm_in_f32() {
        let p = GfmParams {
            m_p: 0.05_f32,
            m_q: 0.05,
            tau: 0.01,
            k_pv: 1.0,
            k_iv: 10.0,
            rating: 1.0,
            coupling_reactance: 0.05,
            v_set: 1.0,
            q_set: 0.0,
        };
        let w0 = W0 as f32;
        let s = GfmState {
            theta: 0.0,
            omega: w0,
            v_err: 0.0,
            emf: 1.0,
            p_set: 0.0,
        };
        let r = gfm_derivatives(&s, &p, 0.1, 0.0, 1.0, w0);
        assert!((r.omega + 0.5).abs() < 1e-5);
    }

    #[test]
    fn capacity_examples() {
        assert!(check_capacity(0.6, 0.8, 1.0));
        assert!(check_capacity(0.0, 0.0, 0.3));
        assert!(!check_capacity(1.0, 0.1, 1.0));
    }

    #[test]
    fn validation_messages() {
        let mut p = gfm();
        p.m_p = 0.0;
        assert_eq!(p.validate(), Err("droop gain must be positive"));
        let mut s = sg();
        s.inertia = -1.0;
        assert!(s.validate().is_err());
    }

    // Flow of the GFM frequency/voltage subsystem with frozen network feedback.
    fn gfm_flow(s: GfmState<f64>, p: &GfmParams<f64>, h: f64) -> GfmState<f64> {
        let f = |x: &GfmState<f64>| gfm_derivatives(x, p, 0.3, -0.1, 0.99, W0);
        let add = |x: &GfmState<f64>, k: &GfmRates<f64>, a: f64| GfmState {
            theta: x.theta + a * k.theta,
            omega: x.omega + a * k.omega,
            v_err: x.v_err + a * k.v_err,
            emf: x.emf + a * k.emf,
            p_set: x.p_set,
        };
        let k1 = f(&s);
        let k2 = f(&add(&s, &k1, h / 2.0));
        let k3 = f(&add(&s, &k2, h / 2.0));
        let k4 = f(&add(&s, &k3, h));
        GfmState {
            theta: s.theta + h / 6.0 * (k1.theta + 2.0 * k2.theta + 2.0 * k3.theta + k4.theta),
            omega: s.omega + h / 6.0 * (k1.omega + 2.0 * k2.omega + 2.0 * k3.omega + k4.omega),
            v_err: s.v_err + h / 6.0 * (k1.v_err + 2.0 * k2.v_err + 2.0 * k3.v_err + k4.v_err),
            emf: s.emf + h / 6.0 * (k1.emf + 2.0 * k2.emf + 2.0 * k3.emf + k4.emf),
            p_set: s.p_set,
        }
    }

    proptest! {
        #[test]
        fn sg_equilibrium_for_any_parameters(
            m in 0.1f64..50.0, d in 0.0f64..5.0, t in 0.05f64..5.0, r in 0.01f64..10.0, pe in -3.0f64..3.0,
        ) {
            let p = SgParams { inertia: m, damping: d, t_ch: t, r_gov: r, transient_reactance: 0.1, emf: 1.0, p_ref: pe };
            let s = SgState { theta: 0.0, omega: W0, p_mech: pe };
            let rates = sg_derivatives(&s, &p, pe, W0);
            prop_assert!(rates.theta.abs() < 1e-12 && rates.omega.abs() < 1e-12 && rates.p_mech.abs() < 1e-12);
        }

        #[test]
        fn gfm_equilibrium_for_any_parameters(
            mp in 0.01f64..5.0, mq in 0.01f64..1.0, tau in 0.005f64..0.1, pset in -1.0f64..1.0, v in 0.9f64..1.1,
        ) {
            let p = GfmParams { m_p: mp, m_q: mq, tau, k_pv: 1.0, k_iv: 10.0, rating: 2.0, coupling_reactance: 0.05, v_set: v, q_set: 0.0 };
            let s = GfmState { theta: 0.0, omega: W0, v_err: 0.0, emf: v, p_set: pset };
            let r = gfm_derivatives(&s, &p, pset, 0.0, v, W0);
            prop_assert!(r.theta.abs() < 1e-12 && r.omega.abs() < 1e-12 && r.v_err.abs() < 1e-12 && r.emf.abs() < 1e-12);
        }

        #[test]
        fn gfm_rates_match_flow_differences(
            dw in -2.0f64..2.0, ve in -0.05f64..0.05, e in 0.9f64..1.1, pset in -0.5f64..0.5,
        ) {
            let p = gfm();
            let s = GfmState { theta: 0.1, omega: W0 + dw, v_err: ve, emf: e, p_set: pset };
            let r = gfm_derivatives(&s, &p, 0.3, -0.1, 0.99, W0);
            let h = 1e-4;
            let fwd = gfm_flow(s, &p, h);
            let back = gfm_flow(s, &p, -h);
            // central difference of the flow: error O(h²) times the second derivative scale (1/τ²)
            let tol = h * h / (p.tau * p.tau) * (1.0 + r.omega.abs() + r.v_err.abs() + r.emf.abs());
            prop_assert!(((fwd.omega - back.omega) / (2.0 * h) - r.omega).abs() < tol.max(1e-9));
            prop_assert!(((fwd.v_err - back.v_err) / (2.0 * h) - r.v_err).abs() < tol.max(1e-9));
            prop_assert!(((fwd.emf - back.emf) / (2.0 * h) - r.emf).abs() < tol.max(1e-9));
            prop_assert!(((fwd.theta - back.theta) / (2.0 * h) - r.theta).abs() < tol.max(1e-9));
        }
    }
}
