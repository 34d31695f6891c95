//! Independent reference computations shared by the integration tests.

use num_complex::Complex64;

use safecon::control::{ControlConfig, ControlMode};
use safecon::netmodel::{Branch, Bus, DeviceCoupling, DeviceKind, GridModel, SolverOptions};
use safecon::scenario_io::ScenarioScript;
use safecon::simulator::{ScheduleConfig, Simulator};

/// Source E∠0 behind x = 0.1 feeding a passive bus, which feeds a 0.5 p.u.
/// load over another x = 0.1 line.
pub fn three_bus() -> GridModel<f64> {
    let buses = vec![Bus::passive(1), Bus::load(2, 0.5, 0.0)];
    let branches = vec![Branch::from_impedance("1-2", 0, 1, 0.0, 0.1)];
    let src = DeviceCoupling {
        name: "E".into(),
        kind: DeviceKind::Sg,
        terminal: 0,
        reactance: 0.1,
        in_service: true,
    };
    GridModel::new(buses, branches, vec![src]).unwrap()
}

/// Load-bus power mismatch with the passive bus eliminated: no current flows
/// into it, so the load sees the source through the series sum of both
/// reactances.
pub fn load_mismatch(v: f64, th: f64) -> f64 {
    let e = Complex64::new(1.0, 0.0);
    let vl = Complex64::from_polar(v, th);
    let i_to_load = (e - vl) / Complex64::new(0.0, 0.2);
    let s = vl * i_to_load.conj();
    (s.re - 0.5).abs() + s.im.abs()
}

pub fn grid_search() -> (f64, f64) {
    let (mut v0, mut v1, mut t0, mut t1) = (0.5, 1.2, -1.0, 0.0);
    let mut best = (0.0, 0.0);
    for _ in 0..8 {
        let n = 200;
        let mut err = f64::INFINITY;
        for i in 0..=n {
            for k in 0..=n {
                let v = v0 + (v1 - v0) * i as f64 / n as f64;
                let t = t0 + (t1 - t0) * k as f64 / n as f64;
                let m = load_mismatch(v, t);
                if m < err {
                    err = m;
                    best = (v, t);
                }
            }
        }
        let (dv, dt) = ((v1 - v0) / 20.0, (t1 - t0) / 20.0);
        (v0, v1, t0, t1) = (best.0 - dv, best.0 + dv, best.1 - dt, best.1 + dt);
    }
    assert!(load_mismatch(best.0, best.1) < 1e-6);
    best
}

/// End state after `t_end` seconds from a perturbed, event-free start.
pub fn perturbed_end_state(h: f64, t_end: f64) -> Vec<f64> {
    let sys = super::desk();
    let mut control = sys.control.clone();
    control.mode = ControlMode::NoSecondary;
    control.config = ControlConfig::reference();
    let schedule = ScheduleConfig::new(h, t_end, &control.config);
    let tight = SolverOptions {
        tolerance: 1e-12,
        max_iterations: 20,
    };
    let mut sim = Simulator::new(&sys.model, &sys.devices, control, schedule, &ScenarioScript::empty())
        .unwrap()
        .with_solver(tight);
    let mut sg = sim.state().sg.clone();
    let mut gfm = sim.state().gfm.clone();
    for (i, s) in sg.iter_mut().enumerate() {
        s.omega += 0.3 * (i as f64 + 1.0);
        s.theta += 0.02 * i as f64;
    }
    for s in gfm.iter_mut() {
        s.omega -= 0.2;
        s.emf += 0.01;
    }
    sim.set_device_states(sg, gfm).unwrap();
    let steps = (t_end / h).round() as usize;
    sim.advance(steps).unwrap();
    let st = sim.state();
    st.sg
        .iter()
        .flat_map(|s| [s.theta, s.omega, s.p_mech])
        .chain(st.gfm.iter().flat_map(|s| [s.theta, s.omega, s.v_err, s.emf]))
        .collect()
}

pub fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
