#![allow(dead_code)]

pub mod oracles;

use std::path::PathBuf;

use safecon::control::ControlMode;
use safecon::scenario_io::{parse_scenario, parse_system, ScenarioScript, SystemSpec};
use safecon::simulator::{run_scenario, ScheduleConfig, TrajectoryLog};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures").join(name)
}

pub fn desk() -> SystemSpec<f64> {
    parse_system(&std::fs::read_to_string(fixture("desk9.toml")).unwrap()).unwrap()
}

pub fn scenario(name: &str) -> ScenarioScript<f64> {
    parse_scenario(&std::fs::read_to_string(fixture(name)).unwrap()).unwrap()
}

pub fn run(sys: &SystemSpec<f64>, sc: &ScenarioScript<f64>, mode: ControlMode, end: Option<f64>) -> TrajectoryLog<f64> {
    let mut control = sys.control.clone();
    control.mode = mode;
    let end = end.or(sc.end_time).unwrap();
    let schedule = ScheduleConfig::new(sc.step.unwrap_or(1e-3), end, &control.config);
    run_scenario(&sys.model, &sys.devices, control, schedule, sc).unwrap()
}
