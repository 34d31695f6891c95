use std::fs;

use safecon::control::ControlMode;
use safecon::scenario_io::{
    cli_main, emit_results, parse_scenario, parse_system, serialize_scenario, serialize_system, summarize, ParseError,
    ScenarioScript, EXIT_INVALID, EXIT_OK, EXIT_RUNTIME,
};

mod common;

fn read(name: &str) -> String {
    fs::read_to_string(common::fixture(name)).unwrap()
}

#[test]
fn bundled_system_parses() {
    let sys = common::desk();
    assert_eq!(sys.model.n_network(), 9);
    assert_eq!(sys.devices.sgs.len(), 3);
    assert_eq!(sys.devices.gfms.len(), 3);
    assert_eq!(sys.control.mode, ControlMode::SafetyConsensus);
    // storage capacity is a tenth of the load
    let cap: f64 = sys.devices.gfms.iter().map(|g| g.params.rating).sum();
    assert!((cap - 0.1 * sys.model.base_load()).abs() < 1e-12);
}

#[test]
fn bundled_scenarios_parse() {
    let sc = common::scenario("scenario1.toml");
    let times: Vec<f64> = sc.events.iter().map(|e| e.time).collect();
    assert_eq!(times, vec![1.0, 6.0, 12.0, 26.0, 36.0]);
    sc.check_targets(&common::desk()).unwrap();
    let sc3 = common::scenario("scenario3.toml");
    assert_eq!(sc3.events.len(), 1);
}

#[test]
fn empty_event_list_is_valid() {
    let sc: ScenarioScript<f64> = parse_scenario("").unwrap();
    assert!(sc.events.is_empty());
    let sc: ScenarioScript<f64> = parse_scenario("[run]\nend_time = 5.0\n").unwrap();
    assert_eq!(sc.end_time, Some(5.0));
}

#[test]
fn decreasing_times_are_rejected() {
    let text = "[[event]]\ntime = 5.0\nkind = \"gen_trip\"\ndevice = \"G1\"\n[[event]]\ntime = 2.0\nkind = \"gen_trip\"\ndevice = \"G2\"\n";
    let err = parse_scenario::<f64>(text).unwrap_err();
    assert!(err.to_string().contains("non-decreasing"), "{err}");
}

#[test]
fn zero_droop_is_rejected_by_name() {
    let text = read("desk9.toml").replacen("m_p = 4.0", "m_p = 0.0", 1);
    let err = parse_system::<f64>(&text).unwrap_err();
    let msgs = err.messages();
    assert!(
        msgs.iter()
            .any(|m| m.contains("S5") && m.contains("droop gain must be positive")),
        "{msgs:?}"
    );
}

#[test]
fn unknown_bus_is_named() {
    let text = read("desk9.toml").replacen("from = 8\nto = 9", "from = 8\nto = 99", 1);
    let err = parse_system::<f64>(&text).unwrap_err();
    assert!(err.to_string().contains("unknown bus 99"), "{err}");
    assert!(err.to_string().contains("L8-9"), "{err}");
}

#[test]
fn all_errors_are_reported_together() {
    let text = read("desk9.toml")
        .replacen("m_p = 4.0", "m_p = -1.0", 1)
        .replacen("inertia = 0.3", "inertia = 0.0", 1)
        .replacen("from = 8\nto = 9", "from = 8\nto = 99", 1);
    match parse_system::<f64>(&text).unwrap_err() {
        ParseError::Invalid(v) => assert!(v.len() >= 3, "{v:?}"),
        other => panic!("{other}"),
    }
}

#[test]
fn syntax_errors_carry_a_line_number() {
    let err = parse_system::<f64>("[[bus]]\nid = 1\nload_p = = 3\n").unwrap_err();
    assert!(matches!(err, ParseError::Syntax(_)));
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn canonical_form_round_trips() {
    let sys = common::desk();
    let text = serialize_system(&sys);
    let again = parse_system::<f64>(&text).unwrap();
    assert_eq!(again, sys);
    assert_eq!(serialize_system(&again), text);

    let sc = common::scenario("scenario1.toml");
    let again = parse_scenario::<f64>(&serialize_scenario(&sc)).unwrap();
    assert_eq!(again, sc);
}

#[test]
fn unresolved_targets_are_reported() {
    let sc: ScenarioScript<f64> =
        parse_scenario("[[event]]\ntime = 1.0\nkind = \"load_step\"\nbus = 42\nfraction = 0.1\n").unwrap();
    let err = sc.check_targets(&common::desk()).unwrap_err();
    assert!(err.to_string().contains("unknown bus 42"));
}

#[test]
fn equilibrium_output_is_flat_and_reproducible() {
    let sys = common::desk();
    let log = common::run(&sys, &ScenarioScript::empty(), ControlMode::SafetyConsensus, Some(0.2));
    let summary = summarize(&log, &sys.control.config);
    assert_eq!(summary.violation_depth_hz, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    emit_results(&log, &summary, &a).unwrap();
    emit_results(&log, &summary, &b).unwrap();
    for f in ["trajectories.csv", "heatmap.csv", "summary.txt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let csv = fs::read_to_string(a.join("trajectories.csv")).unwrap();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header[0], "t");
    assert_eq!(*header.last().unwrap(), "coi_f_hz");
    assert_eq!(header.len(), 1 + 3 + 3 * 6 + 1);
    for line in lines {
        assert!(line.ends_with(",60.000000000000"), "{line}");
    }
    let heat = fs::read_to_string(a.join("heatmap.csv")).unwrap();
    assert_eq!(heat.lines().count(), 1 + 15);
}

fn args(list: &[&str]) -> Vec<String> {
    std::iter::once("safecon")
        .chain(list.iter().copied())
        .map(String::from)
        .collect()
}

#[test]
fn cli_exit_codes() {
    let sys = common::fixture("desk9.toml");
    let sys = sys.to_str().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();

    assert_eq!(cli_main(args(&["validate", "--system", sys])), EXIT_OK);
    assert_eq!(cli_main(args(&["validate", "--system", sys, "--bogus"])), EXIT_INVALID);
    assert_eq!(cli_main(args(&["validate", "--system", "/nonexistent.toml"])), EXIT_INVALID);
    assert_eq!(
        cli_main(args(&["run", "--system", sys, "--mode", "sideways", "--out", out])),
        EXIT_INVALID
    );
    // step that does not divide the safety period
    assert_eq!(
        cli_main(args(&[
            "run",
            "--system",
            sys,
            "--out",
            out,
            "--step",
            "0.0003",
            "--end-time",
            "0.1"
        ])),
        EXIT_INVALID
    );

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, read("desk9.toml").replacen("m_p = 4.0", "m_p = 0.0", 1)).unwrap();
    assert_eq!(cli_main(args(&["validate", "--system", bad.to_str().unwrap()])), EXIT_INVALID);

    // ten times the base load has no power-flow solution
    let collapse = dir.path().join("collapse.toml");
    fs::write(
        &collapse,
        "[[event]]\ntime = 0.1\nkind = \"load_step\"\nbus = 5\ndelta_p = 180.0\n",
    )
    .unwrap();
    let code = cli_main(args(&[
        "run",
        "--system",
        sys,
        "--scenario",
        collapse.to_str().unwrap(),
        "--mode",
        "no-secondary",
        "--out",
        out,
        "--end-time",
        "5",
    ]));
    assert_eq!(code, EXIT_RUNTIME);
}

#[test]
fn compare_writes_sibling_directories() {
    let sys = common::fixture("desk9.toml");
    let sc = common::fixture("scenario3.toml");
    let dir = tempfile::tempdir().unwrap();
    let code = cli_main(args(&[
        "compare",
        "--system",
        sys.to_str().unwrap(),
        "--scenario",
        sc.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "--end-time",
        "2",
    ]));
    assert_eq!(code, EXIT_OK);
    for m in ControlMode::ALL {
        for f in ["trajectories.csv", "heatmap.csv", "summary.txt"] {
            assert!(dir.path().join(m.name()).join(f).is_file(), "{m}/{f}");
        }
    }
    let joint = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
    assert_eq!(joint.matches("mode: ").count(), 3);
}
