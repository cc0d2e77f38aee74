use pyo3::prelude::*;
use pyo3::types::PyDict;

fn with_module<F: FnOnce(Python<'_>, &Bound<'_, PyModule>)>(f: F) {
    pyo3::prepare_freethreaded_python();
    Python::with_gil(|py| {
        let m = PyModule::new_bound(py, "ugsim").unwrap();
        ugsim_py::init(&m).unwrap();
        f(py, &m);
    });
}

#[test]
fn game_functions() {
    with_module(|_, m| {
        let p: (u32, u32) = m.getattr("payoff").unwrap().call1((30, "accept")).unwrap().extract().unwrap();
        assert_eq!(p, (70, 30));
        let p: (u32, u32) = m.getattr("payoff").unwrap().call1((30, "reject")).unwrap().extract().unwrap();
        assert_eq!(p, (0, 0));
        assert!(m.getattr("payoff").unwrap().call1((101, "accept")).is_err());
        let e: (u32, String) = m.getattr("equilibrium").unwrap().call0().unwrap().extract().unwrap();
        assert_eq!(e, (0, "accept".to_string()));
    });
}

#[test]
fn parsing_and_analysis() {
    with_module(|_, m| {
        let d = m.getattr("parse_proposer").unwrap().call1(("I offer 40 coins",)).unwrap();
        let d = d.downcast::<PyDict>().unwrap();
        assert_eq!(d.get_item("offer").unwrap().unwrap().extract::<u32>().unwrap(), 40);
        assert_eq!(d.get_item("mode").unwrap().unwrap().extract::<String>().unwrap(), "fallback");
        let d = m.getattr("parse_responder").unwrap().call1(("hmm",)).unwrap();
        let d = d.downcast::<PyDict>().unwrap();
        assert_eq!(d.get_item("error").unwrap().unwrap().extract::<String>().unwrap(), "no_value");

        let tv: f64 = m.getattr("tv_distance").unwrap().call1((vec![0u32], vec![100u32])).unwrap().extract().unwrap();
        assert_eq!(tv, 1.0);
        let reference = m.getattr("synthesize_reference").unwrap().call1((7, 1000)).unwrap();
        let samples = reference.get_item("responder_samples").unwrap();
        let fit = m.getattr("piecewise_fit").unwrap().call1((samples,)).unwrap();
        let jump: f64 = fit.get_item("jump").unwrap().extract().unwrap();
        assert!(jump > 0.15);
    });
}

#[test]
fn cli_round_trip() {
    with_module(|_, m| {
        let (code, out, _): (i32, String, String) =
            m.getattr("cli").unwrap().call1((vec!["validate"],)).unwrap().extract().unwrap();
        assert_eq!(code, 0);
        assert!(out.contains("19 cells per side"));
    });
}
