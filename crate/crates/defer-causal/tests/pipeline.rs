use defer_causal::config::SystemChoice;
use defer_causal::report::{format_threshold, report_json, report_table};
use defer_causal::{emit_plotdata, run_pipeline, save_dataset, Cell, PipelineConfig, Report, Schema};
use defer_causal_core::data::split_indices;
use defer_causal_core::{
    apply_policy, bonferroni_threshold, coverage_grid, estimate_atd, estimate_rd, generate_synth,
    EvaluationRecord, Kernel, SynthConfig,
};

fn synth_config(n: usize, coverages: Vec<f64>) -> PipelineConfig {
    PipelineConfig {
        synth: Some(SynthConfig { n, seed: 4, ..SynthConfig::default() }),
        system: SystemChoice::Oracle,
        seed: 9,
        coverages,
        groups: vec!["component".into()],
        ..PipelineConfig::default()
    }
}

fn count_tests(report: &Report) -> usize {
    let mut m = 0;
    for row in &mut report.rows.clone() {
        row.for_each_test(&mut |_, _| m += 1);
    }
    m
}

#[test]
fn grid_rows_match_module_composition() {
    let cfg = synth_config(10_000, vec![0.4, 0.5]);
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.rows.len(), 2);

    let synth = generate_synth(cfg.synth.as_ref().unwrap()).unwrap();
    let [_, val, test] = split_indices(synth.dataset.len(), (0.7, 0.1, 0.2), cfg.seed).unwrap();
    let pick = |idx: &[usize]| {
        synth.dataset.with_records(idx.iter().map(|&i| synth.dataset.records()[i].clone()).collect()).unwrap()
    };
    let (val, test) = (pick(&val), pick(&test));
    let cutoffs = coverage_grid(&val.scores(), &cfg.coverages).unwrap();
    for (row, cut) in report.rows.iter().zip(&cutoffs) {
        let ds = apply_policy(&test, cut).unwrap();
        let atd = estimate_atd(&ds, 0.95).unwrap();
        let rd = estimate_rd(&ds, cut.value, None, Kernel::Triangular, 0.95).unwrap();
        assert_eq!(row.cutoff.ok().unwrap().value, cut.value);
        assert_eq!(row.atd.ok().unwrap().estimate, atd);
        assert_eq!(row.rd.ok().unwrap().estimate.estimate, rd.estimate);
        assert!(row.oracle_atd.is_some());
        assert!(row.catd["component"].ok().is_some());
    }

    let m = count_tests(&report);
    assert_eq!(report.tests_run, m);
    assert_eq!(report.family_size, m);
    assert_eq!(report.threshold, Some(bonferroni_threshold(0.05, m).unwrap()));
}

#[test]
fn scenario_2_file_uses_the_logged_policy() {
    let synth = generate_synth(&SynthConfig { n: 4000, seed: 2, ..SynthConfig::default() }).unwrap();
    let records: Vec<EvaluationRecord> = synth
        .dataset
        .records()
        .iter()
        .map(|r| EvaluationRecord {
            model_pred: if r.deferred { None } else { r.model_pred.clone() },
            ..r.clone()
        })
        .collect();
    let ds = synth.dataset.with_records(records).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s2.csv");
    save_dataset(&path, &ds, &Schema::default()).unwrap();

    let cfg = PipelineConfig { input: Some(path), ..PipelineConfig::default() };
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.atd, Cell::Unavailable("scenario".into()));
    assert!(row.rd.ok().is_some());
    assert!(row.density.ok().is_some());
    assert!(report.notes.iter().any(|n| n.contains("Scenario-1")));
}

#[test]
fn empty_grid_has_globals_only() {
    let report = run_pipeline(&synth_config(2000, vec![])).unwrap();
    assert!(report.rows.is_empty());
    assert_eq!(report.tests_run, 0);
    assert_eq!(report.n_test, 400);
    let table = report_table(&report);
    assert!(table.lines().count() >= 2);
}

#[test]
fn no_silent_cells() {
    let report = run_pipeline(&synth_config(3000, vec![0.0, 0.5, 1.0])).unwrap();
    let json: serde_json::Value = serde_json::from_str(&report_json(&report)).unwrap();
    for row in json["rows"].as_array().unwrap() {
        for key in ["cutoff", "accuracy", "atd", "rd", "placebo_cutoff", "placebo_outcome", "density"] {
            let status = row[key]["status"].as_str().unwrap();
            assert!(["ok", "error", "unavailable"].contains(&status), "{key}: {status}");
            assert!(!row[key]["value"].is_null(), "{key} has no payload");
        }
    }
    // Nothing is deferred at full coverage.
    assert_eq!(json["rows"][2]["cutoff"]["value"]["value"], "inf");
    assert_eq!(json["rows"][2]["atd"]["status"], "error");
}

#[test]
fn report_is_deterministic_and_round_trips() {
    let cfg = PipelineConfig { system: SystemChoice::Sp, ..synth_config(3000, vec![0.3, 0.6]) };
    let a = report_json(&run_pipeline(&cfg).unwrap());
    let b = report_json(&run_pipeline(&cfg).unwrap());
    assert_eq!(a, b);
    let parsed: Report = serde_json::from_str(&a).unwrap();
    assert_eq!(report_json(&parsed), a);
}

#[test]
fn stars_follow_the_threshold() {
    let report = run_pipeline(&synth_config(6000, vec![0.2, 0.5, 0.8])).unwrap();
    let t = 0.05 / report.tests_run as f64;
    let table = report_table(&report);
    for (row, line) in report.rows.iter().zip(table.lines().skip(1)) {
        let atd = row.atd.ok().unwrap();
        assert_eq!(atd.significant, atd.estimate.p_value < t);
        let atd_text = line.split_whitespace().nth(5).unwrap();
        assert_eq!(atd_text.ends_with('*'), atd.estimate.p_value < t, "{line}");
    }
    assert!(table.contains(&format_threshold(t)));
}

#[test]
fn family_size_override() {
    let cfg = PipelineConfig { family_size: Some(665), ..synth_config(2000, vec![0.5]) };
    let report = run_pipeline(&cfg).unwrap();
    assert_eq!(report.family_size, 665);
    assert_eq!(report.threshold, Some(0.05 / 665.0));
}

#[test]
fn plot_files() {
    let report = run_pipeline(&synth_config(4000, default_grid())).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_plotdata(&report, dir.path()).unwrap();
    let read = |name: &str| -> Vec<Vec<String>> {
        let mut r = csv::Reader::from_path(dir.path().join(name)).unwrap();
        r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect()
    };
    assert_eq!(read("accuracy.csv").len(), 10);
    let header = csv::Reader::from_path(dir.path().join("atd.csv")).unwrap().headers().unwrap().clone();
    assert_eq!(header.iter().collect::<Vec<_>>(), ["c", "point", "lo", "hi", "p"]);
    for name in ["atd.csv", "rd.csv"] {
        for row in read(name) {
            let v: Vec<f64> = row.iter().map(|x| x.parse().unwrap()).collect();
            assert!(v[2] <= v[1] && v[1] <= v[3], "{name}: {row:?}");
        }
    }
    // No local estimates at zero coverage.
    assert_eq!(read("rd.csv").len(), 9);
}

fn default_grid() -> Vec<f64> {
    (0..10).map(|i| f64::from(i) / 10.0).collect()
}
