//! Config hashing, CSV schemas and chart rendering.

use std::fs;

use serde_json::json;

use revcurse::analysis::{write_distances, write_probes, ControlKind, DistanceRow, ProbeRow, ReferenceKind};
use revcurse::objectives::Objective;
use revcurse::reporting::{
    config_hash, render, run_suite, write_metrics, MetricsRow, ReportError, Suite, SuiteConfig, Workspace,
};

#[test]
fn hash_ignores_key_order() {
    let a = json!({ "b": 1, "a": { "y": [1, 2], "x": "s" } });
    let b: serde_json::Value = serde_json::from_str(r#"{"a":{"x":"s","y":[1,2]},"b":1}"#).unwrap();
    assert_eq!(config_hash(&a), config_hash(&b));
    assert_ne!(config_hash(&a), config_hash(&json!({ "b": 2, "a": { "y": [1, 2], "x": "s" } })));
    assert_ne!(config_hash(&json!([1, 2])), config_hash(&json!([2, 1])));
    assert_eq!(config_hash(&a).len(), 64);
}

#[test]
fn presets_hash_differently_and_stably() {
    assert_eq!(SuiteConfig::desk().hash(), SuiteConfig::desk().hash());
    assert_ne!(SuiteConfig::desk().hash(), SuiteConfig::full().hash());
    let round: SuiteConfig = serde_json::from_str(&serde_json::to_string(&SuiteConfig::full()).unwrap()).unwrap();
    assert_eq!(round.hash(), SuiteConfig::full().hash());
}

#[test]
fn suites_parse_by_name() {
    for s in Suite::ALL {
        assert_eq!(s.as_str().parse::<Suite>().unwrap(), s);
    }
    assert!(matches!("fig9".parse::<Suite>(), Err(ReportError::UnknownSuite(_))));
}

#[test]
fn empty_seed_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut ws = Workspace::new(dir.path());
    assert!(matches!(run_suite(&mut ws, Suite::Fig1, &[], &SuiteConfig::desk()), Err(ReportError::NoSeeds)));
}

#[test]
fn metrics_csv_has_the_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("metrics.csv");
    let rows = [MetricsRow {
        policy: "S+T".into(),
        objective: Objective::NtpMasking,
        seed: 3,
        reversal_acc: 0.5,
        forward_acc: 1.0,
        false_frame_acc: 0.0,
    }];
    write_metrics(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text, "policy,objective,seed,reversal_acc,forward_acc\nS+T,ntp+masking,3,0.500000,1.000000\n");
}

#[test]
fn render_dispatches_on_header() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("distances.csv");
    let p = dir.path().join("probes.csv");
    write_distances(
        &d,
        &[
            DistanceRow { layer: 0, kind: ReferenceKind::ReverseFact, mean: 0.4, std: 0.1, n: 20 },
            DistanceRow { layer: 1, kind: ReferenceKind::ReverseFact, mean: 0.6, std: 0.1, n: 20 },
        ],
    )
    .unwrap();
    write_probes(
        &p,
        &[ProbeRow { layer: None, control_kind: ControlKind::Unrelated, accuracy: 0.5, null_low: 0.4, null_high: 0.6, lambda: None }],
    )
    .unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap().lines().nth(1), Some("max,unrelated,0.500000,0.400000,0.600000"));
    let out = render(&[d.clone(), p.clone()]).unwrap();
    for svg in &out {
        let text = fs::read_to_string(svg).unwrap();
        assert!(text.starts_with("<svg") && text.trim_end().ends_with("</svg>"));
    }
}

#[test]
fn render_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let header_only = dir.path().join("empty.csv");
    fs::write(&header_only, "layer,kind,mean,std,n\n").unwrap();
    assert!(matches!(render(&[header_only]), Err(ReportError::EmptyPlot(_))));
    let unknown = dir.path().join("other.csv");
    fs::write(&unknown, "a,b\n1,2\n").unwrap();
    assert!(matches!(render(&[unknown]), Err(ReportError::Schema { .. })));
    let bad_number = dir.path().join("bad.csv");
    fs::write(&bad_number, "policy,objective,seed,reversal_acc,forward_acc\nS,mlm,0,high,1\n").unwrap();
    assert!(matches!(render(&[bad_number]), Err(ReportError::Schema { .. })));
}
