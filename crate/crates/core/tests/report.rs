//! The results report: table layout, cell format and input guards.

use medform::cli::{report, ResultRecord};
use medform::eval_probe::MetricReport;
use medform::Error;

fn record(model: &str, metric: &str, k: Option<usize>, values: Vec<f64>) -> ResultRecord {
    ResultRecord {
        report: MetricReport::from_values("breast", model, metric, k, values).unwrap(),
        seed: 1,
        config_hash: "abc".into(),
    }
}

#[test]
fn single_result_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let r = record("contrastive", "auroc", None, vec![0.9, 0.5]);
    std::fs::write(dir.path().join("one.json"), serde_json::to_string(&r).unwrap()).unwrap();
    let t = report(dir.path()).unwrap();
    assert_eq!(t.rows.len(), 1);
    assert_eq!(t.rows[0].cells, ["0.7000 (0.2000)"]);
    assert_eq!(t.to_text().lines().count(), 3);
}

#[test]
fn cell_matches_published_layout() {
    let mut r = record("contrastive", "auroc", None, vec![0.7]);
    r.report.mean = 0.7042;
    r.report.std = 0.1770;
    assert_eq!(r.report.cell(), "0.7042 (0.1770)");
}

#[test]
fn files_merge_and_csv_mirrors_text() {
    let dir = tempfile::tempdir().unwrap();
    let a = vec![record("unimodal", "auroc", None, vec![0.6]), record("unimodal", "acc", None, vec![0.55])];
    let b = vec![record("contrastive", "auroc", Some(5), vec![0.8, 0.9])];
    std::fs::write(dir.path().join("a.json"), serde_json::to_string(&a).unwrap()).unwrap();
    std::fs::write(dir.path().join("b.json"), serde_json::to_string(&b).unwrap()).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let t = report(dir.path()).unwrap();
    assert_eq!(t.rows.len(), 2);
    let csv = t.to_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "task,model,k,AUROC,ACC");
    assert_eq!(lines[1], "breast,unimodal,-,0.6000 (0.0000),0.5500 (0.0000)");
    assert_eq!(lines[2], "breast,contrastive,5,0.8500 (0.0500),");
    let (txt, csv_path) = t.write(dir.path()).unwrap();
    assert!(txt.exists() && csv_path.exists());
    // Written reports are not results files and do not disturb a second pass.
    assert_eq!(report(dir.path()).unwrap(), t);
}

#[test]
fn empty_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report(dir.path()).is_err());
}

#[test]
fn malformed_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("good.json"), "[]").unwrap();
    std::fs::write(dir.path().join("broken.json"), "{\"task\": 3}").unwrap();
    match report(dir.path()) {
        Err(e @ Error::Json { .. }) => assert!(e.to_string().contains("broken.json"), "{e}"),
        other => panic!("unexpected {other:?}"),
    }
}
