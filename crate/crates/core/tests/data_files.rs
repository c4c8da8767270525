use std::path::{Path, PathBuf};

use lego_har::data::{load_csv, load_series, load_windowed, Manifest};
use lego_har::Error;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

#[test]
fn toy_csv_loads_with_subjects() {
    let s = load_csv(&fixture("toy.json")).unwrap();
    assert_eq!(s.total_time(), 400);
    assert_eq!(s.channels(), 3);
    assert_eq!(s.class_names, ["still", "shake"]);
    assert_eq!(s.labels[0], 0);
    assert_eq!(s.labels[50], 1);
    assert_eq!(s.subject_runs().len(), 4);

    let ds = load_windowed(&Manifest::load(&fixture("toy.json")).unwrap()).unwrap();
    // 100 rows per subject, windows never straddle subjects
    assert_eq!(ds.len(), 4 * ((100 - 16) / 8 + 1));
    assert_eq!(ds.windows.shape(), &[ds.len(), 1, 16, 3]);
}

#[test]
fn bad_cell_reports_its_line() {
    match load_csv(&fixture("bad_cell.json")) {
        Err(Error::Data { path, line, message }) => {
            assert_eq!(line, 17);
            assert!(path.ends_with("bad_cell.csv"), "{}", path.display());
            assert!(message.contains("n/a"), "{message}");
        }
        other => panic!("expected a data error, got {other:?}"),
    }
}

#[test]
fn wisdm_records_split_on_semicolons() {
    let m = Manifest::load(&fixture("wisdm_sample.json")).unwrap();
    let s = load_series(&m).unwrap();
    // the malformed record is skipped; two records sharing a line are both kept
    assert_eq!(s.total_time(), 2 * 3 * 30);
    assert_eq!(s.channels(), 3);
    assert_eq!(s.subject_runs().len(), 2);
    assert_eq!(s.labels[0], 0);
    assert_eq!(s.labels[179], 2);
}

fn copy_toy(dir: &Path, extra: serde_json::Value) -> PathBuf {
    std::fs::copy(fixture("toy.csv"), dir.join("toy.csv")).unwrap();
    let mut m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fixture("toy.json")).unwrap()).unwrap();
    for (k, v) in extra.as_object().unwrap() {
        m[k] = v.clone();
    }
    let path = dir.join("toy.json");
    std::fs::write(&path, m.to_string()).unwrap();
    path
}

#[test]
fn cache_is_reused_and_rebuilt_when_stale() {
    let dir = tempfile::tempdir().unwrap();
    let path = copy_toy(dir.path(), serde_json::json!({"cache_path": "toy.lgw"}));
    let first = load_windowed(&Manifest::load(&path).unwrap()).unwrap();
    let cache = dir.path().join("toy.lgw");
    assert!(cache.exists());
    let written = std::fs::metadata(&cache).unwrap().modified().unwrap();
    let second = load_windowed(&Manifest::load(&path).unwrap()).unwrap();
    assert_eq!(first, second);
    assert_eq!(std::fs::metadata(&cache).unwrap().modified().unwrap(), written);

    // a different step changes the manifest digest, so the cache is rebuilt
    let path = copy_toy(dir.path(), serde_json::json!({"cache_path": "toy.lgw", "step": 16}));
    let third = load_windowed(&Manifest::load(&path).unwrap()).unwrap();
    assert_eq!(third.step, 16);
    assert!(third.len() < first.len());
}

#[test]
fn missing_file_names_the_download_source() {
    let dir = tempfile::tempdir().unwrap();
    let path = copy_toy(
        dir.path(),
        serde_json::json!({"data_path": "absent.csv", "source_url": "https://example.org/toy"}),
    );
    let err = load_windowed(&Manifest::load(&path).unwrap()).unwrap_err().to_string();
    assert!(err.contains("https://example.org/toy"), "{err}");
}

#[test]
fn checksum_mismatch_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let path = copy_toy(dir.path(), serde_json::json!({"sha256": "00".repeat(32)}));
    let err = load_windowed(&Manifest::load(&path).unwrap()).unwrap_err().to_string();
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn unknown_manifest_keys_are_rejected() {
    let err = Manifest::from_json(r#"{"format": "csv", "window_len": 4, "step": 2, "windw": 3}"#).unwrap_err();
    assert!(err.to_string().contains("windw"), "{err}");
}
