//! The vendored benchmark files load with the published counts.

use std::path::PathBuf;

use wvad::data::{load_csv, CsvOptions, LabeledDataset};

fn path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data").join(name)
}

#[test]
fn ionosphere_counts() {
    let raw = load_csv(&path("ionosphere.csv"), CsvOptions::default()).unwrap();
    assert_eq!((raw.rows(), raw.dim(), raw.anomalies()), (351, 32, 126));
    let ten = LabeledDataset::prepare(&raw, 0.10, 0, "ionosphere").unwrap();
    assert_eq!(ten.labeled_anomalies().len(), 13);
    assert_eq!(ten.unlabeled().len(), 338);
    let five = LabeledDataset::prepare(&raw, 0.05, 0, "ionosphere").unwrap();
    assert_eq!(five.labeled_anomalies().len(), 6);
}

#[test]
fn satellite_counts() {
    let raw = load_csv(&path("satellite.csv"), CsvOptions::default()).unwrap();
    assert_eq!((raw.rows(), raw.dim(), raw.anomalies()), (6435, 36, 2036));
    assert_eq!(raw.rows() - raw.anomalies(), 4399);
    let data = LabeledDataset::prepare(&raw, 0.10, 0, "satellite").unwrap();
    assert_eq!(data.labeled_anomalies().len(), 204);
}

#[test]
fn standardized_files_have_z_scored_columns() {
    let raw = load_csv(&path("ionosphere.csv"), CsvOptions::default()).unwrap();
    let data = LabeledDataset::prepare(&raw, 0.10, 0, "ionosphere").unwrap();
    let n = data.rows() as f64;
    for col in data.features.columns() {
        let mean = col.sum() / n;
        let std = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-9);
        assert!((std - 1.0).abs() < 1e-6);
    }
}
