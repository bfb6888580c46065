mod common;

use common::{brute_auprc, brute_auroc, check_metrics, METRIC_INSTANCES, METRIC_TOLERANCE};
use wvad::metrics::{auprc, auroc};

#[test]
fn metrics_match_brute_force() {
    let (roc, pr) = check_metrics(METRIC_INSTANCES);
    assert!(roc <= METRIC_TOLERANCE, "AUROC off by {roc:e}");
    assert!(pr <= METRIC_TOLERANCE, "AUPRC off by {pr:e}");
}

#[test]
fn four_point_hand_case() {
    let s = [0.8, 0.6, 0.4, 0.2];
    let l = [1, 0, 1, 0];
    assert_eq!(auroc(&s, &l).unwrap(), 0.75);
    assert_eq!(auprc(&s, &l).unwrap(), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(brute_auroc(&s, &l), 0.75);
    assert_eq!(brute_auprc(&s, &l), (1.0 + 2.0 / 3.0) / 2.0);
    assert_eq!(format!("{:.4}", auprc(&s, &l).unwrap()), "0.8333");
}
