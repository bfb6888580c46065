mod common;

use common::{check_em, em_instance, em_oracle, EM_INSTANCES, EM_RESP_TOLERANCE, EM_SLACK};
use wvad::gmm::{em_fit, EmConfig};

#[test]
fn em_matches_oracle_and_never_decreases_likelihood() {
    let c = check_em(EM_INSTANCES);
    assert_eq!(c.failures, 0);
    assert!(c.worst_drop <= EM_SLACK, "log-likelihood dropped by {:e}", c.worst_drop);
    assert!(c.worst_resp <= EM_RESP_TOLERANCE, "responsibilities off by {:e}", c.worst_resp);
    assert!(c.worst_ll <= EM_RESP_TOLERANCE, "log-likelihood off by {:e}", c.worst_ll);
}

#[test]
fn oracle_agrees_on_the_seeding() {
    // The first trace entry is the likelihood of the k-means++ seeding,
    // before any M-step.
    for seed in 0..50 {
        let (x, k, mut rng) = em_instance(seed);
        let cfg = EmConfig { max_iters: 0, ..EmConfig::default() };
        let fit = em_fit(x.view(), k, &cfg, &mut rng).unwrap();
        let (_, ll) = em_oracle(&fit.params, &x);
        assert!((ll - fit.trace[0]).abs() < 1e-10 * ll.abs().max(1.0));
    }
}
