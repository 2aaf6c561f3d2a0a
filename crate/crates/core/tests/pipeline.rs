use contbcf::artifacts::{check_fingerprint, read_draws, write_draws};
use contbcf::estimands::{ate_from_matrix, group_ate_from_matrix, Groups};
use contbcf::sampler::{predict, run_chains, ModelInputs, SamplerConfig};
use contbcf::simulation::{generate_synthetic, to_panel, SimulationScenario};
use contbcf::ErrorKind;
use proptest::prelude::*;

fn quick(keep_forests: bool) -> SamplerConfig {
    let mut cfg = SamplerConfig::desk(2, 3);
    cfg.burn_in = 30;
    cfg.kept_draws = 15;
    cfg.keep_forests = keep_forests;
    cfg
}

fn small_panel() -> contbcf::dataset::PanelDataset {
    let mut s = SimulationScenario::quadratic_case(1, 2).unwrap();
    s.n = 120;
    to_panel(&generate_synthetic(&s).unwrap())
}

#[test]
fn draws_survive_a_round_trip_through_files() {
    let panel = small_panel();
    let inputs = ModelInputs::from_panel(&panel).unwrap();
    let draws = run_chains(&inputs, &quick(true)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_draws(dir.path(), &draws).unwrap();
    let back = read_draws(dir.path()).unwrap();
    assert_eq!(back, draws);
    check_fingerprint(&back.provenance, &panel).unwrap();
}

#[test]
fn edited_data_fails_the_fingerprint() {
    let panel = small_panel();
    let draws = run_chains(&ModelInputs::from_panel(&panel).unwrap(), &quick(false)).unwrap();
    let mut edited = panel.clone();
    edited.y[7] += 1e-9;
    let err = check_fingerprint(&draws.provenance, &edited).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Consistency);
}

#[test]
fn predicting_training_rows_reproduces_stored_draws() {
    let panel = small_panel();
    let inputs = ModelInputs::from_panel(&panel).unwrap();
    let draws = run_chains(&inputs, &quick(true)).unwrap();
    let p = predict(&draws, &inputs.control, &inputs.moderator).unwrap();
    assert_eq!(p.num_draws, draws.num_draws());
    for d in 0..draws.num_draws() {
        let row = &p.tau[d * p.n..(d + 1) * p.n];
        for (a, b) in row.iter().zip(draws.tau_row(d)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let row = &p.mu[d * p.n..(d + 1) * p.n];
        for (a, b) in row.iter().zip(draws.mu_row(d)) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn predict_without_snapshots_is_refused() {
    let inputs = ModelInputs::from_panel(&small_panel()).unwrap();
    let draws = run_chains(&inputs, &quick(false)).unwrap();
    assert!(predict(&draws, &inputs.control, &inputs.moderator).is_err());
}

proptest! {
    #[test]
    fn size_weighted_group_ates_average_to_the_ate(
        (n, tau, codes) in (2usize..30).prop_flat_map(|n| (
            Just(n),
            prop::collection::vec(-5.0f64..5.0, n * 3),
            prop::collection::vec(0u32..4, n),
        ))
    ) {
        let mut used: Vec<u32> = codes.clone();
        used.sort_unstable();
        used.dedup();
        let codes = codes.iter().map(|c| used.binary_search(c).unwrap() as u32).collect();
        let groups = Groups { names: used.iter().map(|k| format!("g{k}")).collect(), codes };
        let sizes = groups.sizes();
        let rows = group_ate_from_matrix(&tau, n, &groups).unwrap();
        let ate = ate_from_matrix(&tau, n).unwrap();
        for d in 0..3 {
            let pooled: f64 = rows
                .iter()
                .zip(&sizes)
                .map(|(r, &s)| r.draws[d] * s as f64)
                .sum::<f64>() / n as f64;
            prop_assert!((pooled - ate.draws[d]).abs() < 1e-12);
        }
    }
}
