use repsample_core::eval::{generate_population, ClusterSpec, SyntheticPopulationSpec};
use repsample_core::gmm::select_k;
use repsample_core::table::normalize;

fn blob(count: usize, mean: &[f64], stddev: f64) -> ClusterSpec {
    ClusterSpec { count, mean: mean.to_vec(), stddev: vec![stddev; mean.len()] }
}

fn main() {
    for fixture_seed in [404u64, 7, 99, 123] {
        let spec = SyntheticPopulationSpec {
            dimension: 2,
            seed: fixture_seed,
            clusters: vec![
                blob(50, &[0.0, 0.0], 1.0),
                blob(50, &[20.0, 0.0], 1.0),
                blob(50, &[40.0, 0.0], 1.0),
            ],
        };
        let (raw, _) = generate_population(&spec).unwrap();
        let (set, _) = normalize(&raw);
        for fit_seed in [17u64, 0, 5] {
            let selection = select_k(&set, 1, 6, fit_seed, 3, 200, 1e-6).unwrap();
            let bics: Vec<String> = selection.bic_table.iter().map(|e| format!("{:.1}", e.bic)).collect();
            println!("fixture={fixture_seed} fit={fit_seed} best_k={} bic={:?}", selection.best_k, bics);
        }
    }
}
