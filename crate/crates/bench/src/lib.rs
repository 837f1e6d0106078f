//! Fixtures shared by the benchmarks.

use exagree_core::data::{generate_synthetic, split, SyntheticSpec};
use exagree_core::models::train_logistic;
use exagree_core::{Dataset, LinearModel, TaskSplit};

/// Deterministic values in `[-1, 1)` with no ties.
pub fn spread_values(p: usize) -> Vec<f64> {
    (0..p).map(|i| ((i * 37 + 11) % p) as f64 / p as f64 * 2.0 - 1.0).collect()
}

/// The default synthetic task at `n` rows with a trained logistic model.
pub fn logistic_task(n: usize) -> (Dataset, TaskSplit, LinearModel) {
    let ds = generate_synthetic(&SyntheticSpec {
        n,
        ..SyntheticSpec::default_task(7)
    })
    .expect("synthetic task");
    let s = split(&ds, 0.2, 7).expect("split");
    let m = train_logistic(&ds, &s, 0.5, 100, 7).expect("training");
    (ds, s, m)
}
