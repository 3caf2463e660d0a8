//! Shared fixtures for the criterion benchmarks.

use wmlab_core::data::{builtin_shapes, LabeledDataset, SplitRole};
use wmlab_core::nn::{build_model, ModelState};
use wmlab_core::rng::Rng;

pub fn bench_model() -> ModelState {
    let mut rng = Rng::stream(1, "bench-init");
    build_model("tinycnn", (1, 16, 16), 5, &mut rng).expect("tinycnn builds")
}

pub fn bench_data(n: usize) -> LabeledDataset {
    builtin_shapes(5, n, 16, 2, SplitRole::OwnerTrain).expect("shapes generate")
}
