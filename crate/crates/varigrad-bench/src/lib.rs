//! Shared fixtures for the criterion benchmarks.

use varigrad::posterior::Granularity;
use varigrad::{DenseVariationalLayer, Matrix, NoiseModel, RngStream};

/// A square layer with learnable independent weight noise plus a matching
/// input batch, as used by the estimator benchmarks.
pub fn square_layer_fixture(k: usize, m: usize, seed: u64) -> (DenseVariationalLayer, Matrix) {
    let mut rng = RngStream::new(seed, 0);
    let layer = DenseVariationalLayer::new(
        k,
        k,
        NoiseModel::IndependentWeight,
        Granularity::PerLayer,
        0.5,
        &mut rng,
    )
    .expect("fixture dimensions are valid");
    let input = Matrix::from_fn(m, k, |_, _| rng.next_uniform());
    (layer, input)
}
