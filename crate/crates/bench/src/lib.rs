//! Shared fixtures for the criterion benchmarks in `benches/`.

use domexperts::scenes::{generate_split, Balance, SceneSpec, Split};
use domexperts::{Dataset, DomainSchema};

/// Altitude schema with `bins` equal-width bins over the default flight range.
pub fn altitude_schema(bins: usize) -> DomainSchema {
    DomainSchema::altitude(5.0, 100.0, bins).expect("valid schema")
}

/// A small balanced set of default-size scenes.
pub fn sample_set(n: usize) -> Dataset {
    generate_split(&SceneSpec::default(), &altitude_schema(3), n, &Balance::Balanced, Split::Test)
        .expect("generation succeeds")
}
