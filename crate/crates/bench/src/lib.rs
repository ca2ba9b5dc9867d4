//! Criterion benchmarks for `debayes-core`; run with `cargo bench -p debayes-bench`.
