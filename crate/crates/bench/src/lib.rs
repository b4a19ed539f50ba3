//! Criterion benchmarks for the numeric kernels and the forecaster; see
//! `benches/`.
