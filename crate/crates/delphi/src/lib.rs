//! Judgmental forecasting engine.
//!
//! `delphi` runs panels of search-equipped forecasting agents against binary
//! questions, reconciles their disagreements with a supervisor, calibrates the
//! merged probability, and scores the result. It also ships the tooling around
//! that loop: market-derived benchmark construction, foreknowledge auditing for
//! retrospective evaluations, convex blending with market prices, and paired
//! significance testing.
//!
//! The crate is example-first. Each major capability has a runnable example;
//! start there rather than with the API reference.
//!
//! # Examples by capability
//!
//! Scoring and comparison:
//! - `scoring_basics` — Brier scores, survey baselines, win rates, and the
//!   recentered paired bootstrap. `cargo run --example scoring_basics`
//!
//! Calibration:
//! - `calibration_methods` — logit-scale (Platt) maps, log-odds extremization,
//!   isotonic and linear fits, coefficient sweeps, leave-one-out evaluation.
//!   `cargo run --example calibration_methods`
//!
//! Aggregation and synthesis:
//! - `aggregation_strategies` — mean/trimmed/median panels, supervisor gating,
//!   best-of-k enforcement, synthesis metrics, ensemble-size curves.
//!   `cargo run --example aggregation_strategies`
//!
//! The forecasting pipeline:
//! - `mock_benchmark_run` — a full benchmark run against deterministic scripted
//!   gateways, including interruption, resume, and offline re-scoring.
//!   `cargo run --example mock_benchmark_run`
//!
//! Benchmark construction:
//! - `market_benchmark` — market filtering, cutoff schedules, question
//!   generation, and live snapshots. `cargo run --example market_benchmark`
//!
//! Integrity auditing:
//! - `foreknowledge_audit` — judging traces for leaked post-cutoff knowledge,
//!   filtered and worst-case robustness scores, prevalence estimation.
//!   `cargo run --example foreknowledge_audit`
//!
//! Market blending:
//! - `market_ensemble` — simplex-constrained regression of outcomes on
//!   forecast/market pairs with bootstrap confidence intervals.
//!   `cargo run --example market_ensemble`
//!
//! # CLI
//!
//! The `delphi` binary is a thin wrapper over this library and covers the same
//! ground operationally: `bench ingest|make-market|snapshot-live`,
//! `forecast run`, `calibrate fit|sweep`, `score`, `compare`, `ensemble`,
//! `judge`, `audit`, and `report`. See the README for formats and exit codes.
//!
//! # Determinism
//!
//! Every source of nondeterminism runs through a named, seedable generator
//! (ChaCha8) configured per run. With scripted mock gateways and a fixed seed,
//! a benchmark run is byte-identical across executions, interruptions, and
//! resumes.

pub mod aggregation;
pub mod assets;
pub mod benchkit;
pub mod blend;
pub mod calibration;
pub mod domain;
pub mod files;
pub mod integrity;
pub mod pipeline;
pub mod providers;
pub mod report;
pub mod scoring;
pub mod stats;
