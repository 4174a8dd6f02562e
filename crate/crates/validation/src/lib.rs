//! Acceptance suite for the workspace. The checks live in
//! `tests/acceptance.rs` and run under `cargo test`; set
//! `PREFFLOW_ACCEPTANCE=1,2,11` to run a subset.
