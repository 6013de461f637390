//! Holds the acceptance suite in `tests/acceptance.rs`. The package sits last
//! in the workspace so that a failing criterion never hides the results of
//! the unit and integration tests of the other crates.
