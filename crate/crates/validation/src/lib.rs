//! End-to-end acceptance runs live in `tests/acceptance.rs`; they train full
//! MNIST models and take several minutes, so they are kept out of the
//! front-end crate's quicker test suite.
