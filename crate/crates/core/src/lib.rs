//! Statistical continuous integration for machine-learning models.
//!
//! A commit is accepted when a condition over the new model's accuracy `n`,
//! the old model's accuracy `o` and their disagreement rate `d` holds on a
//! shared testset. Because the testset is reused across commits, its size is
//! chosen up front so that every verdict is reliable up to a declared failure
//! probability, taking into account how much information about the testset
//! leaks back to the developer.
//!
//! * [`dsl`] parses conditions and CI scripts.
//! * [`bounds`] implements the concentration inequalities.
//! * [`estimator`] turns a script into a sample plan.
pub mod bounds;
pub mod dsl;
pub mod estimator;
pub mod evaluator;
pub mod session;
pub mod simharness;
