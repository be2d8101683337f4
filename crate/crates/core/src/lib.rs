//! Simulation harness for identity-conditioned behaviour in Dictator and
//! Trust games played by language-model personas.
//!
//! The pipeline runs in stages, each with its own module:
//!
//! 1. [`persona`] interviews a base model to build backstories.
//! 2. [`survey`] turns each backstory into per-trait distributions.
//! 3. [`matcher`] pairs human roster entries with personas.
//! 4. [`game`] conditions personas and plays the study instructions.
//! 5. [`analysis`] and [`counterfactual`] summarise partisan gaps.
//!
//! [`pipeline`] strings the stages together with resumable on-disk stores.

pub mod analysis;
pub mod counterfactual;
pub mod game;
pub mod gateway;
pub mod matcher;
pub mod model;
pub mod persona;
pub mod pipeline;
pub mod seed;
pub mod simulator;
pub mod survey;
