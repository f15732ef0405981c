//! Adaptive KL-regularized multi-agent soft actor-critic on graph games.
//!
//! The crate is organised bottom-up: [`graph`] holds maps and hop
//! distances, [`game`] the pursuit and confrontation dynamics,
//! [`reference`] the scripted policies, [`tensor`] a small reverse-mode
//! differentiator, [`nets`] the attention encoder and pointer actor,
//! [`trainer`] the regularized actor-critic update, [`verifier`] a tabular
//! checker for the regularized Bellman operator and [`experiment`] the
//! drivers used by the command-line tool.

pub mod graph;
pub mod game;
pub mod reference;
pub mod par;
pub mod tensor;
pub mod nets;
pub mod trainer;
pub mod verifier;
pub mod gradcheck;
pub mod mapgen;
pub mod config;
pub mod experiment;
