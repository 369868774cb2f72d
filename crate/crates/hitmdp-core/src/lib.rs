//! Core algorithms for the HiT-MDP option framework at desk scale.
//!
//! Everything in this crate is pure computation over finite spaces:
//! trajectory densities and optimality likelihoods ([`mdp`]), exact soft
//! option policy iteration ([`solver`]), finite HiT-MDP homomorphisms with
//! machine-checked value equivalence ([`homomorphism`]), a minimal dense
//! network stack with manual backprop ([`nn`]), the off-policy VMOC agent
//! ([`vmoc`]), built-in deterministic environments ([`env`]), and a
//! cold-start latent-reasoning trainer over enumerable discrete latent
//! sequences ([`coldstart`]).
//!
//! The crate is `no_std`-compatible (`default-features = false`); it only
//! needs `alloc`. IO, file formats and the CLI live in the companion
//! `hitmdp-lab` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;

pub mod coldstart;
pub mod env;
pub mod homomorphism;
pub mod math;
pub mod mdp;
pub mod nn;
pub mod rng;
pub mod solver;
pub mod vmoc;

pub use mdp::{FiniteHitMdp, RegularizerMode, TabularPolicies, Trajectory};
pub use solver::{SoftQTables, TemperaturePair};
