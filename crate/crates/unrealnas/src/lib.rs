//! Differentiable cell-based architecture search on unreal datasets.
//!
//! The crate covers the full pipeline: deterministic generation of unreal
//! image datasets (random labels on real or fractal images, Gaussian noise),
//! a DARTS-style cell search space with softmax-mixed candidate operations,
//! a bi-level search engine, and analysis utilities (ranking correlation,
//! convergence scoring, distinguishability studies).
//!
//! Everything is seeded through counter-based RNG streams ([`rng`]), so any
//! artifact — dataset, search trajectory, genotype — can be regenerated
//! bit-for-bit from its manifest.

pub mod analysis;
pub mod datagen;
pub mod engine;
pub mod fractal;
pub mod nn;
pub mod rng;
pub mod searchspace;
