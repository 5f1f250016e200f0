//! Tokenized graph transformer.
//!
//! A graph is fed to a standard transformer by treating every node and edge
//! as an independent token, augmented with orthonormal per-node identifier
//! vectors and per-type identifier vectors. With the right identifiers, the
//! attention heads of a single layer can reproduce, head for head, the
//! binary basis tensors of maximally expressive permutation-equivariant
//! linear layers, which makes the transformer at least as expressive as an
//! invariant graph network built from such layers.
//!
//! The crate provides:
//!
//! - [`numerics`]: dense matrices, seeded RNG, eigendecomposition, AdamW;
//! - [`graphs`]: sparse graphs, random-graph generation, Laplacians,
//!   hop distances, permutation actions, dense tensor form;
//! - [`equivariant`]: equivalence classes, basis tensors, equivariant linear
//!   layers, and the stacked invariant-network reference model;
//! - [`identifiers`]: node and type identifier constructions and their
//!   training-time augmentations;
//! - [`tokenizer`]: graph/tensor to token-sequence conversion;
//! - [`attention`]: multihead self-attention, transformer layers, kernelized
//!   attention, manual gradients, attention-distance analysis;
//! - [`constructive`]: explicit parameter constructions that make attention
//!   heads match equivariant basis tensors, with verifiers against
//!   brute-force oracles;
//! - [`experiments`]: the synthetic basis-approximation study, a
//!   structure-sensitive regression ablation, and analysis reports.

pub mod attention;
pub mod constructive;
pub mod equivariant;
pub mod experiments;
pub mod graphs;
pub mod identifiers;
pub mod numerics;
pub mod tokenizer;
