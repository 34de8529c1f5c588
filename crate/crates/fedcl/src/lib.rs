//! Deterministic simulator for federated self-supervised pretraining.
//!
//! The crate models a server and a set of clients that jointly pretrain a
//! small encoder on synthetic partitioned volumes, under several protocol
//! variants that trade accuracy against communication:
//!
//! - `fedmoco` / `fcl` — momentum-contrast training with a local memory
//!   bank; `fcl` additionally exchanges bank features across clients and
//!   attracts same-partition features (global structural matching).
//! - `fedbyol` / `fclopt` — negative-free online/target training; `fclopt`
//!   also synchronizes the target network.
//! - `fclopt-ptnu` — replaces the target download with a client-side
//!   iterative update toward the online network, driven by one scalar.
//! - `fclopt-ptnu-dp` — additionally predicts that scalar from client
//!   reports, removing target uploads except periodic calibration.
//!
//! Every message is metered by a byte-exact ledger, every run is a pure
//! function of its config and seed, and all gradients are verified against
//! central finite differences.
//!
//! Start with the `examples/` directory: each file is a runnable tour of
//! one capability (`cargo run -p fedcl --example run_federation`). The
//! `fedcl` binary wraps the same entry points as subcommands.

pub mod cli;
pub mod contrastive;
pub mod data;
pub mod encoder;
pub mod error;
pub mod numerics;
pub mod protocol;

pub use error::{Error, Result};
