//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks it in reverse creation order. Besides the usual differentiable
//! primitives the tape carries the straight-through nodes the dead-zone
//! quantizer is built from:
//!
//! | node               | forward            | backward              |
//! |--------------------|--------------------|-----------------------|
//! | `ste_round`        | round, ties-to-even| identity              |
//! | `ste_relu`         | `max(x, 0)`        | identity              |
//! | `ste_clip`         | clip to `[lo, hi]` | identity              |
//! | `masked_clip`      | clip to `[lo, hi]` | identity inside range |
//! | `zero_grad_sign`   | `sign(x)`          | zero                  |
//! | `stop_gradient`    | identity           | zero                  |

pub mod kernels;
mod tape;

pub use tape::{NodeId, Tape};
