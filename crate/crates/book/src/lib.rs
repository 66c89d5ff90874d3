//! The guide in `book/src`, compiled so `cargo test` runs every snippet.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/stft.md")]
pub mod stft {}

#[doc = include_str!("../../../book/src/models.md")]
pub mod models {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/streaming.md")]
pub mod streaming {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/checkpoints.md")]
pub mod checkpoints {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
