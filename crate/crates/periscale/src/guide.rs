//! The guide under `book/` rendered as rustdoc modules.
//!
//! mdbook cannot run Rust listings as tests, so every chapter is included
//! here as module documentation and `cargo test --doc` compiles and runs
//! each code block. A chapter edit that breaks a listing breaks the build.

#[doc = include_str!("../../../book/src/overview.md")]
pub mod overview {}

#[doc = include_str!("../../../book/src/microstructure.md")]
pub mod microstructure {}

#[doc = include_str!("../../../book/src/bonds.md")]
pub mod bonds {}

#[doc = include_str!("../../../book/src/homogenization.md")]
pub mod homogenization {}

#[doc = include_str!("../../../book/src/correction.md")]
pub mod correction {}

#[doc = include_str!("../../../book/src/fracture.md")]
pub mod fracture {}

#[doc = include_str!("../../../book/src/upscaling.md")]
pub mod upscaling {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
