#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod autodiff;
pub mod config;
pub mod deformable_scale;
pub mod error;
pub mod feature_codec;
pub mod global_refine;
pub mod graph_builder;
pub mod kernels;
pub mod message_passing;
pub mod objective;
pub mod params;
pub mod patch_ops;
pub mod pipeline;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{FeatureMap, ImageTensor, Tensor};
