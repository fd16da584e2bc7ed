pub mod autograd;
pub mod config;
pub mod container;
pub mod datapipe;
pub mod dit;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod nn;
pub mod optim;
pub mod params;
pub mod rae;
pub mod scenegen;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use container::Archive;
pub use datapipe::{BatchSampler, Dataset, MaskPolicy, MultiViewSample};
pub use dit::{ConditionTokens, Dit, DitConfig};
pub use geometry::Camera;
pub use image::Image;
pub use rae::{LatentTokens, Rae, RaeConfig};
pub use scenegen::SceneRecord;
pub use tensor::Tensor;
pub use trainer::{Stage, TrainConfig};
