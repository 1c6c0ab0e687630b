//! Binarized Bayesian CNNs with spatial (channel-wise) MC dropout, and a
//! cycle-level simulator of their execution on MTJ-based compute-in-memory
//! crossbars.

pub mod checkpoint;
pub mod cost;
pub mod crossbar;
pub mod data;
pub mod dropout;
pub mod error;
pub mod inference;
pub mod net;
pub mod ood;
pub mod tensor;
pub mod train;

pub use crossbar::{CrossbarLayout, DropoutConfigMode, InputStream, MtjDropoutModule, NetworkLayouts, Strategy};
pub use data::{Dataset, DatasetSplit};
pub use dropout::{DropoutPlacement, HyperParams, PlacementMode, SpatialMask};
pub use error::{Error, Result};
pub use inference::{mc_predict, McPrediction};
pub use net::{BinaryConvNet, Layer, LenetSpec};
pub use ood::{OodDecision, OodRule, RuleReading, Verdict};
pub use tensor::{BinaryView, ConvGeometry, ConvWeight, Tensor4};
pub use train::{TrainConfig, Trainer};
