//! Network representation, forward pass, training and data ingestion.

pub mod data;
pub mod layer;
pub mod mnist;
pub mod network;
pub mod snapshot;
pub mod train;

pub use data::{Dataset, Split};
pub use layer::{Activation, ConvGeometry, Layer, LayerKind};
pub use mnist::{load_mnist, load_mnist_split, Mnist};
pub use network::{ForwardTrace, Network, NetworkBuilder};
pub use snapshot::{capture_snapshots, capture_snapshots_with, LayerSnapshot, SnapshotOptions};
pub use train::{train_sgd, Loss, TrainConfig, TrainOutcome, Trainer};
