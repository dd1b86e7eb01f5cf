//! Dense optical flow from a convolutional network trained without ground
//! truth.
//!
//! Training minimises the Charbonnier-penalised optical flow constraint
//! `sum sqrt((u Ix + v Iy + It)^2 + eps)` over unlabeled frame pairs. At
//! test time the network is wrapped in a coarse-to-fine scheme that
//! repeatedly predicts a residual flow, median filters it, accumulates it
//! and re-warps the second frame.
//!
//! ```no_run
//! use uscnn::{estimate_flow, init_network, read_image, InferenceConfig};
//!
//! let net = init_network(0);
//! let f1 = read_image("frame0.pgm")?;
//! let f2 = read_image("frame1.pgm")?;
//! let cfg = InferenceConfig::for_extents(f1.height(), f1.width());
//! let flow = estimate_flow(&net, &f1, &f2, &cfg)?;
//! # Ok::<(), uscnn::Error>(())
//! ```

pub mod adam;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod image_ops;
pub mod inference;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod synthetic;
pub mod tensor;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use conv::{conv2d_backward, conv2d_forward, upsample_repeat, upsample_repeat_backward, ConvLayer};
pub use error::{Error, Result};
pub use image::{FlowField, Image};
pub use image_ops::{
    bilinear_warp, median_filter_flow, pyramid_downsample, spatiotemporal_derivatives,
    upsample_flow, Derivatives,
};
pub use inference::{estimate_flow, iteration_trace, InferenceConfig, TraceEntry};
pub use io::{flow_to_color, read_flo, read_image, write_flo, write_pgm, RgbImage};
pub use loss::{ofc_loss, ofc_loss_grad, photometric_loss, LossConfig};
pub use metrics::{compute_metrics, FlowMetrics};
pub use network::{init_network, EncoderDecoderNet, LayerSpec, Network, STANDARD_LAYERS};
pub use tensor::{Scalar, Tensor};
pub use trainer::{ingest_pairs, train, train_step, FramePairDataset, PairSource, TrainConfig};
