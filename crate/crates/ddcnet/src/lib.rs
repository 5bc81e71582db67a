//! Receptive-field-guided design and training of dilated-convolution networks
//! for dense prediction (optical flow).
//!
//! The crate is organized around a simple pipeline:
//!
//! * [`tensor`] — NHWC tensors and the differentiable primitives (dilated
//!   conv, ReLU, nearest upsampling, channel concat) everything else is
//!   built from.
//! * [`net`] — layer/network descriptions, the DDCNet-B0/B1 builders and
//!   generic dilation schedules, forward/backward over a whole net, plus
//!   text spec files and binary checkpoints.
//! * [`erf`] — numerical effective-receptive-field measurement (gradient
//!   maps, FWHM, gridding score, exact support oracle).
//! * [`design`] — choosing network depth from a flow-magnitude histogram so
//!   the measured ERF covers the motion range.
//! * [`flow`] — dense flow fields, endpoint-error metrics, `.flo` I/O and
//!   color-wheel rendering.
//! * [`train`] — He init, Adam, the AEE training loss, synthetic data,
//!   augmentation and the training loop.

pub mod design;
pub mod erf;
mod error;
pub mod flow;
pub mod io;
pub mod net;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
