//! Burned-area segmentation toolkit.
//!
//! The crate covers the full workflow for delineating burned areas from
//! 4-band (blue, green, red, NIR) post-fire imagery:
//!
//! * [`raster`]: georeferenced grids, AOI clipping, polygon burning, cloud
//!   subtraction, nearest-neighbour land-cover resampling, GeoTIFF I/O.
//! * [`patching`]: fixed-size patch extraction and overlap-averaging mosaics.
//! * [`blocksplit`]: spatial block grids and seeded train/val/test splits.
//! * [`models`]: U-Net/ResNet34 and SegFormer/MiT-B2 style networks with a
//!   burned-area head and an optional auxiliary land-cover head.
//! * [`training`]: Dice losses, single/multi-task objectives, augmentation,
//!   AdamW training with optional mixed precision and dynamic loss scaling.
//! * [`tta`]: dihedral test-time augmentation and timed scene prediction.
//! * [`metrics`]: confusion counts, Dice, IoU and tabular run reports.

pub mod blocksplit;
pub mod error;
pub mod metrics;
pub mod models;
pub mod patching;
pub mod raster;
pub mod training;
pub mod tta;

pub use error::{Error, Result};
pub use raster::{GeoTransform, GridGeometry, LandCoverScheme, RasterGrid, RasterKind, SampleType};
