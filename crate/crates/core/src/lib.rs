//! Geometry, evaluation and synthetic data for domain-adaptive spatio-temporal
//! action localization.

pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod records;
pub mod synth;
pub mod textio;

pub use error::{Error, Result};
pub use geometry::{decode_box_delta, encode_box_delta, iou_2d, BoundingBox};
pub use losses::{Domain, MapReduction};
pub use records::{iou_3d, ActionTube, Detection, GroundTruthInstance, TubeFrame};
