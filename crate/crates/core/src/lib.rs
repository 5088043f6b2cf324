//! Domain-expert object detectors.
//!
//! A detector's lower stages are shared by every domain; its upper stages and
//! head are cloned into one expert branch per domain. At test time the domain
//! comes from sensor metadata (altitude, gimbal pitch, capture time) and only
//! that domain's branch runs.

pub mod bbox;
pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod domain;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod expert;
pub mod scenes;
pub mod tensor;
pub mod training;

pub use bbox::BBox;
pub use dataset::{AnnotatedImage, Annotation, Dataset, Raster};
pub use detector::{Detection, DetectorConfig, DetectorParams, RawPredictions};
pub use domain::{DomainDimension, DomainKey, DomainSchema, MetadataRecord};
pub use error::{Error, Result};
pub use evaluation::{EvalConfig, EvalReport};
pub use experiment::{Experiment, Manifest, Model};
pub use expert::{Detector, ExpertDetector, ExpertInit};
pub use tensor::Tensor;
pub use training::{RunRecord, TrainConfig};
