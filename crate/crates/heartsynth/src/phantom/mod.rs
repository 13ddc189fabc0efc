//! Synthetic cardiac exams with analytically known anatomy.

pub mod augment;
pub mod dataset;
pub mod generator;
pub mod oracle;
pub mod preprocess;

pub use augment::{augment, AugmentConfig};
pub use dataset::{generate_dataset, DatasetGenSpec};
pub use generator::{generate_phantom, PhantomError, PhantomSpec, TextureStyle};
pub use oracle::{oracle_measure, CardiacMeasurements, OracleError};
pub use preprocess::{preprocess, PreprocessError, RawExam};
