pub mod array;
pub mod benchmark;
pub mod cohort;
pub mod ehr;
pub mod features;
pub mod lightsaber;
pub mod scalar;
pub mod time;

pub use scalar::Scalar;

pub type LinearClassifier = lightsaber::model::LinearModel<f64>;
pub type RecurrentClassifier = lightsaber::model::GruModel<f64>;
