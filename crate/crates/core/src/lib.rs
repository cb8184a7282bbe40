// NaN must fall into the error branch of every range check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adversarial;
pub mod alignment;
pub mod autodiff;
pub mod batch;
pub mod cls;
pub mod config;
pub mod dml;
pub mod encoders;
pub mod error;
pub mod experiment;
pub mod io;
pub mod metrics;
pub mod params;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Graph32 = autodiff::Graph<f32>;
pub type Graph64 = autodiff::Graph<f64>;
pub type ParamStore32 = params::ParamStore<f32>;
pub type ParamStore64 = params::ParamStore<f64>;
pub type PhonemeBatch32 = batch::PhonemeBatch<f32>;
pub type PhonemeBatch64 = batch::PhonemeBatch<f64>;
pub type FlatEmbeddings32 = batch::FlatEmbeddings<f32>;
pub type FlatEmbeddings64 = batch::FlatEmbeddings<f64>;
pub type AsyPParams32 = dml::AsyPParams<f32>;
pub type AsyPParams64 = dml::AsyPParams<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
