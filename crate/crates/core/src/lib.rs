//! Pixel-level classification of multispectral satellite image time series.
//!
//! The pipeline gap-fills irregular, cloud-masked acquisitions onto a
//! regular grid, standardizes each band over all its dates, and trains one
//! of three neural networks (MLP, TempCNN, LTAE) or a random forest. Class
//! imbalance is handled with class weights, SMOTE, ADASYN or majority
//! undersampling, and everything is evaluated with plot-level stratified
//! cross-validation.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod forest;
pub mod imbalance;
pub mod models;
pub mod preprocess;
pub mod rng;
pub mod training;
