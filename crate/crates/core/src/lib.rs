//! Generative forests (GF) and ensembles of generative trees (EOGT) for
//! tabular data.
//!
//! A generative forest is a set of binary trees over a shared tabular domain
//! together with the empirical training measure. The leaves of all trees
//! intersect into a partition of the domain on which the model density is
//! piecewise uniform. Training is supervised: trees are grown greedily to
//! minimise the expected Bayes risk of telling real data from uniform noise.
//!
//! Modules, bottom-up:
//!
//! * [`data`]: schemas, datasets, CSV ingestion, MCAR masking, synthetic domains.
//! * [`measure`]: supports, empirical and uniform masses, proper losses.
//! * [`forest`]: trees, forests, the cross-tree partition, model files.
//! * [`sampler`]: exact GF sampling and approximate EOGT sampling.
//! * [`trainer`]: greedy top-down induction.
//! * [`imputer`]: missing-data imputation by maximal conditional density.
//! * [`evaluator`]: imputation metrics, entropic optimal transport, k-fold runs.

pub mod data;
pub mod error;
pub mod evaluator;
pub mod forest;
pub mod imputer;
pub mod measure;
pub mod rng;
pub mod rowset;
pub mod sampler;
pub mod trainer;

pub use data::{Dataset, Feature, FeatureDomain, FeatureKind, Schema};
pub use error::{Error, Result};
pub use forest::{GenerativeForest, Mode, NodeId, PartitionElement, Split, Tree};
pub use measure::{Loss, Restriction, Support};
pub use sampler::Ordering;
pub use trainer::{train, TrainConfig, TrainHistory};
