//! Training binary classifiers that stay useful when the data they score is
//! being manipulated by an adversary.
//!
//! The learner picks logistic-regression weights; the adversary answers by
//! moving its feature vectors, within a cosine-similarity budget of where they
//! started, to evade detection. Training is posed as a pessimistic bilevel
//! program: the learner minimizes its loss against the worst optimal response
//! of the adversary. First-order stationarity of that program is written as a
//! semismooth root-finding system via the Fischer-Burmeister function and
//! solved with a globalized Levenberg-Marquardt method.
//!
//! Crate layout, bottom up:
//! - [`problem`]: datasets, hyperparameters, problem assembly and validation
//! - [`objective`]: prediction function, both players' losses, analytic derivatives
//! - [`constraints`]: cosine-similarity constraints and their derivatives
//! - [`stationarity`]: the stationarity residual, its Newton derivative, merit function
//! - [`solver`]: damped Levenberg-Marquardt iteration with line-search globalization
//! - [`metrics`]: confusion counts and the P4 score
//! - [`pipeline`]: chronological splits, baseline and bilevel training, grid search
//! - [`data`]: corpus and model file formats, synthetic drifting data
//! - [`diagnostics`]: finite-difference derivative checks and witness demos

pub mod constraints;
pub mod data;
pub mod diagnostics;
pub mod metrics;
pub mod objective;
pub mod pipeline;
pub mod problem;
pub mod solver;
pub mod stationarity;
