//! Typology generation from binary survey questions: response-pattern
//! heads, taxonomic decision trees, and multinomial logistic regression of
//! class membership on psychometric predictors.

pub mod comparison;
pub mod dataset;
pub mod error;
pub mod fixture;
pub mod modeling;
pub mod pattern;
pub mod pipeline;
pub mod psychometrics;
pub mod stats;
pub mod tree;

pub use dataset::{QuestionDef, QuestionKind, QuestionRole, SurveyDataset};
pub use error::{Error, ErrorKind, Result};
