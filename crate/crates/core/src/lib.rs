//! Numerics and domain model for remote expert elicitation workshops:
//! beta fitting of elicited judgments, pooling into a correlated bivariate
//! prior, and assurance-based sample size search for binomial
//! non-inferiority trials.

pub mod aggregate;
pub mod assurance;
pub mod distfit;
pub mod elicitation;
pub mod pearson4;
pub mod quad;
pub mod special;
pub mod survey;
