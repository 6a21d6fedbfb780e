//! Preference-data forging and preference optimization for extractive
//! reading comprehension.

pub mod corpus;
pub mod hashing;
pub mod io;
pub mod metrics;
pub mod model_forge;
pub mod pipeline;
pub mod pairs;
pub mod policy;
pub mod pref_opt;
pub mod rule_forge;
pub mod synth;
pub mod text;
