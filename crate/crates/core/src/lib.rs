//! Interactive weak supervision: prompt-based labeling rules discovered from
//! large-error instances, human or scripted rule annotation, soft rule
//! matching and a boosted ensemble of linear weak learners.

pub mod annotation;
pub mod boosting;
pub mod ensemble;
pub mod features;
pub mod io;
pub mod learner;
pub mod matching;
pub mod pipeline;
pub mod rulegen;
pub mod synth;
pub mod types;
