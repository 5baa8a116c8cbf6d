//! Learned adaptive front-ends for end-to-end single-channel source
//! separation, built on a small reverse-mode autodiff engine.

pub mod aet;
pub mod autodiff;
pub mod cli;
pub mod corpus;
pub mod frontends;
pub mod metrics;
pub mod par;
pub mod separator;
pub mod trainer;
