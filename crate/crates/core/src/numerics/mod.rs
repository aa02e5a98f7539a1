//! Statistical and linear-algebra kernels.

pub mod bvn;
pub mod gaussian;
pub mod gchi2;
pub mod mvn;
pub mod normal;
pub mod riccati;
pub mod rng;

pub use bvn::{bvn_cdf, bvn_upper};
pub use gaussian::{sample_gaussian, GaussianSampler, GaussianSpec};
pub use gchi2::gchi2_tail_prob;
pub use mvn::{mvn_rect_prob, mvn_rect_prob_with, MvnOptions, Rect, RectProb};
pub use normal::{std_normal_cdf, std_normal_pdf, std_normal_quantile};
pub use riccati::{solve_dare, solve_dare_capped};
pub use rng::RngStream;
