pub mod anthropometry;
pub mod camera;
pub mod ergonomics;
pub mod filter;
pub mod harness;
pub mod kinematics;
pub mod lsq;
pub mod observation;
pub mod sim;

// The guide's code listings run as doc-tests: each chapter becomes the docs
// of an empty module.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/kinematics.md")]
    mod kinematics {}
    #[doc = include_str!("../../../book/src/observation.md")]
    mod observation {}
    #[doc = include_str!("../../../book/src/filter.md")]
    mod filter {}
    #[doc = include_str!("../../../book/src/calibration.md")]
    mod calibration {}
    #[doc = include_str!("../../../book/src/rula.md")]
    mod rula {}
    #[doc = include_str!("../../../book/src/experiments.md")]
    mod experiments {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
