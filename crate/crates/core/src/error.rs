use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid camera: {0}")]
    InvalidCamera(&'static str),
    #[error("view direction is degenerate (splat mean coincides with camera position)")]
    DegenerateDirection,
    #[error("splat {index} has a non-finite {field}")]
    NonFinite { index: usize, field: &'static str },
    #[error("invalid splat {index}: {reason}")]
    InvalidSplat { index: usize, reason: &'static str },
    #[error("forward render target is missing or does not match the frame ({0})")]
    ForwardTargetMismatch(&'static str),
    #[error("gradient image is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    GradientImageSize {
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("interlock ordering violated at pixel ({x}, {y}) by splat {splat} (previous splat {previous})")]
    InterlockViolation {
        x: u32,
        y: u32,
        splat: u32,
        previous: u32,
    },
    #[error("subgroup size {0} is not a positive multiple of 4 no larger than 64")]
    SubgroupSize(usize),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
