use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("invalid nside {0}: must be a power of two in [1, 2^29]")]
    InvalidNSide(u64),
    #[error("pixel index {index} out of range for nside {nside} (npix {npix})")]
    IndexOutOfRange { index: u64, nside: u32, npix: u64 },
    #[error("invalid resolution pair: coarse nside {coarse}, fine nside {fine}")]
    InvalidResolutionPair { coarse: u32, fine: u32 },
    #[error("{what} {value} is not a power of four")]
    NotPowerOfFour { what: &'static str, value: usize },
    #[error("{len} entries are not divisible into runs of {size}")]
    Indivisible { len: usize, size: usize },
    #[error("num_faces must be 8 or 12, got {0}")]
    InvalidFaceCount(usize),
    #[error("cannot merge a grid at nside 1")]
    CannotMerge,
    #[error("shift {shift} out of range [0, {limit})")]
    ShiftOutOfRange { shift: usize, limit: usize },
    #[error("plan and partition are on different grids ({plan} vs {partition} patches)")]
    GridMismatch { plan: usize, partition: usize },
}
