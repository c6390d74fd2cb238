use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Element type for tensor buffers. Training defaults to `f64`; `f32` is
/// selectable for speed. Gradient checks always run in `f64`.
pub trait Scalar:
    Float + Sum + Debug + Display + Send + Sync + 'static
{
    const WIDTH_BITS: u32;

    fn of(x: f64) -> Self;
    fn as_f64(self) -> f64;

    /// Little-endian `f64` encoding used by the checkpoint format regardless
    /// of the in-memory width.
    fn to_le_f64_bytes(self) -> [u8; 8] {
        self.as_f64().to_le_bytes()
    }
}

impl Scalar for f64 {
    const WIDTH_BITS: u32 = 64;

    #[inline]
    fn of(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Scalar for f32 {
    const WIDTH_BITS: u32 = 32;

    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}
