use num_traits::Float;

/// Element type for tensors and model parameters.
///
/// Storage is normally `f32`; reductions always accumulate in `f64`
/// regardless of the storage type. Instantiating the whole stack at `f64`
/// gives the high-precision mode used by the gradient checks.
pub trait Scalar:
    Float
    + std::ops::AddAssign
    + std::iter::Sum
    + Default
    + std::fmt::Debug
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64s(self) -> f64;
}

impl Scalar for f32 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64s(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64s(self) -> f64 {
        self
    }
}
