//! Scalar abstraction shared by the numeric modules.
//!
//! The solver, networks and agent are written against [`Real`] so they can
//! be instantiated for `f32` or `f64`. Feeder data and reserve quantities
//! stay in `f64`; conversion happens at the boundary.

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display, LowerExp};

/// Floating point type usable by the power-flow solver and the networks.
pub trait Real:
    'static + Send + Sync + Float + FloatConst + NumAssign + FromPrimitive + ToPrimitive + Default + Debug + Display + LowerExp
{
    /// Converts an `f64` constant. Every finite `f64` maps to some value of
    /// the supported types, so this never fails for finite input.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_round_trip() {
        assert_eq!(f64::lit(0.99), 0.99);
        assert_eq!(f32::lit(0.5).as_f64(), 0.5);
    }
}
