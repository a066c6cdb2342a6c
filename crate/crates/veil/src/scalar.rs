//! Element type abstraction for the tensor core.
//!
//! All tensor math is generic over [`Scalar`], which is implemented for `f32`
//! and `f64`. The crate root exports concrete aliases (`veil::Tensor` is the
//! `f64` instantiation used by the probabilistic layer); the generic core
//! exists so the same kernels can be checked at both precisions.

use std::cell::RefCell;
use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

use crate::tensor::tape::Tape;

mod sealed {
    pub trait Sealed {}
}

/// Floating-point element of a tensor.
///
/// Beyond the numeric bounds this carries the per-thread gradient tape for the
/// type: tapes are monomorphic thread-locals, so each scalar type records onto
/// its own tape and mixed-precision graphs stay separated.
pub trait Scalar:
    Float + Sum + Debug + Display + Send + Sync + sealed::Sealed + 'static
{
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;

    #[doc(hidden)]
    fn with_tape<R>(f: impl FnOnce(&RefCell<Tape<Self>>) -> R) -> R;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl sealed::Sealed for $t {}

        impl Scalar for $t {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn into_f64(self) -> f64 {
                self as f64
            }

            fn with_tape<R>(f: impl FnOnce(&RefCell<Tape<Self>>) -> R) -> R {
                thread_local! {
                    static TAPE: RefCell<Tape<$t>> = RefCell::new(Tape::new());
                }
                TAPE.with(f)
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);
