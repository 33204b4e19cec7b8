//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal into `Self`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("representable count")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Chunk length used by ordered reductions; fixed so that results do not
/// depend on the thread count.
pub(crate) const REDUCE_CHUNK: usize = 4096;

/// Inner product with a fixed reduction order.
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), b.len());
    let partial: Vec<T> = a
        .par_chunks(REDUCE_CHUNK)
        .zip(b.par_chunks(REDUCE_CHUNK))
        .map(|(x, y)| {
            let mut acc = T::zero();
            for (&p, &q) in x.iter().zip(y) {
                acc += p * q;
            }
            acc
        })
        .collect();
    partial.into_iter().fold(T::zero(), |s, v| s + v)
}

pub fn norm_sq<T: Real>(a: &[T]) -> T {
    dot(a, a)
}

pub fn norm<T: Real>(a: &[T]) -> T {
    norm_sq(a).sqrt()
}

/// `y += alpha * x`
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    use rayon::prelude::*;
    y.par_iter_mut().zip(x.par_iter()).for_each(|(yi, &xi)| *yi += alpha * xi);
}

/// Relative L2 distance `‖a - b‖ / ‖b‖` (absolute when `b` is zero).
pub fn relative_l2<T: Real>(a: &[T], b: &[T]) -> T {
    let diff: Vec<T> = a.iter().zip(b).map(|(&x, &y)| x - y).collect();
    let nb = norm(b);
    let nd = norm(&diff);
    if nb > T::zero() {
        nd / nb
    } else {
        nd
    }
}
