//! Flat real vectors used throughout the protocol, plus the handful of dense
//! kernels the solvers need.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

macro_rules! real_vector {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(Vec<f64>);

        impl $name {
            /// Wraps `values`, rejecting NaN and infinities.
            pub fn try_new(values: Vec<f64>) -> Result<Self> {
                if let Some(i) = values.iter().position(|v| !v.is_finite()) {
                    return Err(Error::InvalidArgument(format!(
                        "{} entry {} is not finite",
                        stringify!($name),
                        i
                    )));
                }
                Ok(Self(values))
            }

            pub fn zeros(len: usize) -> Self {
                Self(vec![0.0; len])
            }

            pub fn into_inner(self) -> Vec<f64> {
                self.0
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.0
            }

            pub fn is_finite(&self) -> bool {
                self.0.iter().all(|v| v.is_finite())
            }
        }

        impl From<Vec<f64>> for $name {
            fn from(values: Vec<f64>) -> Self {
                Self(values)
            }
        }

        impl From<&[f64]> for $name {
            fn from(values: &[f64]) -> Self {
                Self(values.to_vec())
            }
        }

        impl Deref for $name {
            type Target = [f64];

            fn deref(&self) -> &[f64] {
                &self.0
            }
        }

        impl DerefMut for $name {
            fn deref_mut(&mut self) -> &mut [f64] {
                &mut self.0
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.0
            }
        }
    };
}

real_vector!(
    /// Model parameters `w`, length equal to the model's parameter count.
    ParamVector
);
real_vector!(
    /// A vector in the consensus space: `z = A w`, `z̄`, or a dual `y`.
    ProjectedVector
);

/// Duals live in the same space as the projected vectors.
pub type DualVector = ProjectedVector;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Elementwise mean of equal-length vectors.
pub fn mean_of<V: AsRef<[f64]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::InvalidArgument("cannot average an empty list".into()))?;
    let len = first.as_ref().len();
    let mut acc = vec![0.0; len];
    for v in vectors {
        let v = v.as_ref();
        if v.len() != len {
            return Err(Error::dims("averaged vector", len, v.len()));
        }
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let k = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite() {
        assert!(ParamVector::try_new(vec![1.0, f64::NAN]).is_err());
        assert!(ProjectedVector::try_new(vec![f64::INFINITY]).is_err());
        assert!(ParamVector::try_new(vec![0.0, -2.5]).is_ok());
    }

    #[test]
    fn mean_checks_lengths() {
        assert_eq!(mean_of(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap(), vec![2.0, 4.0]);
        assert!(mean_of::<Vec<f64>>(&[]).is_err());
        assert!(mean_of(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }
}
