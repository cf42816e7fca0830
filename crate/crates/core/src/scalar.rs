//! Scalar abstraction over the two supported precisions.
//!
//! f32 is the training precision, f64 the audit precision used by the
//! finite-difference gradient checks.

use std::fmt::{Debug, Display, LowerExp};

/// Floating-point element type of tensors.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + LowerExp
    + Default
    + Send
    + Sync
    + 'static
{
    /// Dtype code in the GST1 tensor file format (0 = f32, 1 = f64).
    const DTYPE: u8;
    /// Serialized size in bytes.
    const BYTES: usize;
    /// Largest representable value strictly below 1, used to pin sigmoid
    /// outputs inside the open interval (0, 1).
    const BELOW_ONE: Self;
    /// Human-readable precision name ("f32" / "f64").
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 0;
    const BYTES: usize = 4;
    const BELOW_ONE: Self = f32::from_bits(0x3f7f_ffff);
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 8;
    const BELOW_ONE: Self = f64::from_bits(0x3fef_ffff_ffff_ffff);
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn below_one_is_the_predecessor_of_one() {
        assert!(f32::BELOW_ONE < 1.0);
        assert_eq!(f32::BELOW_ONE.to_bits() + 1, 1.0f32.to_bits());
        assert!(f64::BELOW_ONE < 1.0);
        assert_eq!(f64::BELOW_ONE.to_bits() + 1, 1.0f64.to_bits());
    }

    #[test]
    fn le_round_trip() {
        let mut buf = Vec::new();
        1.5f32.write_le(&mut buf);
        (-2.25f64).write_le(&mut buf);
        assert_eq!(f32::read_le(&buf[..4]), 1.5);
        assert_eq!(f64::read_le(&buf[4..]), -2.25);
    }
}
