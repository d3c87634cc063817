use crate::error::Result;
use crate::tensor::{Real, Tensor};

/// A test-time input transformation placed in front of a victim.
pub trait Defense<T: Real>: Sync {
    fn name(&self) -> String;

    /// Maps `[B, C, H, W]` images to purified images of the same shape.
    /// `ids` identify the examples (one per image) so randomized defenses
    /// can draw per-example streams.
    fn purify(&self, images: &Tensor<T>, ids: &[u64]) -> Result<Tensor<T>>;
}
