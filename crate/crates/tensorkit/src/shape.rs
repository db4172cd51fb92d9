/// Tensor shape in NHWC order: (batch, height, width, channels).
///
/// Height indexes subcarriers and width indexes OFDM symbols for every grid
/// in this workspace. Non-image tensors use trailing/leading ones, e.g. a
/// scalar is `[1, 1, 1, 1]` and a `K x C` table is `[K, 1, 1, C]`.
pub type Shape = [usize; 4];

pub const SCALAR: Shape = [1, 1, 1, 1];

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Number of spatial positions across the batch (`n * h * w`).
pub fn positions(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}
