//! Token ids of the synthetic tasks. Ids above [`USED_TOKENS`] are never emitted.

/// Start of every prompt.
pub const BOS: usize = 0;
/// `red, green, blue, yellow` occupy `COLOR_BASE..COLOR_BASE + 4`.
pub const COLOR_BASE: usize = 1;
/// Counts `0..=4` occupy `COUNT_BASE..COUNT_BASE + 5`.
pub const COUNT_BASE: usize = 5;
/// Quadrants in raster order (top-left, top-right, bottom-left, bottom-right).
pub const QUADRANT_BASE: usize = 10;
/// "Which shape is in quadrant q?"
pub const Q_POSITION: usize = 14;
/// "How many rectangles have color c?"
pub const Q_COUNT: usize = 15;
/// "Which color covers the most pixels?"
pub const Q_MAJORITY: usize = 16;
/// `filled square, frame, horizontal bar, vertical bar` occupy `SHAPE_BASE..SHAPE_BASE + 4`.
pub const SHAPE_BASE: usize = 17;
pub const USED_TOKENS: usize = 21;

pub const N_COLORS: usize = 4;
pub const N_QUADRANTS: usize = 4;
pub const N_SHAPES: usize = 4;
pub const MAX_COUNT: usize = 4;

/// RGB value of each color, indexed like the color tokens.
pub const PALETTE: [[f64; 3]; N_COLORS] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];

pub fn color_token(color: usize) -> usize {
    COLOR_BASE + color
}

pub fn count_token(count: usize) -> usize {
    COUNT_BASE + count
}

pub fn shape_token(shape: usize) -> usize {
    SHAPE_BASE + shape
}

pub fn quadrant_token(quadrant: usize) -> usize {
    QUADRANT_BASE + quadrant
}
