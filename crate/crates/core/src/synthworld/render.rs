use super::{CellContent, Color, Grid, Shape, GRID_SIDE};

pub const CELL_PX: usize = 8;
pub const IMAGE_SIDE: usize = GRID_SIDE * CELL_PX;
pub const PIXEL_LEN: usize = IMAGE_SIDE * IMAGE_SIDE * 3;

fn rgb(color: Color) -> [f32; 3] {
    match color {
        Color::Red => [0.9, 0.1, 0.1],
        Color::Green => [0.1, 0.7, 0.2],
        Color::Blue => [0.1, 0.2, 0.9],
        Color::Yellow => [0.95, 0.85, 0.1],
    }
}

/// Whether pixel `(x, y)` of an 8×8 cell belongs to the glyph.
pub(crate) fn glyph_mask(shape: Shape, x: usize, y: usize) -> bool {
    let (fx, fy) = (x as f32 + 0.5, y as f32 + 0.5);
    match shape {
        Shape::Square => (1..7).contains(&x) && (1..7).contains(&y),
        Shape::Circle => (fx - 4.0).powi(2) + (fy - 4.0).powi(2) <= 9.0,
        // Apex at the top, base on row 6.
        Shape::Triangle => (1..7).contains(&y) && (fx - 4.0).abs() <= 0.6 * (fy - 1.0) + 0.3,
        // Plus sign with a hollow centre.
        Shape::Star => {
            let bar = (3..5).contains(&x) || (3..5).contains(&y);
            bar && (1..7).contains(&x) && (1..7).contains(&y) && !((3..5).contains(&x) && (3..5).contains(&y))
        }
    }
}

/// Flat-coloured glyphs on a white background, one 8×8 block per cell.
pub fn render(grid: &Grid) -> Vec<f32> {
    let mut px = vec![1.0f32; PIXEL_LEN];
    for (k, cell) in grid.0.iter().enumerate() {
        let CellContent::Glyph { shape, color } = *cell else { continue };
        let (oy, ox) = ((k / GRID_SIDE) * CELL_PX, (k % GRID_SIDE) * CELL_PX);
        let c = rgb(color);
        for y in 0..CELL_PX {
            for x in 0..CELL_PX {
                if glyph_mask(shape, x, y) {
                    let base = ((oy + y) * IMAGE_SIDE + ox + x) * 3;
                    px[base..base + 3].copy_from_slice(&c);
                }
            }
        }
    }
    px
}
