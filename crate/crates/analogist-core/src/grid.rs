//! 2x2 grid composition: the composite image, its query-pasted variant, the
//! inpainting mask, and the per-resolution quadrant index maps used by the
//! attention surgeries.

use alloc::{format, vec::Vec};

use crate::error::{Error, Result};
use crate::raster::{resize_bilinear, Image, Mask};

/// The four analogy roles. Roles map to fixed quadrants: A top-left,
/// A' top-right, B bottom-left, B' bottom-right. Layout swaps move image
/// payloads between cells; the quadrant geometry (and therefore every
/// attention index map) never changes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    A,
    APrime,
    B,
    BPrime,
}

/// Quadrants of the 2x2 grid in reading order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrant {
    TopLeft,
    TopRight,
    BottomLeft,
    BottomRight,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [
        Quadrant::TopLeft,
        Quadrant::TopRight,
        Quadrant::BottomLeft,
        Quadrant::BottomRight,
    ];

    /// (row offset, col offset) of this quadrant in units of the cell size.
    #[inline]
    pub fn offset(self) -> (usize, usize) {
        match self {
            Quadrant::TopLeft => (0, 0),
            Quadrant::TopRight => (0, 1),
            Quadrant::BottomLeft => (1, 0),
            Quadrant::BottomRight => (1, 1),
        }
    }
}

/// Placement of the three input images in the grid. The generated cell is
/// always the bottom-right quadrant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellLayout {
    pub a: Quadrant,
    pub a_prime: Quadrant,
    pub b: Quadrant,
}

impl Default for CellLayout {
    fn default() -> Self {
        CellLayout {
            a: Quadrant::TopLeft,
            a_prime: Quadrant::TopRight,
            b: Quadrant::BottomLeft,
        }
    }
}

impl CellLayout {
    /// Layout for tasks where A aligns with B instead of A': the A' and B
    /// payloads trade places so the grid reads as an aligned task again.
    pub fn swapped() -> Self {
        CellLayout {
            a: Quadrant::TopLeft,
            a_prime: Quadrant::BottomLeft,
            b: Quadrant::TopRight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = [self.a, self.a_prime, self.b];
        for (i, c) in cells.iter().enumerate() {
            if *c == Quadrant::BottomRight {
                return Err(Error::InvalidLayout(
                    "the bottom-right quadrant is reserved for the generated cell".into(),
                ));
            }
            for other in cells.iter().skip(i + 1) {
                if c == other {
                    return Err(Error::InvalidLayout("duplicate quadrant assignment".into()));
                }
            }
        }
        Ok(())
    }

    /// The image occupying `quadrant`, out of the three placed inputs.
    fn occupant(&self, quadrant: Quadrant) -> Option<Role> {
        if self.a == quadrant {
            Some(Role::A)
        } else if self.a_prime == quadrant {
            Some(Role::APrime)
        } else if self.b == quadrant {
            Some(Role::B)
        } else {
            None
        }
    }
}

/// The composed 2x2 grid, its query-pasted variant, and the inpainting mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    /// Composite with the bottom-right cell black (the conditioning image).
    pub grid_image: Image,
    /// Same composite with the bottom-left occupant pasted into the
    /// bottom-right cell (the noising target for latent initialization).
    pub pasted_image: Image,
    /// 1 on the bottom-right quadrant, 0 elsewhere.
    pub mask: Mask,
    /// (H, W) of one cell in pixels.
    pub cell_size: (usize, usize),
    pub layout: CellLayout,
}

impl ImageGrid {
    /// Crops one quadrant out of an arbitrary grid-sized image.
    pub fn crop_quadrant(&self, image: &Image, quadrant: Quadrant) -> Image {
        let (ch, cw) = self.cell_size;
        let (qr, qc) = quadrant.offset();
        image.crop(qr * ch, qc * cw, ch, cw)
    }
}

/// Builds the binary inpainting mask for a cell size: (2H)x(2W), one exactly
/// where row >= H and col >= W.
pub fn make_mask(cell_size: (usize, usize)) -> Result<Mask> {
    let (ch, cw) = cell_size;
    check_cell_size(cell_size)?;
    let mut mask = Mask::new(2 * ch, 2 * cw);
    for r in ch..2 * ch {
        for c in cw..2 * cw {
            mask.data[r * 2 * cw + c] = 1.0;
        }
    }
    Ok(mask)
}

fn check_cell_size(cell_size: (usize, usize)) -> Result<()> {
    let (ch, cw) = cell_size;
    if ch == 0 || cw == 0 || ch % 2 != 0 || cw % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "cell size {ch}x{cw} must be positive and even"
        )));
    }
    Ok(())
}

/// Arranges the example pair and the query into the 2x2 grid.
///
/// Each input is bilinearly resized to `cell_size` and placed per `layout`;
/// the bottom-right cell of `grid_image` stays black. `pasted_image` differs
/// only in the bottom-right cell, which receives a copy of whatever occupies
/// the bottom-left cell (B by default, A' in the swapped layout).
pub fn compose_grid(
    a: &Image,
    a_prime: &Image,
    b: &Image,
    layout: CellLayout,
    cell_size: (usize, usize),
) -> Result<ImageGrid> {
    layout.validate()?;
    check_cell_size(cell_size)?;
    for (name, img) in [("a", a), ("a_prime", a_prime), ("b", b)] {
        if img.is_empty() {
            return Err(Error::InvalidInput(format!("input image {name} is empty")));
        }
    }
    let (ch, cw) = cell_size;
    let cells = [
        (layout.a, resize_bilinear(a, ch, cw)?),
        (layout.a_prime, resize_bilinear(a_prime, ch, cw)?),
        (layout.b, resize_bilinear(b, ch, cw)?),
    ];
    let mut grid_image = Image::new(2 * ch, 2 * cw);
    for (quadrant, img) in &cells {
        let (qr, qc) = quadrant.offset();
        grid_image.blit(img, qr * ch, qc * cw);
    }
    let mut pasted_image = grid_image.clone();
    let bottom_left_role = layout
        .occupant(Quadrant::BottomLeft)
        .expect("validated layout always fills the bottom-left cell");
    let query = cells
        .iter()
        .find(|(q, _)| layout.occupant(*q) == Some(bottom_left_role))
        .map(|(_, img)| img)
        .expect("occupant image present");
    pasted_image.blit(query, ch, cw);
    Ok(ImageGrid {
        grid_image,
        pasted_image,
        mask: make_mask(cell_size)?,
        cell_size,
        layout,
    })
}

/// Replaces the bottom-right cell of `pasted_image` with `b` (resized to the
/// cell size). `grid_image` is left untouched.
pub fn paste_query(grid: &ImageGrid, b: &Image) -> Result<ImageGrid> {
    if b.is_empty() {
        return Err(Error::InvalidInput("query image is empty".into()));
    }
    let (ch, cw) = grid.cell_size;
    let resized = resize_bilinear(b, ch, cw)?;
    let mut out = grid.clone();
    out.pasted_image.blit(&resized, ch, cw);
    Ok(out)
}

/// Flattened row-major index sets of the four quadrants of an (h, w)
/// attention feature map. Precomputed once per resolution and shared by both
/// attention surgeries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionIndexMap {
    pub h: usize,
    pub w: usize,
    tl: Vec<usize>,
    tr: Vec<usize>,
    bl: Vec<usize>,
    br: Vec<usize>,
}

impl RegionIndexMap {
    #[inline]
    pub fn quadrant(&self, q: Quadrant) -> &[usize] {
        match q {
            Quadrant::TopLeft => &self.tl,
            Quadrant::TopRight => &self.tr,
            Quadrant::BottomLeft => &self.bl,
            Quadrant::BottomRight => &self.br,
        }
    }

    /// Index set for a role under the fixed role-to-quadrant convention.
    #[inline]
    pub fn role(&self, role: Role) -> &[usize] {
        match role {
            Role::A => &self.tl,
            Role::APrime => &self.tr,
            Role::B => &self.bl,
            Role::BPrime => &self.br,
        }
    }

    #[inline]
    pub fn positions(&self) -> usize {
        self.h * self.w
    }
}

/// Precomputes the quadrant index sets for an (h, w) feature map. Both sides
/// must be even and at least 2.
pub fn region_indices(h: usize, w: usize) -> Result<RegionIndexMap> {
    if h < 2 || w < 2 || h % 2 != 0 || w % 2 != 0 {
        return Err(Error::InvalidResolution { h, w });
    }
    let quarter = h * w / 4;
    let mut tl = Vec::with_capacity(quarter);
    let mut tr = Vec::with_capacity(quarter);
    let mut bl = Vec::with_capacity(quarter);
    let mut br = Vec::with_capacity(quarter);
    for r in 0..h {
        for c in 0..w {
            let idx = r * w + c;
            match (r < h / 2, c < w / 2) {
                (true, true) => tl.push(idx),
                (true, false) => tr.push(idx),
                (false, true) => bl.push(idx),
                (false, false) => br.push(idx),
            }
        }
    }
    Ok(RegionIndexMap { h, w, tl, tr, bl, br })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn gray(h: usize, w: usize, v: f32) -> Image {
        Image::filled(h, w, [v, v, v])
    }

    /// Brute-force per-pixel quadrant classifier used as the oracle for
    /// `region_indices`.
    fn oracle_quadrant(h: usize, w: usize, idx: usize) -> Quadrant {
        let (r, c) = (idx / w, idx % w);
        match (r < h / 2, c < w / 2) {
            (true, true) => Quadrant::TopLeft,
            (true, false) => Quadrant::TopRight,
            (false, true) => Quadrant::BottomLeft,
            (false, false) => Quadrant::BottomRight,
        }
    }

    #[test]
    fn br_indices_for_4x4_match_enumeration() {
        // Oracle: enumerate all 16 (r, c) pairs and keep r >= 2 && c >= 2.
        let mut expected = vec![];
        for r in 0..4 {
            for c in 0..4 {
                if r >= 2 && c >= 2 {
                    expected.push(r * 4 + c);
                }
            }
        }
        assert_eq!(expected, vec![10, 11, 14, 15]);
        let map = region_indices(4, 4).unwrap();
        assert_eq!(map.quadrant(Quadrant::BottomRight), expected.as_slice());
    }

    #[test]
    fn two_by_two_has_one_index_per_quadrant() {
        let map = region_indices(2, 2).unwrap();
        assert_eq!(map.quadrant(Quadrant::TopLeft), &[0]);
        assert_eq!(map.quadrant(Quadrant::TopRight), &[1]);
        assert_eq!(map.quadrant(Quadrant::BottomLeft), &[2]);
        assert_eq!(map.quadrant(Quadrant::BottomRight), &[3]);
    }

    #[test]
    fn sixteen_square_partitions_with_equal_sizes() {
        let map = region_indices(16, 16).unwrap();
        let mut seen = vec![false; 256];
        for q in Quadrant::ALL {
            let idx = map.quadrant(q);
            assert_eq!(idx.len(), 64);
            for &i in idx {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
                assert_eq!(oracle_quadrant(16, 16, i), q);
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn odd_resolution_is_rejected() {
        assert!(matches!(region_indices(5, 4), Err(Error::InvalidResolution { .. })));
        assert!(matches!(region_indices(4, 0), Err(Error::InvalidResolution { .. })));
    }

    #[test]
    fn mask_matches_definition() {
        let mask = make_mask((256, 256)).unwrap();
        assert_eq!((mask.h, mask.w), (512, 512));
        for r in (0..512).step_by(17) {
            for c in (0..512).step_by(17) {
                let expected = if r >= 256 && c >= 256 { 1.0 } else { 0.0 };
                assert_eq!(mask.get(r, c), expected, "at ({r},{c})");
            }
        }
        assert_eq!(mask.sum(), 256.0 * 256.0);
    }

    #[test]
    fn smallest_mask_is_2x2() {
        // Cell size must be even, so the smallest legal mask is 4x4; the
        // 2x2 shape from a (1,1) cell is rejected.
        assert!(make_mask((1, 1)).is_err());
        let mask = make_mask((2, 2)).unwrap();
        assert_eq!(mask.data[0..4], [0.0, 0.0, 0.0, 0.0]);
        assert_eq!(mask.get(2, 2), 1.0);
        assert_eq!(mask.get(2, 1), 0.0);
    }

    #[test]
    fn compose_places_cells_and_blacks_out_br() {
        let a = gray(256, 256, 0.2);
        let ap = gray(256, 256, 0.4);
        let b = gray(256, 256, 0.6);
        let grid = compose_grid(&a, &ap, &b, CellLayout::default(), (256, 256)).unwrap();
        assert_eq!((grid.grid_image.h, grid.grid_image.w), (512, 512));
        assert_eq!(grid.grid_image.pixel(10, 10), [0.2, 0.2, 0.2]);
        assert_eq!(grid.grid_image.pixel(10, 300), [0.4, 0.4, 0.4]);
        assert_eq!(grid.grid_image.pixel(300, 10), [0.6, 0.6, 0.6]);
        assert_eq!(grid.grid_image.pixel(300, 300), [0.0, 0.0, 0.0]);
        // The pasted variant carries B in the bottom-right cell.
        assert_eq!(grid.pasted_image.pixel(300, 300), [0.6, 0.6, 0.6]);
    }

    #[test]
    fn identical_gray_inputs_fill_three_quadrants() {
        let g = gray(64, 64, 0.5);
        let grid = compose_grid(&g, &g, &g, CellLayout::default(), (64, 64)).unwrap();
        for (r, c) in [(10, 10), (10, 100), (100, 10)] {
            assert_eq!(grid.grid_image.pixel(r, c), [0.5, 0.5, 0.5]);
        }
        assert_eq!(grid.grid_image.pixel(100, 100), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn inputs_are_resized_to_cell_size() {
        let a = gray(300, 200, 0.1);
        let grid = compose_grid(&a, &a, &a, CellLayout::default(), (256, 256)).unwrap();
        assert_eq!((grid.grid_image.h, grid.grid_image.w), (512, 512));
        assert_eq!(grid.cell_size, (256, 256));
        // Uniform input stays uniform through the resize.
        assert!((grid.grid_image.pixel(128, 128)[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn zero_sized_input_is_rejected() {
        let empty = Image::new(0, 0);
        let g = gray(8, 8, 0.5);
        assert!(matches!(
            compose_grid(&empty, &g, &g, CellLayout::default(), (8, 8)),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn swapped_layout_exchanges_payloads() {
        let a = gray(16, 16, 0.2);
        let ap = gray(16, 16, 0.4);
        let b = gray(16, 16, 0.6);
        let grid = compose_grid(&a, &ap, &b, CellLayout::swapped(), (16, 16)).unwrap();
        assert_eq!(grid.grid_image.pixel(4, 4), [0.2, 0.2, 0.2]); // A stays TL
        assert_eq!(grid.grid_image.pixel(4, 20), [0.6, 0.6, 0.6]); // B at TR
        assert_eq!(grid.grid_image.pixel(20, 4), [0.4, 0.4, 0.4]); // A' at BL
        // The pasted cell follows the bottom-left occupant (A' here).
        assert_eq!(grid.pasted_image.pixel(20, 20), [0.4, 0.4, 0.4]);
    }

    #[test]
    fn layout_with_br_assignment_is_rejected() {
        let bad = CellLayout {
            a: Quadrant::TopLeft,
            a_prime: Quadrant::TopRight,
            b: Quadrant::BottomRight,
        };
        let g = gray(8, 8, 0.5);
        assert!(matches!(
            compose_grid(&g, &g, &g, bad, (8, 8)),
            Err(Error::InvalidLayout(_))
        ));
    }

    #[test]
    fn paste_query_is_idempotent_and_leaves_grid_untouched() {
        let a = gray(32, 32, 0.3);
        let b = gray(32, 32, 0.9);
        let grid = compose_grid(&a, &a, &a, CellLayout::default(), (32, 32)).unwrap();
        let once = paste_query(&grid, &b).unwrap();
        let twice = paste_query(&once, &b).unwrap();
        assert_eq!(once, twice);
        assert_eq!(once.pasted_image.pixel(48, 48), [0.9, 0.9, 0.9]);
        // grid_image bottom-right stays black.
        assert_eq!(once.grid_image.pixel(48, 48), [0.0, 0.0, 0.0]);
        // Pasting is pixel-exact for an already cell-sized source.
        let br = once.crop_quadrant(&once.pasted_image, Quadrant::BottomRight);
        assert_eq!(br, b);
    }

    #[test]
    fn compose_is_bit_exact_reproducible() {
        let a = gray(50, 70, 0.3);
        let ap = gray(40, 40, 0.8);
        let b = gray(64, 64, 0.1);
        let g1 = compose_grid(&a, &ap, &b, CellLayout::default(), (32, 32)).unwrap();
        let g2 = compose_grid(&a, &ap, &b, CellLayout::default(), (32, 32)).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn mask_downsample_marks_exactly_br_indices() {
        for (h, w) in [(8usize, 8usize), (16, 8), (32, 32)] {
            let cell = (32, 32);
            let mask = make_mask(cell).unwrap();
            let down = mask.downsample_max(h, w).unwrap();
            let map = region_indices(h, w).unwrap();
            for idx in 0..h * w {
                let expected = if map.quadrant(Quadrant::BottomRight).contains(&idx) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(down.data[idx], expected, "resolution {h}x{w} index {idx}");
            }
        }
    }
}
