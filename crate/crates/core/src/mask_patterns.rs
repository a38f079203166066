//! Mask-location vocabulary on a coarse face grid.
//!
//! The face is cut into a `G×G` grid. Class 0 is the unoccluded face; every
//! other class is one axis-aligned rectangle of grid cells. For the default
//! `G = 4` this gives `(4·5/2)² + 1 = 101` classes. A pixel-level coverage
//! region is mapped to a class by thresholding the covered fraction of each
//! cell and taking the smallest rectangle that contains every occupied cell.

use std::fmt::Write as _;

use crate::error::{MeerError, Result};

pub const DEFAULT_GRID_SIZE: usize = 4;
pub const DEFAULT_OCCUPANCY_THRESHOLD: f64 = 0.25;
pub const DEFAULT_PATTERN_COUNT: usize = 101;

/// Binary `H×W` pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Region {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(MeerError::Shape(format!(
                "region data has {} entries, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Rows `[row_start, row_end)` covered across the full width.
    pub fn rows(height: usize, width: usize, row_start: usize, row_end: usize) -> Self {
        let mut region = Self::empty(height, width);
        for y in row_start.min(height)..row_end.min(height) {
            for x in 0..width {
                region.set(y, x, true);
            }
        }
        region
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, value: bool) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }
}

/// Inclusive rectangle of grid cells `(r0, c0)..=(r1, c1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GridRect {
    pub r0: usize,
    pub c0: usize,
    pub r1: usize,
    pub c1: usize,
}

impl GridRect {
    pub fn new(r0: usize, c0: usize, r1: usize, c1: usize) -> Self {
        Self { r0, c0, r1, c1 }
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.r0..=self.r1).contains(&row) && (self.c0..=self.c1).contains(&col)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatternVocabulary {
    grid_size: usize,
    // class k >= 1 lives at rects[k - 1]
    rects: Vec<GridRect>,
}

/// Empty pattern plus every sub-rectangle of a `grid_size × grid_size` grid,
/// in lexicographic `(r0, c0, r1, c1)` order.
pub fn enumerate_patterns(grid_size: usize) -> Result<PatternVocabulary> {
    if grid_size == 0 {
        return Err(MeerError::InvalidArgument(
            "grid size must be at least 1".into(),
        ));
    }
    let mut rects = Vec::new();
    for r0 in 0..grid_size {
        for c0 in 0..grid_size {
            for r1 in r0..grid_size {
                for c1 in c0..grid_size {
                    rects.push(GridRect::new(r0, c0, r1, c1));
                }
            }
        }
    }
    Ok(PatternVocabulary { grid_size, rects })
}

impl PatternVocabulary {
    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    /// Number of classes including the empty pattern.
    pub fn len(&self) -> usize {
        self.rects.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn rect(&self, class: usize) -> Option<GridRect> {
        class.checked_sub(1).and_then(|i| self.rects.get(i).copied())
    }

    pub fn class_of(&self, rect: GridRect) -> Option<usize> {
        self.rects.binary_search(&rect).ok().map(|i| i + 1)
    }

    pub fn rects(&self) -> &[GridRect] {
        &self.rects
    }

    /// Text dump, one class per line: `class<TAB>r0 c0 r1 c1` (`empty` for 0).
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "0\tempty");
        for (i, r) in self.rects.iter().enumerate() {
            let _ = writeln!(out, "{}\t{} {} {} {}", i + 1, r.r0, r.c0, r.r1, r.c1);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridOccupancy {
    pub grid_size: usize,
    /// Row-major `G×G`.
    pub occupied: Vec<bool>,
    pub threshold: f64,
}

impl GridOccupancy {
    pub fn is_occupied(&self, row: usize, col: usize) -> bool {
        self.occupied[row * self.grid_size + col]
    }

    /// Smallest rectangle containing every occupied cell.
    pub fn bounding_rect(&self) -> Option<GridRect> {
        let g = self.grid_size;
        let mut bounds: Option<GridRect> = None;
        for row in 0..g {
            for col in 0..g {
                if !self.is_occupied(row, col) {
                    continue;
                }
                bounds = Some(match bounds {
                    None => GridRect::new(row, col, row, col),
                    Some(b) => GridRect::new(
                        b.r0.min(row),
                        b.c0.min(col),
                        b.r1.max(row),
                        b.c1.max(col),
                    ),
                });
            }
        }
        bounds
    }
}

/// Covered-pixel fraction per grid cell compared against `threshold`.
///
/// Sizes that are not a multiple of the grid are padded at the bottom/right
/// by replicating the last row/column.
pub fn compute_cell_occupancy(
    region: &Region,
    grid_size: usize,
    threshold: f64,
) -> Result<GridOccupancy> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(MeerError::InvalidArgument(format!(
            "occupancy threshold must be in (0, 1], got {threshold}"
        )));
    }
    if grid_size == 0 {
        return Err(MeerError::InvalidArgument(
            "grid size must be at least 1".into(),
        ));
    }
    let (h, w) = (region.height(), region.width());
    if h == 0 || w == 0 {
        return Err(MeerError::InvalidArgument("region has zero area".into()));
    }
    let cell_h = h.div_ceil(grid_size);
    let cell_w = w.div_ceil(grid_size);
    let cell_area = (cell_h * cell_w) as f64;

    let mut occupied = vec![false; grid_size * grid_size];
    for row in 0..grid_size {
        for col in 0..grid_size {
            let mut covered = 0usize;
            for py in row * cell_h..(row + 1) * cell_h {
                for px in col * cell_w..(col + 1) * cell_w {
                    if region.get(py.min(h - 1), px.min(w - 1)) {
                        covered += 1;
                    }
                }
            }
            occupied[row * grid_size + col] = covered as f64 / cell_area >= threshold;
        }
    }
    Ok(GridOccupancy {
        grid_size,
        occupied,
        threshold,
    })
}

/// 0 for an empty grid, otherwise the class of the minimal covering rectangle.
pub fn occupancy_to_pattern(occ: &GridOccupancy, vocab: &PatternVocabulary) -> Result<usize> {
    if occ.grid_size != vocab.grid_size {
        return Err(MeerError::InvalidArgument(format!(
            "occupancy grid {} does not match vocabulary grid {}",
            occ.grid_size, vocab.grid_size
        )));
    }
    match occ.bounding_rect() {
        None => Ok(0),
        Some(rect) => vocab
            .class_of(rect)
            .ok_or_else(|| MeerError::Invariant(format!("rectangle {rect:?} missing from vocabulary"))),
    }
}

/// Pattern class of a pixel coverage region.
pub fn pattern_of_region(region: &Region, vocab: &PatternVocabulary, threshold: f64) -> Result<usize> {
    let occ = compute_cell_occupancy(region, vocab.grid_size(), threshold)?;
    occupancy_to_pattern(&occ, vocab)
}

/// Pixel region of a grid rectangle on an `height × width` image.
pub fn rasterize_rect(rect: GridRect, grid_size: usize, height: usize, width: usize) -> Region {
    let cell_h = height.div_ceil(grid_size);
    let cell_w = width.div_ceil(grid_size);
    let mut region = Region::empty(height, width);
    for y in rect.r0 * cell_h..((rect.r1 + 1) * cell_h).min(height) {
        for x in rect.c0 * cell_w..((rect.c1 + 1) * cell_w).min(width) {
            region.set(y, x, true);
        }
    }
    region
}
