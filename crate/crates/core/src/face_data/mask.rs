use rand::Rng;

use super::{AlignedFace, MaskFlag};
use crate::error::{MeerError, Result};
use crate::mask_patterns::{pattern_of_region, PatternVocabulary, Region};

/// Texture painted inside the mask polygon.
#[derive(Clone, Debug, PartialEq)]
pub enum Fill {
    Solid([f32; 3]),
    /// Base colour plus per-pixel hashed noise in `[-amplitude, amplitude]`.
    Noise { base: [f32; 3], amplitude: f32, seed: u64 },
}

impl Fill {
    fn value(&self, c: usize, y: usize, x: usize) -> f32 {
        match self {
            Fill::Solid(rgb) => rgb[c],
            Fill::Noise {
                base,
                amplitude,
                seed,
            } => {
                let h = splitmix64(seed ^ ((y as u64) << 32 | x as u64).wrapping_mul(0x9E37_79B9));
                let u = (h >> 11) as f32 / (1u64 << 53) as f32;
                base[c] + amplitude * (2.0 * u - 1.0)
            }
        }
        .clamp(-1.0, 1.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Polygonal mask with an exact pixel coverage.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    polygon: Vec<(f32, f32)>,
    fill: Fill,
    coverage: Region,
}

impl MaskSpec {
    /// Builds the spec and rasterizes the polygon on a `height × width` image.
    ///
    /// A pixel is covered when its centre lies inside the polygon (even-odd rule).
    pub fn new(polygon: Vec<(f32, f32)>, fill: Fill, height: usize, width: usize) -> Result<Self> {
        if polygon.is_empty() {
            return Err(MeerError::InvalidArgument("mask polygon is empty".into()));
        }
        if polygon.len() < 3 {
            return Err(MeerError::InvalidArgument(format!(
                "mask polygon needs at least 3 vertices, got {}",
                polygon.len()
            )));
        }
        for &(x, y) in &polygon {
            if !(0.0..=width as f32).contains(&x) || !(0.0..=height as f32).contains(&y) {
                return Err(MeerError::InvalidArgument(format!(
                    "polygon vertex ({x}, {y}) outside {width}x{height} image"
                )));
            }
        }
        let coverage = rasterize_polygon(&polygon, height, width);
        Ok(Self {
            polygon,
            fill,
            coverage,
        })
    }

    /// Surgical-mask-like trapezoid over the lower face: the top edge sits in
    /// rows `[0.45H, 0.65H]` and the bottom edge on the last row.
    pub fn lower_face<R: Rng>(rng: &mut R, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (height as f32, width as f32);
        let top = rng.gen_range(0.45..=0.65) * h;
        let top_left = rng.gen_range(0.12..0.28) * w;
        let top_right = rng.gen_range(0.72..0.88) * w;
        let bottom_left = rng.gen_range(0.0..0.12) * w;
        let bottom_right = rng.gen_range(0.88..=1.0) * w;
        let polygon = vec![
            (top_left, top),
            (top_right, top),
            (bottom_right, h),
            (bottom_left, h),
        ];
        let fill = random_fill(rng);
        Self::new(polygon, fill, height, width)
    }

    /// Mask over the entire lower half of the image.
    pub fn lower_half<R: Rng>(rng: &mut R, height: usize, width: usize) -> Result<Self> {
        let (h, w) = (height as f32, width as f32);
        let half = (height / 2) as f32;
        let polygon = vec![(0.0, half), (w, half), (w, h), (0.0, h)];
        Self::new(polygon, random_fill(rng), height, width)
    }

    pub fn polygon(&self) -> &[(f32, f32)] {
        &self.polygon
    }

    pub fn fill(&self) -> &Fill {
        &self.fill
    }

    pub fn coverage_region(&self) -> &Region {
        &self.coverage
    }
}

fn random_fill<R: Rng>(rng: &mut R) -> Fill {
    let base = [
        rng.gen_range(-0.9..0.9),
        rng.gen_range(-0.9..0.9),
        rng.gen_range(-0.9..0.9),
    ];
    if rng.gen_bool(0.5) {
        Fill::Solid(base)
    } else {
        Fill::Noise {
            base,
            amplitude: rng.gen_range(0.05..0.2),
            seed: rng.gen(),
        }
    }
}

fn rasterize_polygon(polygon: &[(f32, f32)], height: usize, width: usize) -> Region {
    let mut region = Region::empty(height, width);
    let n = polygon.len();
    for y in 0..height {
        let py = y as f32 + 0.5;
        // x positions where the scanline crosses an edge
        let mut crossings: Vec<f32> = Vec::new();
        for i in 0..n {
            let (x0, y0) = polygon[i];
            let (x1, y1) = polygon[(i + 1) % n];
            if (y0 <= py) != (y1 <= py) {
                crossings.push(x0 + (py - y0) / (y1 - y0) * (x1 - x0));
            }
        }
        crossings.sort_by(|a, b| a.total_cmp(b));
        for span in crossings.chunks_exact(2) {
            for x in 0..width {
                let px = x as f32 + 0.5;
                if px > span[0] && px < span[1] {
                    region.set(y, x, true);
                }
            }
        }
    }
    region
}

/// Maps coverage regions to pattern classes.
#[derive(Clone, Debug)]
pub struct PatternLabeler {
    pub vocabulary: PatternVocabulary,
    pub threshold: f64,
}

impl PatternLabeler {
    pub fn new(vocabulary: PatternVocabulary, threshold: f64) -> Self {
        Self {
            vocabulary,
            threshold,
        }
    }

    pub fn label(&self, region: &Region) -> Result<usize> {
        pattern_of_region(region, &self.vocabulary, self.threshold)
    }
}

impl Default for PatternLabeler {
    fn default() -> Self {
        Self {
            vocabulary: crate::mask_patterns::enumerate_patterns(crate::mask_patterns::DEFAULT_GRID_SIZE)
                .expect("default grid size is valid"),
            threshold: crate::mask_patterns::DEFAULT_OCCUPANCY_THRESHOLD,
        }
    }
}

/// Paints the mask onto an unmasked face. Pixels outside the coverage region
/// are copied unchanged.
pub fn overlay_mask(
    face: &AlignedFace,
    spec: &MaskSpec,
    labeler: &PatternLabeler,
) -> Result<(AlignedFace, Region)> {
    if face.mask_flag != MaskFlag::RealUnmasked {
        return Err(MeerError::InvalidArgument(format!(
            "masks are only applied to real unmasked faces, got {}",
            face.mask_flag
        )));
    }
    let region = spec.coverage_region();
    let (h, w) = (face.pixels.height(), face.pixels.width());
    if region.height() != h || region.width() != w {
        return Err(MeerError::Shape(format!(
            "mask region {}x{} does not match face {h}x{w}",
            region.height(),
            region.width()
        )));
    }
    let mut pixels = face.pixels.clone();
    for y in 0..h {
        for x in 0..w {
            if region.get(y, x) {
                for c in 0..3 {
                    pixels.set(c, y, x, spec.fill.value(c, y, x));
                }
            }
        }
    }
    let masked = AlignedFace {
        pixels,
        identity_label: face.identity_label,
        mask_flag: MaskFlag::SimulatedMasked,
        pattern_class: labeler.label(region)?,
        paired_unmasked_path: face.paired_unmasked_path.clone(),
    };
    Ok((masked, region.clone()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::face_data::synth_identity_face;

    #[test]
    fn empty_polygon_is_rejected() {
        assert!(MaskSpec::new(vec![], Fill::Solid([0.0; 3]), 8, 8).is_err());
        assert!(MaskSpec::new(vec![(0.0, 0.0), (1.0, 1.0)], Fill::Solid([0.0; 3]), 8, 8).is_err());
        assert!(MaskSpec::new(vec![(0.0, 0.0), (9.0, 1.0), (1.0, 1.0)], Fill::Solid([0.0; 3]), 8, 8).is_err());
    }

    #[test]
    fn zero_coverage_leaves_face_untouched() {
        let face = synth_identity_face(1, 1, 32).unwrap();
        // degenerate sliver between pixel centres
        let spec = MaskSpec::new(vec![(0.0, 0.1), (32.0, 0.1), (32.0, 0.2)], Fill::Solid([1.0; 3]), 32, 32).unwrap();
        assert!(spec.coverage_region().is_empty());
        let (out, region) = overlay_mask(&face, &spec, &PatternLabeler::default()).unwrap();
        assert_eq!(out.pixels, face.pixels);
        assert_eq!(out.pattern_class, 0);
        assert!(region.is_empty());
    }

    #[test]
    fn lower_half_changes_exactly_lower_rows() {
        let face = synth_identity_face(3, 0, 64).unwrap();
        let fill = Fill::Solid([0.9, -0.9, 0.3]);
        let spec = MaskSpec::new(vec![(0.0, 32.0), (64.0, 32.0), (64.0, 64.0), (0.0, 64.0)], fill.clone(), 64, 64).unwrap();
        let (out, region) = overlay_mask(&face, &spec, &PatternLabeler::default()).unwrap();
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(region.get(y, x), y >= 32);
                for c in 0..3 {
                    let (src, dst) = (face.pixels.get(c, y, x), out.pixels.get(c, y, x));
                    if y < 32 {
                        assert_eq!(src, dst);
                    } else {
                        assert_eq!(dst, fill.value(c, y, x));
                    }
                }
            }
        }
        let rect = PatternLabeler::default().vocabulary.rect(out.pattern_class).unwrap();
        assert_eq!((rect.r0, rect.c0, rect.r1, rect.c1), (2, 0, 3, 3));
        assert_eq!(out.mask_flag, MaskFlag::SimulatedMasked);
    }

    #[test]
    fn overlay_is_idempotent_inside_region() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let face = synth_identity_face(9, 2, 48).unwrap();
        let spec = MaskSpec::lower_face(&mut rng, 48, 48).unwrap();
        let labeler = PatternLabeler::default();
        let (once, _) = overlay_mask(&face, &spec, &labeler).unwrap();
        let mut again_input = once.clone();
        again_input.mask_flag = MaskFlag::RealUnmasked;
        let (twice, _) = overlay_mask(&again_input, &spec, &labeler).unwrap();
        assert_eq!(once.pixels, twice.pixels);
    }

    #[test]
    fn masked_faces_cannot_be_masked_again() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let face = synth_identity_face(2, 2, 32).unwrap();
        let spec = MaskSpec::lower_face(&mut rng, 32, 32).unwrap();
        let (masked, _) = overlay_mask(&face, &spec, &PatternLabeler::default()).unwrap();
        assert!(overlay_mask(&masked, &spec, &PatternLabeler::default()).is_err());
    }

    #[test]
    fn lower_face_masks_cover_rows_two_and_three() {
        let labeler = PatternLabeler::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for size in [32, 112] {
            for _ in 0..50 {
                let spec = MaskSpec::lower_face(&mut rng, size, size).unwrap();
                let class = labeler.label(spec.coverage_region()).unwrap();
                let rect = labeler.vocabulary.rect(class).unwrap();
                assert_eq!((rect.r0, rect.r1), (2, 3));
            }
        }
    }
}
