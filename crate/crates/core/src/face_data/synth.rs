use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{overlay_mask, AlignedFace, FacePixels, MaskSpec, PatternLabeler};
use crate::error::{MeerError, Result};
use crate::mask_patterns::Region;

pub const MIN_SYNTH_SIZE: usize = 16;

/// Geometry and colours that define one toy identity.
struct IdentityParams {
    background: [f32; 3],
    skin: [f32; 3],
    hair: [f32; 3],
    iris: [f32; 3],
    lips: [f32; 3],
    face_rx: f32,
    face_ry: f32,
    hairline: f32,
    eye_y: f32,
    eye_dx: f32,
    eye_r: f32,
    brow_gap: f32,
    brow_thickness: f32,
    nose_len: f32,
    mouth_y: f32,
    mouth_w: f32,
    mouth_h: f32,
}

impl IdentityParams {
    fn sample(id_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(id_seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ 0xFACE);
        let mut color = |lo: f32, hi: f32| -> [f32; 3] {
            [rng.gen_range(lo..hi), rng.gen_range(lo..hi), rng.gen_range(lo..hi)]
        };
        let background = color(-0.9, 0.1);
        let hair = color(-1.0, 0.3);
        let iris = color(-0.8, 0.8);
        let lips = color(-0.4, 0.9);
        let tone: f32 = rng.gen_range(-0.3..0.8);
        let skin = [
            tone + rng.gen_range(0.05..0.25),
            tone,
            tone - rng.gen_range(0.0..0.3),
        ]
        .map(|v: f32| v.clamp(-1.0, 1.0));
        Self {
            background,
            skin,
            hair,
            iris,
            lips,
            face_rx: rng.gen_range(0.28..0.36),
            face_ry: rng.gen_range(0.36..0.44),
            hairline: rng.gen_range(0.16..0.28),
            eye_y: rng.gen_range(0.36..0.44),
            eye_dx: rng.gen_range(0.11..0.17),
            eye_r: rng.gen_range(0.035..0.06),
            brow_gap: rng.gen_range(0.05..0.09),
            brow_thickness: rng.gen_range(0.015..0.035),
            nose_len: rng.gen_range(0.08..0.14),
            mouth_y: rng.gen_range(0.68..0.76),
            mouth_w: rng.gen_range(0.08..0.16),
            mouth_h: rng.gen_range(0.02..0.045),
        }
    }
}

/// Pose and lighting jitter for one capture of an identity.
struct Variation {
    dx: f32,
    dy: f32,
    scale: f32,
    brightness: f32,
    noise_seed: u64,
}

impl Variation {
    fn sample(id_seed: u64, variation_seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(
            id_seed.wrapping_mul(0xD1B5_4A32_D192_ED03) ^ variation_seed.wrapping_mul(0x8CB9_2BA7_2F3D_8DD7) ^ 0x5EED,
        );
        Self {
            dx: rng.gen_range(-0.025..0.025),
            dy: rng.gen_range(-0.025..0.025),
            scale: rng.gen_range(0.96..1.04),
            brightness: rng.gen_range(-0.1..0.1),
            noise_seed: rng.gen(),
        }
    }
}

#[inline]
fn inside_ellipse(u: f32, v: f32, cx: f32, cy: f32, rx: f32, ry: f32) -> bool {
    let a = (u - cx) / rx;
    let b = (v - cy) / ry;
    a * a + b * b <= 1.0
}

/// Deterministic procedural face. Geometry and colours depend only on
/// `id_seed`; small shifts, scale and lighting depend on `variation_seed`.
pub fn synth_identity_face(id_seed: u64, variation_seed: u64, size: usize) -> Result<AlignedFace> {
    if size < MIN_SYNTH_SIZE {
        return Err(MeerError::InvalidArgument(format!(
            "synthetic face size must be at least {MIN_SYNTH_SIZE}, got {size}"
        )));
    }
    let id = IdentityParams::sample(id_seed);
    let var = Variation::sample(id_seed, variation_seed);
    let mut noise = ChaCha8Rng::seed_from_u64(var.noise_seed);
    let n = size as f32;
    let mut data = vec![0f32; 3 * size * size];

    for y in 0..size {
        for x in 0..size {
            // face-centred coordinates after the per-capture jitter
            let u = ((x as f32 + 0.5) / n - 0.5 - var.dx) / var.scale + 0.5;
            let v = ((y as f32 + 0.5) / n - 0.5 - var.dy) / var.scale + 0.5;

            let shade = 0.15 * (v - 0.5);
            let mut rgb = id.background.map(|c| c - shade);

            let (cx, cy) = (0.5, 0.52);
            if inside_ellipse(u, v, cx, cy, id.face_rx, id.face_ry) {
                let r = ((u - cx) / id.face_rx).powi(2) + ((v - cy) / id.face_ry).powi(2);
                rgb = id.skin.map(|c| c - 0.2 * r);
                if v < id.hairline {
                    rgb = id.hair;
                }
            } else if inside_ellipse(u, v, cx, cy - 0.04, id.face_rx + 0.04, id.face_ry + 0.02) && v < 0.5 {
                rgb = id.hair;
            }

            for side in [-1.0f32, 1.0] {
                let ex = cx + side * id.eye_dx;
                if inside_ellipse(u, v, ex, id.eye_y, id.eye_r * 1.6, id.eye_r) {
                    rgb = [0.9, 0.9, 0.85];
                }
                if inside_ellipse(u, v, ex, id.eye_y, id.eye_r * 0.7, id.eye_r * 0.7) {
                    rgb = id.iris;
                }
                let brow_y = id.eye_y - id.eye_r - id.brow_gap;
                if (u - ex).abs() < id.eye_r * 1.8 && (v - brow_y).abs() < id.brow_thickness {
                    rgb = id.hair;
                }
            }

            let nose_top = id.eye_y + 0.03;
            if v > nose_top && v < nose_top + id.nose_len {
                let t = (v - nose_top) / id.nose_len;
                if (u - cx).abs() < 0.012 + 0.03 * t {
                    rgb = id.skin.map(|c| c - 0.3);
                }
            }

            if inside_ellipse(u, v, cx, id.mouth_y, id.mouth_w, id.mouth_h) {
                rgb = id.lips;
            }

            for (c, value) in rgb.iter().enumerate() {
                let jitter: f32 = noise.gen_range(-0.02..0.02);
                data[(c * size + y) * size + x] = (value + var.brightness + jitter).clamp(-1.0, 1.0);
            }
        }
    }

    let pixels = FacePixels::new(size, size, data)?;
    Ok(AlignedFace::unmasked(pixels, id_seed as usize))
}

/// Shape of the masks drawn by [`synth_toy_set`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskStyle {
    /// Random lower-face trapezoids.
    LowerFace,
    /// The full lower half of the image.
    LowerHalf,
}

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub masked_ratio: f64,
    pub size: usize,
    pub seed: u64,
    pub mask_style: MaskStyle,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_identities: 16,
            images_per_identity: 8,
            masked_ratio: 0.25,
            size: 32,
            seed: 0,
            mask_style: MaskStyle::LowerFace,
        }
    }
}

/// One generated image; masked records keep their unmasked source.
#[derive(Clone, Debug)]
pub struct SynthRecord {
    pub face: AlignedFace,
    pub variation: usize,
    pub region: Option<Region>,
    pub source: Option<FacePixels>,
}

/// Generates `num_identities × images_per_identity` faces, of which
/// `round(masked_ratio · total)` carry a mask. Masked images are spread
/// round-robin across identities and use the last variations of each one.
pub fn synth_toy_set(cfg: &SynthConfig, labeler: &PatternLabeler) -> Result<Vec<SynthRecord>> {
    if !(0.0..=1.0).contains(&cfg.masked_ratio) {
        return Err(MeerError::InvalidArgument(format!(
            "masked ratio must be in [0, 1], got {}",
            cfg.masked_ratio
        )));
    }
    let total = cfg.num_identities * cfg.images_per_identity;
    let masked_total = (cfg.masked_ratio * total as f64).round() as usize;
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3A5C);
    let mut records = Vec::with_capacity(total);
    for id in 0..cfg.num_identities {
        let masked_here = masked_total / cfg.num_identities.max(1)
            + usize::from(id < masked_total % cfg.num_identities.max(1));
        let masked_here = masked_here.min(cfg.images_per_identity);
        let first_masked = cfg.images_per_identity - masked_here;
        for v in 0..cfg.images_per_identity {
            let id_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(id as u64);
            let mut face = synth_identity_face(id_seed, v as u64, cfg.size)?;
            face.identity_label = id;
            if v < first_masked {
                records.push(SynthRecord {
                    face,
                    variation: v,
                    region: None,
                    source: None,
                });
                continue;
            }
            let spec = match cfg.mask_style {
                MaskStyle::LowerFace => MaskSpec::lower_face(&mut mask_rng, cfg.size, cfg.size)?,
                MaskStyle::LowerHalf => MaskSpec::lower_half(&mut mask_rng, cfg.size, cfg.size)?,
            };
            let (masked, region) = overlay_mask(&face, &spec, labeler)?;
            records.push(SynthRecord {
                face: masked,
                variation: v,
                region: Some(region),
                source: Some(face.pixels),
            });
        }
    }
    Ok(records)
}
