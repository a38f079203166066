//! Tab-separated dataset manifests.
//!
//! ```text
//! # meer-manifest v1
//! id_0000/img_00.png	0	real_unmasked	0	-
//! id_0000/img_01.masked.p042.png	0	simulated_masked	42	id_0000/img_01.ref.png
//! ```
//!
//! Paths are relative to the directory holding the manifest file.
#![allow(clippy::tabs_in_doc_comments)]

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::MaskFlag;
use crate::error::{MeerError, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
const HEADER_PREFIX: &str = "# meer-manifest v";
const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub path: String,
    pub identity_label: usize,
    pub mask_flag: MaskFlag,
    pub pattern_class: usize,
    pub paired_path: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    pub num_identities: usize,
    pub schema_version: u32,
    /// Identity directories without any image, skipped during the build.
    pub skipped_identities: usize,
}

/// Whether masked images are linked to their unmasked source.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pairing {
    None,
    MaskedUnmasked,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let num_identities = records.iter().map(|r| r.identity_label + 1).max().unwrap_or(0);
        let manifest = Self {
            records,
            num_identities,
            schema_version: MANIFEST_SCHEMA_VERSION,
            skipped_identities: 0,
        };
        manifest.validate()?;
        Ok(manifest)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.num_identities];
        for r in &self.records {
            if r.identity_label >= self.num_identities {
                return Err(MeerError::Parse(format!(
                    "{}: label {} outside [0, {})",
                    r.path, r.identity_label, self.num_identities
                )));
            }
            seen[r.identity_label] = true;
            if r.mask_flag == MaskFlag::RealUnmasked && r.pattern_class != 0 {
                return Err(MeerError::Parse(format!(
                    "{}: real unmasked image with pattern class {}",
                    r.path, r.pattern_class
                )));
            }
        }
        if let Some(gap) = seen.iter().position(|s| !s) {
            return Err(MeerError::Parse(format!(
                "identity labels are not contiguous: label {gap} has no records"
            )));
        }
        Ok(())
    }

    pub fn is_paired(&self) -> bool {
        self.records
            .iter()
            .any(|r| r.mask_flag == MaskFlag::SimulatedMasked && r.paired_path.is_some())
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{HEADER_PREFIX}{}\n", self.schema_version);
        for r in &self.records {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}",
                r.path,
                r.identity_label,
                r.mask_flag,
                r.pattern_class,
                r.paired_path.as_deref().unwrap_or("-")
            );
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut schema_version = MANIFEST_SCHEMA_VERSION;
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if let Some(v) = line.strip_prefix(HEADER_PREFIX) {
                schema_version = v
                    .trim()
                    .parse()
                    .map_err(|_| MeerError::Parse(format!("bad manifest header `{line}`")))?;
                if schema_version != MANIFEST_SCHEMA_VERSION {
                    return Err(MeerError::Parse(format!(
                        "unsupported manifest schema version {schema_version}"
                    )));
                }
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(MeerError::Parse(format!(
                    "manifest line {}: expected 5 tab-separated fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let number = |s: &str, what: &str| -> Result<usize> {
                s.parse()
                    .map_err(|_| MeerError::Parse(format!("manifest line {}: bad {what} `{s}`", lineno + 1)))
            };
            records.push(ManifestRecord {
                path: fields[0].to_string(),
                identity_label: number(fields[1], "identity label")?,
                mask_flag: fields[2].parse()?,
                pattern_class: number(fields[3], "pattern class")?,
                paired_path: (fields[4] != "-").then(|| fields[4].to_string()),
            });
        }
        let mut manifest = Self::new(records)?;
        manifest.schema_version = schema_version;
        Ok(manifest)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| MeerError::io(path, e))
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MeerError::io(path, e))?;
        let manifest = Self::parse(&text)?;
        let base = base_dir(path);
        for r in &manifest.records {
            for p in std::iter::once(&r.path).chain(r.paired_path.as_ref()) {
                let full = base.join(p);
                if !full.is_file() {
                    return Err(MeerError::io(
                        full,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "referenced image is missing"),
                    ));
                }
            }
        }
        Ok(manifest)
    }
}

/// Directory that relative manifest paths are resolved against.
pub(crate) fn base_dir(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        .unwrap_or(false)
}

/// `img_03.masked.p042` → `("img_03", 42)`
fn parse_masked_stem(stem: &str) -> Option<(&str, usize)> {
    let (base, tail) = stem.rsplit_once(".masked.p")?;
    Some((base, tail.parse().ok()?))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = std::fs::read_dir(dir)
        .map_err(|e| MeerError::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| MeerError::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Scans `root/<identity>/<image>` and relabels identities contiguously in
/// sorted directory order.
///
/// Masked images follow the naming `<stem>.masked.p<class>.<ext>`; with
/// [`Pairing::MaskedUnmasked`] their source is `<stem>.ref.<ext>` (kept out of
/// the record list) or `<stem>.<ext>`. Paths are relative to `root`.
pub fn build_manifest(root: &Path, pairing: Pairing) -> Result<DatasetManifest> {
    let mut records = Vec::new();
    let mut skipped = 0usize;
    let mut label = 0usize;
    for dir in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let images: Vec<PathBuf> = sorted_entries(&dir)?
            .into_iter()
            .filter(|p| p.is_file() && is_image(p))
            .filter(|p| {
                !p.file_stem()
                    .and_then(|s| s.to_str())
                    .map(|s| s.ends_with(".ref"))
                    .unwrap_or(false)
            })
            .collect();
        if images.is_empty() {
            log::warn!("skipping identity directory without images: {}", dir.display());
            skipped += 1;
            continue;
        }
        for path in images {
            image::image_dimensions(&path).map_err(|e| MeerError::Image {
                path: path.clone(),
                message: e.to_string(),
            })?;
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let ext = path.extension().and_then(|s| s.to_str()).unwrap_or("png");
            let record = match parse_masked_stem(stem) {
                None => ManifestRecord {
                    path: relative(root, &path),
                    identity_label: label,
                    mask_flag: MaskFlag::RealUnmasked,
                    pattern_class: 0,
                    paired_path: None,
                },
                Some((base, class)) => {
                    let paired_path = match pairing {
                        Pairing::None => None,
                        Pairing::MaskedUnmasked => {
                            let candidates = [
                                dir.join(format!("{base}.ref.{ext}")),
                                dir.join(format!("{base}.{ext}")),
                                dir.join(format!("{base}.ref.png")),
                                dir.join(format!("{base}.png")),
                            ];
                            let found = candidates.iter().find(|c| c.is_file()).ok_or_else(|| {
                                MeerError::io(
                                    &candidates[0],
                                    std::io::Error::new(
                                        std::io::ErrorKind::NotFound,
                                        format!("no unmasked source for {}", path.display()),
                                    ),
                                )
                            })?;
                            Some(relative(root, found))
                        }
                    };
                    ManifestRecord {
                        path: relative(root, &path),
                        identity_label: label,
                        mask_flag: MaskFlag::SimulatedMasked,
                        pattern_class: class,
                        paired_path,
                    }
                }
            };
            records.push(record);
        }
        label += 1;
    }
    let mut manifest = DatasetManifest::new(records)?;
    manifest.skipped_identities = skipped;
    Ok(manifest)
}
