//! Dataset discovery and the JSON manifest format.
//!
//! The paired layout is `root/noisy/<name>` with optional `root/gt/<name>`,
//! matched by file name. The flat layout lists every image directly under
//! `root`, with no clean references.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, Image};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `noisy/` and `gt/` subdirectories matched by filename.
    Paired,
    /// Every image directly under the root.
    Flat,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub noisy: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    #[serde(default)]
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

pub fn is_image_path(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "tif" | "tiff"))
        .unwrap_or(false)
}

fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_path(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Discovers entries under `root` following `layout`. An empty result is
/// logged as a warning, not an error.
pub fn scan_dataset(root: impl AsRef<Path>, layout: Layout) -> Result<DatasetManifest> {
    let root = root.as_ref();
    if !root.is_dir() {
        return Err(Error::io(
            root,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root is not a directory"),
        ));
    }
    let entries = match layout {
        Layout::Paired => {
            let noisy_dir = root.join("noisy");
            let gt_dir = root.join("gt");
            let noisy = if noisy_dir.is_dir() {
                list_images(&noisy_dir)?
            } else {
                Vec::new()
            };
            noisy
                .into_iter()
                .map(|n| {
                    let candidate = gt_dir.join(n.file_name().expect("listed files have names"));
                    ManifestEntry {
                        id: stem(&n),
                        clean: candidate.is_file().then_some(candidate),
                        noisy: n,
                    }
                })
                .collect()
        }
        Layout::Flat => list_images(root)?
            .into_iter()
            .map(|p| ManifestEntry {
                id: stem(&p),
                noisy: p,
                clean: None,
            })
            .collect::<Vec<_>>(),
    };
    if entries.is_empty() {
        log::warn!("no images found under {} ({layout:?} layout)", root.display());
    }
    let manifest = DatasetManifest {
        root: root.to_owned(),
        entries,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl DatasetManifest {
    /// Checks id uniqueness and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Config(format!("duplicate manifest id `{}`", e.id)));
            }
            for p in std::iter::once(&e.noisy).chain(e.clean.as_ref()) {
                if !p.is_file() {
                    return Err(Error::io(
                        p,
                        std::io::Error::new(std::io::ErrorKind::NotFound, "manifest path missing"),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: DatasetManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        // relative entries resolve against the manifest's directory
        for e in &mut manifest.entries {
            if e.noisy.is_relative() {
                e.noisy = base.join(&e.noisy);
            }
            if let Some(c) = e.clean.as_mut().filter(|c| c.is_relative()) {
                *c = base.join(&*c);
            }
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

impl ManifestEntry {
    pub fn load_noisy(&self) -> Result<Image> {
        load_image(&self.noisy)
    }

    /// The clean reference, or [`Error::MissingReference`] naming this entry.
    pub fn load_clean(&self) -> Result<Image> {
        match &self.clean {
            Some(p) => load_image(p),
            None => Err(Error::MissingReference(self.id.clone())),
        }
    }

    /// The image to treat as clean when the entry comes from a clean corpus:
    /// the reference when present, otherwise the listed image itself.
    pub fn load_reference_or_self(&self) -> Result<Image> {
        load_image(self.clean.as_ref().unwrap_or(&self.noisy))
    }
}
