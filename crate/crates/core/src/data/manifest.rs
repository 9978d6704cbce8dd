//! JSON-lines dataset manifests.
//!
//! An optional first line `{"manifest":{"split":"test","styles":[...]}}`
//! declares the split and style vocabulary. Every other line is one image:
//!
//! ```text
//! {"path":"images/test/0000.png","width":128,"height":128,"style":"outline",
//!  "boxes":[{"x1":10.0,"y1":4.0,"x2":31.0,"y2":60.0,"difficult":false,"style":"outline"}]}
//! ```
//!
//! Paths are relative to the manifest's directory.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Annotation, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Trainval,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Trainval, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Trainval => "trainval",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    #[serde(default)]
    pub difficult: bool,
    #[serde(default)]
    pub style: String,
}

impl BoxRecord {
    pub fn bbox(&self) -> BBox {
        BBox {
            x1: self.x1,
            y1: self.y1,
            x2: self.x2,
            y2: self.y2,
        }
    }

    pub fn from_bbox(b: &BBox, difficult: bool, style: impl Into<String>) -> Self {
        BoxRecord {
            x1: b.x1,
            y1: b.y1,
            x2: b.x2,
            y2: b.y2,
            difficult,
            style: style.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: String,
    pub width: u32,
    pub height: u32,
    /// Image-level style; boxes without their own style inherit it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    #[serde(default)]
    pub boxes: Vec<BoxRecord>,
}

impl ManifestEntry {
    pub fn annotations(&self) -> Vec<Annotation> {
        self.boxes
            .iter()
            .map(|b| Annotation {
                image_id: self.path.clone(),
                bbox: b.bbox(),
                difficult: b.difficult,
                style: if b.style.is_empty() {
                    self.style.clone().unwrap_or_default()
                } else {
                    b.style.clone()
                },
            })
            .collect()
    }

    fn validate(&self, vocabulary: Option<&BTreeSet<String>>) -> std::result::Result<(), String> {
        if self.path.trim().is_empty() {
            return Err("empty image path".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err(format!("image {} has zero size", self.path));
        }
        let in_vocab = |s: &str| s.is_empty() || vocabulary.map_or(true, |v| v.contains(s));
        if let Some(s) = &self.style {
            if !in_vocab(s) {
                return Err(format!("image {}: style {s:?} not in vocabulary", self.path));
            }
        }
        for (k, b) in self.boxes.iter().enumerate() {
            let bbox = b.bbox();
            bbox.validate()
                .map_err(|e| format!("image {} box {k}: {e}", self.path))?;
            if !bbox.within(self.width as f64, self.height as f64) {
                return Err(format!(
                    "image {} box {k} {bbox} lies outside the {}x{} image",
                    self.path, self.width, self.height
                ));
            }
            if !in_vocab(&b.style) {
                return Err(format!("image {} box {k}: style {:?} not in vocabulary", self.path, b.style));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderBody {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
    #[serde(default)]
    styles: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    manifest: HeaderBody,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub split: Option<Split>,
    /// Declared style vocabulary; empty means "whatever styles appear".
    pub styles: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(split: Option<Split>, styles: Vec<String>, root: impl Into<PathBuf>) -> Self {
        DatasetManifest {
            split,
            styles,
            entries: Vec::new(),
            root: root.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Declared vocabulary, or the styles in use when none is declared.
    pub fn vocabulary(&self) -> Vec<String> {
        if !self.styles.is_empty() {
            return self.styles.clone();
        }
        let mut set = BTreeSet::new();
        for e in &self.entries {
            if let Some(s) = &e.style {
                set.insert(s.clone());
            }
            for b in &e.boxes {
                set.insert(b.style.clone());
            }
        }
        set.remove("");
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        let vocab: Option<BTreeSet<String>> =
            (!self.styles.is_empty()).then(|| self.styles.iter().cloned().collect());
        let mut seen = HashSet::new();
        for e in &self.entries {
            e.validate(vocab.as_ref()).map_err(Error::Data)?;
            if !seen.insert(e.path.as_str()) {
                return Err(Error::Data(format!("duplicate image path {}", e.path)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>, source: &str) -> Result<Self> {
        let mut m = DatasetManifest::new(None, Vec::new(), root);
        let mut vocab: Option<BTreeSet<String>> = None;
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            let n = i + 1;
            let err = |msg: String| Error::Data(format!("{source}: line {n}: {msg}"));
            if line.trim().is_empty() {
                continue;
            }
            if line.contains("\"manifest\"") && m.entries.is_empty() && vocab.is_none() {
                if let Ok(h) = serde_json::from_str::<Header>(line) {
                    m.split = h.manifest.split;
                    m.styles = h.manifest.styles;
                    vocab = (!m.styles.is_empty()).then(|| m.styles.iter().cloned().collect());
                    continue;
                }
            }
            let entry: ManifestEntry = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            entry.validate(vocab.as_ref()).map_err(err)?;
            if !seen.insert(entry.path.clone()) {
                return Err(err(format!("duplicate image path {}", entry.path)));
            }
            m.entries.push(entry);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = Header {
            manifest: HeaderBody {
                split: self.split,
                styles: self.styles.clone(),
            },
        };
        let mut out = serde_json::to_string(&header).map_err(|e| Error::Data(e.to_string()))?;
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).map_err(|e| Error::Data(e.to_string()))?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, self.to_jsonl()?).map_err(|e| Error::io(path, e))
    }

    pub fn annotations(&self) -> Vec<Annotation> {
        self.entries.iter().flat_map(ManifestEntry::annotations).collect()
    }

    /// Image id to image-level style (falling back to the first box style).
    pub fn image_styles(&self) -> BTreeMap<String, String> {
        self.entries
            .iter()
            .filter_map(|e| {
                let style = e
                    .style
                    .clone()
                    .or_else(|| e.boxes.iter().map(|b| b.style.clone()).find(|s| !s.is_empty()))?;
                Some((e.path.clone(), style))
            })
            .collect()
    }

    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    /// Loads an entry's image as RGB and checks its size against the manifest.
    pub fn load_image(&self, entry: &ManifestEntry) -> Result<RgbImage> {
        let path = self.image_path(entry);
        let img = image::open(&path)
            .map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?
            .to_rgb8();
        if img.dimensions() != (entry.width, entry.height) {
            return Err(Error::Data(format!(
                "image {} is {}x{}, manifest says {}x{}",
                entry.path,
                img.width(),
                img.height(),
                entry.width,
                entry.height
            )));
        }
        Ok(img)
    }

    /// Concatenation of two manifests sharing a root (e.g. train + val).
    pub fn concat(&self, other: &DatasetManifest, split: Option<Split>) -> Result<Self> {
        let mut styles: BTreeSet<String> = self.styles.iter().cloned().collect();
        styles.extend(other.styles.iter().cloned());
        if self.root != other.root {
            return Err(Error::Data(format!(
                "cannot merge manifests rooted at {} and {}",
                self.root.display(),
                other.root.display()
            )));
        }
        let mut m = DatasetManifest::new(split, styles.into_iter().collect(), self.root.clone());
        m.entries = self.entries.iter().chain(&other.entries).cloned().collect();
        m.validate()?;
        Ok(m)
    }
}
