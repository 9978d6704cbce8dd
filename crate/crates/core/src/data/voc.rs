//! Import of VOC-style XML annotation directories.
//!
//! Only `person` objects are kept. Pixel coordinates are 1-based inclusive in
//! VOC files and are converted to continuous boxes (`xmin - 1 .. xmax`). The
//! style label comes from an optional `<style>` element, else from the
//! sub-directory holding the XML file.

use std::fs;
use std::path::{Path, PathBuf};

use crate::data::manifest::{BoxRecord, DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;

fn child_text<'a>(node: roxmltree::Node<'a, 'a>, name: &str) -> Option<&'a str> {
    node.children()
        .find(|c| c.has_tag_name(name))
        .and_then(|c| c.text())
        .map(str::trim)
}

fn number(node: roxmltree::Node, name: &str, file: &str) -> Result<f64> {
    child_text(node, name)
        .and_then(|t| t.parse::<f64>().ok())
        .filter(|v| v.is_finite())
        .ok_or_else(|| Error::Data(format!("{file}: missing or invalid <{name}>")))
}

/// Parses one annotation file. `fallback_style` is used when the XML has no
/// `<style>` element.
pub fn parse_voc_xml(text: &str, file: &str, image_prefix: &str, fallback_style: &str) -> Result<ManifestEntry> {
    let doc = roxmltree::Document::parse(text).map_err(|e| Error::Data(format!("{file}: {e}")))?;
    let root = doc.root_element();
    let filename = child_text(root, "filename")
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::Data(format!("{file}: missing <filename>")))?;
    let size = root
        .children()
        .find(|c| c.has_tag_name("size"))
        .ok_or_else(|| Error::Data(format!("{file}: missing <size>")))?;
    let width = number(size, "width", file)? as u32;
    let height = number(size, "height", file)? as u32;
    let style = child_text(root, "style").unwrap_or(fallback_style).to_string();

    let mut boxes = Vec::new();
    for obj in root.children().filter(|c| c.has_tag_name("object")) {
        if child_text(obj, "name") != Some("person") {
            continue;
        }
        let difficult = matches!(child_text(obj, "difficult"), Some("1") | Some("true"));
        let bnd = obj
            .children()
            .find(|c| c.has_tag_name("bndbox"))
            .ok_or_else(|| Error::Data(format!("{file}: person without <bndbox>")))?;
        let raw = BBox {
            x1: number(bnd, "xmin", file)? - 1.0,
            y1: number(bnd, "ymin", file)? - 1.0,
            x2: number(bnd, "xmax", file)?,
            y2: number(bnd, "ymax", file)?,
        };
        let bbox = raw
            .clip(width as f64, height as f64)
            .ok_or_else(|| Error::Data(format!("{file}: box {raw} lies outside the image")))?;
        boxes.push(BoxRecord::from_bbox(&bbox, difficult, style.clone()));
    }
    let path = if image_prefix.is_empty() {
        filename.to_string()
    } else {
        format!("{}/{}", image_prefix.trim_end_matches('/'), filename)
    };
    Ok(ManifestEntry {
        path,
        width,
        height,
        style: (!style.is_empty()).then_some(style),
        boxes,
    })
}

fn collect_xml(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut items: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|r| r.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    items.sort();
    for p in items {
        if p.is_dir() {
            collect_xml(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("xml")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Converts every XML file under `xml_dir` into one manifest rooted at
/// `root`. Images are expected at `image_prefix/<subdir>/<filename>`.
pub fn import_voc_dir(xml_dir: &Path, image_prefix: &str, root: &Path, split: Option<Split>) -> Result<DatasetManifest> {
    let mut files = Vec::new();
    collect_xml(xml_dir, &mut files)?;
    let mut m = DatasetManifest::new(split, Vec::new(), root);
    for f in files {
        let text = fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
        let rel_dir = f
            .parent()
            .and_then(|p| p.strip_prefix(xml_dir).ok())
            .map(|p| p.to_string_lossy().replace('\\', "/"))
            .unwrap_or_default();
        let prefix = match (image_prefix.is_empty(), rel_dir.is_empty()) {
            (true, _) => rel_dir.clone(),
            (false, true) => image_prefix.to_string(),
            (false, false) => format!("{}/{rel_dir}", image_prefix.trim_end_matches('/')),
        };
        let fallback = rel_dir.split('/').next().unwrap_or("");
        m.entries
            .push(parse_voc_xml(&text, &f.display().to_string(), &prefix, fallback)?);
    }
    m.styles = m.vocabulary();
    m.validate()?;
    Ok(m)
}
