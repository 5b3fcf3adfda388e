use std::path::{Path, PathBuf};

use super::{load_image, load_mask, RgbImage};
use crate::error::{Error, Result};
use crate::grid::BinaryMask;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub instances: Option<PathBuf>,
}

impl ManifestRecord {
    /// File stem of the image, used to pair predictions with ground truth.
    pub fn stem(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

/// One decoded record.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub mask: BinaryMask,
    pub instances: Vec<BinaryMask>,
}

/// Dataset listing: `image,mask[,instances_dir]` per line, `#` comments,
/// paths relative to the manifest file.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        let mut records = Vec::new();
        for row in reader.records() {
            let row = row.map_err(|e| Error::Data(format!("manifest: {e}")))?;
            let line = row.position().map_or(0, |p| p.line());
            if row.iter().all(str::is_empty) {
                continue;
            }
            if records.is_empty() && row.get(0) == Some("image") && row.get(1) == Some("mask") {
                continue;
            }
            if !(2..=3).contains(&row.len()) || row[0].is_empty() || row[1].is_empty() {
                return Err(Error::Data(format!(
                    "manifest line {line}: expected image,mask[,instances_dir], got {} fields",
                    row.len()
                )));
            }
            let instances = row.get(2).filter(|s| !s.is_empty()).map(|s| base.join(s));
            records.push(ManifestRecord {
                image: base.join(&row[0]),
                mask: base.join(&row[1]),
                instances,
            });
        }
        Ok(Self { records })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new("")))
    }

    /// Writes the manifest with paths made relative to its directory where possible.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).to_string_lossy().into_owned();
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            let mut fields = vec![rel(&r.image), rel(&r.mask)];
            fields.extend(r.instances.as_deref().map(rel));
            w.write_record(&fields).map_err(|e| Error::Data(e.to_string()))?;
        }
        let body = w.into_inner().map_err(|e| Error::Data(e.to_string()))?;
        let mut text = b"# image,mask,instances_dir\n".to_vec();
        text.extend(body);
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(&self, index: usize) -> Result<Sample> {
        let r = &self.records[index];
        let context = |e: Error| Error::Data(format!("manifest record {index} ({}): {e}", r.image.display()));
        let image = load_image(&r.image).map_err(context)?;
        let mask = load_mask(&r.mask).map_err(context)?;
        if (image.height(), image.width()) != (mask.height(), mask.width()) {
            return Err(context(Error::ShapeMismatch(format!(
                "image is {}x{}, mask is {}x{}",
                image.height(),
                image.width(),
                mask.height(),
                mask.width()
            ))));
        }
        let instances = match &r.instances {
            Some(dir) => load_instances(dir).map_err(context)?,
            None => Vec::new(),
        };
        if let Some(bad) = instances
            .iter()
            .find(|m| (m.height(), m.width()) != (mask.height(), mask.width()))
        {
            return Err(context(Error::ShapeMismatch(format!(
                "instance mask is {}x{}, mask is {}x{}",
                bad.height(),
                bad.width(),
                mask.height(),
                mask.width()
            ))));
        }
        Ok(Sample { image, mask, instances })
    }

    pub fn load_all(&self) -> Result<Vec<Sample>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }

    /// Decodes every record, reporting the first inconsistent one.
    pub fn validate(&self) -> Result<()> {
        (0..self.len()).try_for_each(|i| self.load(i).map(drop))
    }
}

/// Loads every `.png` in `dir`, sorted by file name.
pub fn load_instances(dir: impl AsRef<Path>) -> Result<Vec<BinaryMask>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    paths.iter().map(load_mask).collect()
}
