//! Dataset manifests: one `image<TAB>truth<TAB>fov<TAB>stratum` record per line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use vesselseg::imageio::{green_channel, labels_from_raster, normalize, read_pnm_file, FovMask, Plane};
use vesselseg::training::TrainingImage;
use vesselseg::wavelet::{build_input_stack, ChannelMode};
use vesselseg::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub image: PathBuf,
    pub truth: PathBuf,
    pub fov: PathBuf,
    pub stratum: String,
}

impl Record {
    /// Image file stem, used to name outputs.
    pub fn name(&self) -> String {
        self.image
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "image".into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Manifest {
    pub records: Vec<Record>,
}

impl Manifest {
    /// Parses manifest text; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut records = Vec::new();
        for (no, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 4 {
                bail!(
                    "manifest line {}: expected 4 tab-separated fields, found {}",
                    no + 1,
                    fields.len()
                );
            }
            let path = |s: &str| {
                let p = Path::new(s);
                if p.is_absolute() {
                    p.to_path_buf()
                } else {
                    base.join(p)
                }
            };
            records.push(Record {
                image: path(fields[0]),
                truth: path(fields[1]),
                fov: path(fields[2]),
                stratum: fields[3].trim().to_string(),
            });
        }
        if records.is_empty() {
            bail!("manifest has no records");
        }
        let mut names: Vec<String> = records.iter().map(Record::name).collect();
        names.sort();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            bail!("two records share the image name {:?}", w[0]);
        }
        Ok(Manifest { records })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading manifest {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base).with_context(|| format!("in manifest {}", path.display()))
    }

    /// Manifest text with paths written relative to `base` when they lie below it.
    pub fn to_text(&self, base: Option<&Path>) -> String {
        let show = |p: &Path| {
            base.and_then(|b| p.strip_prefix(b).ok())
                .unwrap_or(p)
                .display()
                .to_string()
        };
        self.records
            .iter()
            .map(|r| {
                format!(
                    "{}\t{}\t{}\t{}\n",
                    show(&r.image),
                    show(&r.truth),
                    show(&r.fov),
                    r.stratum
                )
            })
            .collect()
    }

    pub fn subset(&self, items: &[usize]) -> Manifest {
        Manifest {
            records: items.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// An image loaded for training or scoring.
pub struct LoadedImage<T: Real> {
    pub name: String,
    pub data: TrainingImage<T>,
}

pub fn load_fov(path: &Path) -> Result<FovMask> {
    let raster = read_pnm_file(path)?;
    if raster.channels != 1 {
        bail!("FOV mask {} must be grayscale", path.display());
    }
    Ok(FovMask::from_raster(&raster).with_context(|| format!("FOV mask {}", path.display()))?)
}

pub fn load_truth<T: Real>(path: &Path) -> Result<Plane<T>> {
    let raster = read_pnm_file(path)?;
    Ok(labels_from_raster(&raster).with_context(|| format!("truth mask {}", path.display()))?)
}

pub fn load_record<T: Real>(record: &Record, mode: ChannelMode) -> Result<LoadedImage<T>> {
    let image = read_pnm_file(&record.image)?;
    let fov = load_fov(&record.fov)?;
    let labels: Plane<T> = load_truth(&record.truth)?;
    let (w, h) = (image.width, image.height);
    if fov.width != w || fov.height != h || !labels.same_dims(w, h) {
        bail!(
            "{}: image is {w}x{h} but truth is {}x{} and FOV {}x{}",
            record.name(),
            labels.width,
            labels.height,
            fov.width,
            fov.height
        );
    }
    let green =
        normalize(&green_channel::<T>(&image), Some(&fov)).with_context(|| format!("normalizing {}", record.name()))?;
    let stack = build_input_stack(&green, &fov, mode).with_context(|| format!("decomposing {}", record.name()))?;
    Ok(LoadedImage {
        name: record.name(),
        data: TrainingImage { stack, labels, fov },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_resolves_relative_paths() {
        let m = Manifest::parse(
            "a.ppm\ta_t.pgm\ta_f.pgm\tx\n\n/abs/b.ppm\tb_t.pgm\tb_f.pgm\ty\n",
            Path::new("/data"),
        )
        .unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[0].image, PathBuf::from("/data/a.ppm"));
        assert_eq!(m.records[1].image, PathBuf::from("/abs/b.ppm"));
        assert_eq!(m.records[1].stratum, "y");
        assert_eq!(m.records[0].name(), "a");
        assert_eq!(
            m.to_text(Some(Path::new("/data"))).lines().next().unwrap(),
            "a.ppm\ta_t.pgm\ta_f.pgm\tx"
        );
    }

    #[test]
    fn parse_rejects_malformed() {
        assert!(Manifest::parse("a\tb\tc\n", Path::new(".")).is_err());
        assert!(Manifest::parse("", Path::new(".")).is_err());
        assert!(Manifest::parse("a.ppm\tt\tf\ts\nd/a.ppm\tt\tf\ts\n", Path::new(".")).is_err());
    }
}
