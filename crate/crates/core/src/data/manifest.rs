//! Per-scene manifest files and dataset directories.
//!
//! A manifest lists the three LDR frames as `<path> <stop>` lines in
//! increasing exposure order, optionally followed by `gt <path>` and
//! `scale <value>` lines. Relative paths are resolved against the manifest's
//! directory. Stops are log₂ exposures; times are normalized so the middle
//! frame has `t = 1`. The ground truth is divided by `scale` (default 1) to
//! bring it into `[0, 1]`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::io::{read_hdr_image, read_ppm};
use super::{ExposureStack, Sample};
use crate::error::{Error, Result};

/// File name looked up inside scene directories.
pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub images: [PathBuf; 3],
    pub stops: [f64; 3],
    pub gt: Option<PathBuf>,
    pub scale: f64,
    /// Directory relative paths are resolved against.
    pub base: PathBuf,
}

impl Manifest {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Manifest {
            path: path.to_path_buf(),
            reason,
        };
        let mut frames = Vec::new();
        let mut gt = None;
        let mut scale = None;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (a, b) = line
                .rsplit_once(char::is_whitespace)
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| bad(format!("line {}: expected two fields", n + 1)))?;
            match a {
                "gt" => gt = Some(PathBuf::from(b)),
                "scale" => {
                    let s: f64 = b.parse().map_err(|_| bad(format!("line {}: bad scale `{b}`", n + 1)))?;
                    if !(s > 0.0 && s.is_finite()) {
                        return Err(bad(format!("scale {s} must be positive")));
                    }
                    scale = Some(s);
                }
                _ => {
                    if gt.is_some() || scale.is_some() {
                        return Err(bad(format!("line {}: frame listed after gt/scale", n + 1)));
                    }
                    let stop: f64 = b
                        .parse()
                        .map_err(|_| bad(format!("line {}: bad exposure `{b}`", n + 1)))?;
                    frames.push((PathBuf::from(a), stop));
                }
            }
        }
        if frames.len() != 3 {
            return Err(bad(format!("expected 3 exposures, found {}", frames.len())));
        }
        let stops = [frames[0].1, frames[1].1, frames[2].1];
        if !(stops[0] < stops[1] && stops[1] < stops[2]) {
            return Err(bad(format!("stops {stops:?} are not strictly increasing")));
        }
        let [a, b, c] = <[(PathBuf, f64); 3]>::try_from(frames).expect("three frames");
        Ok(Manifest {
            images: [a.0, b.0, c.0],
            stops,
            gt,
            scale: scale.unwrap_or(1.0),
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (p, stop) in self.images.iter().zip(&self.stops) {
            let _ = writeln!(s, "{} {}", p.display(), stop);
        }
        if let Some(gt) = &self.gt {
            let _ = writeln!(s, "gt {}", gt.display());
        }
        if self.scale != 1.0 {
            let _ = writeln!(s, "scale {}", self.scale);
        }
        s
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Exposure times `2^(stop − stop₂)`.
    pub fn times(&self) -> [f64; 3] {
        self.stops.map(|s| (s - self.stops[1]).exp2())
    }

    pub fn load_stack(&self, gamma: f64) -> Result<ExposureStack> {
        let [a, b, c] = &self.images;
        let frames = [
            read_ppm(self.resolve(a))?,
            read_ppm(self.resolve(b))?,
            read_ppm(self.resolve(c))?,
        ];
        ExposureStack::new(frames, self.times(), gamma)
    }

    /// Ground truth divided by `scale`.
    pub fn load_gt(&self) -> Result<Option<crate::tensor::Tensor<f32>>> {
        let Some(p) = &self.gt else { return Ok(None) };
        let inv = (1.0 / self.scale) as f32;
        Ok(Some(read_hdr_image(self.resolve(p))?.map(|v| v * inv)))
    }

    pub fn load_sample(&self, gamma: f64) -> Result<Sample> {
        let gt = self.load_gt()?.ok_or_else(|| Error::Manifest {
            path: self.base.join(MANIFEST_NAME),
            reason: "no ground truth listed".into(),
        })?;
        Sample::new(self.load_stack(gamma)?, gt)
    }
}

/// Manifests of a dataset directory: `DIR/manifest.txt` itself, or
/// `DIR/*/manifest.txt` in name order.
pub fn find_manifests(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let own = dir.join(MANIFEST_NAME);
    if own.is_file() {
        return Ok(vec![own]);
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let m = entry.path().join(MANIFEST_NAME);
        if m.is_file() {
            found.push(m);
        }
    }
    found.sort();
    Ok(found)
}

/// Loads every sample of a dataset directory (see [`find_manifests`]).
pub fn load_dataset(dir: impl AsRef<Path>, gamma: f64) -> Result<Vec<Sample>> {
    let manifests = find_manifests(dir)?;
    if manifests.is_empty() {
        return Err(Error::EmptyDataset);
    }
    manifests
        .iter()
        .map(|m| Manifest::load(m)?.load_sample(gamma))
        .collect()
}
