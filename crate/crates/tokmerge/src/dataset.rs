//! Dataset sources: a small binary image format (TKDS) and a deterministic
//! synthetic generator for desk-scale experiments.
//!
//! TKDS layout, little-endian throughout:
//! magic "TKDS", version u16, count u32, channels u16, height u16,
//! width u16, num_classes u16, then `count` records of
//! (label u16, channels*height*width pixel bytes).

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{rng_from, streams, substream};
use crate::tensor::Tensor;
use crate::Elem;

const MAGIC: &[u8; 4] = b"TKDS";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 18;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub labels: Vec<u16>,
    /// count * channels * height * width raw bytes.
    pub pixels: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn sample_bytes(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Images for the given sample indices as [B, C, H, W], scaled to [0, 1].
    pub fn image_batch(&self, indices: &[usize]) -> Result<Tensor> {
        let sb = self.sample_bytes();
        let mut data = Vec::with_capacity(indices.len() * sb);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid(format!(
                    "sample index {} out of range ({} samples)",
                    i,
                    self.len()
                )));
            }
            data.extend(
                self.pixels[i * sb..(i + 1) * sb]
                    .iter()
                    .map(|&b| Elem::from(b) / 255.0),
            );
        }
        Tensor::new(
            vec![indices.len(), self.channels, self.height, self.width],
            data,
        )
    }

    pub fn label_batch(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| usize::from(self.labels[i])).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let count = u32::try_from(self.len())
            .map_err(|_| Error::invalid("dataset too large for the format"))?;
        let mut out = Vec::with_capacity(HEADER_LEN + self.len() * (2 + self.sample_bytes()));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&count.to_le_bytes());
        for v in [self.channels, self.height, self.width, self.num_classes] {
            let v = u16::try_from(v).map_err(|_| Error::invalid("extent too large for u16"))?;
            out.extend_from_slice(&v.to_le_bytes());
        }
        let sb = self.sample_bytes();
        for i in 0..self.len() {
            out.extend_from_slice(&self.labels[i].to_le_bytes());
            out.extend_from_slice(&self.pixels[i * sb..(i + 1) * sb]);
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let bad = |reason: &str| Error::format(path.display().to_string(), reason);
        let bytes = fs::read(path)?;
        if bytes.len() < HEADER_LEN {
            return Err(bad("shorter than the header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(bad("magic mismatch, not a TKDS file"));
        }
        let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]);
        let version = u16_at(4);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {}", version)));
        }
        let count = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
        let channels = usize::from(u16_at(10));
        let height = usize::from(u16_at(12));
        let width = usize::from(u16_at(14));
        let num_classes = usize::from(u16_at(16));
        if num_classes == 0 {
            return Err(bad("num_classes is zero"));
        }
        let sb = channels * height * width;
        let expect = HEADER_LEN + count * (2 + sb);
        if bytes.len() != expect {
            return Err(bad(&format!(
                "length {} does not match header (expected {})",
                bytes.len(),
                expect
            )));
        }
        let mut labels = Vec::with_capacity(count);
        let mut pixels = Vec::with_capacity(count * sb);
        let mut off = HEADER_LEN;
        for _ in 0..count {
            let label = u16::from_le_bytes([bytes[off], bytes[off + 1]]);
            if usize::from(label) >= num_classes {
                return Err(bad(&format!(
                    "label {} out of range for {} classes",
                    label, num_classes
                )));
            }
            labels.push(label);
            pixels.extend_from_slice(&bytes[off + 2..off + 2 + sb]);
            off += 2 + sb;
        }
        Ok(Dataset { channels, height, width, num_classes, labels, pixels })
    }
}

/// Class-conditional cell means plus Gaussian pixel noise.
///
/// The grid is cut into four quadrants; class `c` brightens the quadrants
/// whose bit is set in `c + 1`, so every class has a distinct mean image
/// and the task is linearly separable at `sigma` 0.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub grid: (usize, usize),
    /// Pixels per grid cell side.
    pub patch_px: usize,
    pub classes: usize,
    pub count: usize,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec { grid: (8, 8), patch_px: 4, classes: 4, count: 256, sigma: 0.1, seed: 0 }
    }
}

const DARK: f64 = 0.2;
const BRIGHT: f64 = 0.8;

impl SyntheticSpec {
    /// Parse "grid=8x8,patch=4,classes=4,n=256,sigma=0.1,seed=7"; missing
    /// keys keep their defaults.
    pub fn parse(s: &str) -> Result<SyntheticSpec> {
        let mut spec = SyntheticSpec::default();
        for part in s.split(',').filter(|p| !p.trim().is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("expected key=value, got '{}'", part)))?;
            let (key, value) = (key.trim(), value.trim());
            let num = |what: &str| -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::invalid(format!("bad {} value '{}'", what, value)))
            };
            match key {
                "grid" => {
                    let (h, w) = value.split_once('x').ok_or_else(|| {
                        Error::invalid(format!("grid must be HxW, got '{}'", value))
                    })?;
                    spec.grid = (
                        h.parse().map_err(|_| Error::invalid("bad grid height"))?,
                        w.parse().map_err(|_| Error::invalid("bad grid width"))?,
                    );
                }
                "patch" => spec.patch_px = num("patch")?,
                "classes" => spec.classes = num("classes")?,
                "n" => spec.count = num("n")?,
                "sigma" => {
                    spec.sigma = value
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad sigma value '{}'", value)))?;
                }
                "seed" => {
                    spec.seed = value
                        .parse()
                        .map_err(|_| Error::invalid(format!("bad seed value '{}'", value)))?;
                }
                other => return Err(Error::invalid(format!("unknown synth key '{}'", other))),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 15 {
            return Err(Error::invalid(format!(
                "classes must be in 2..=15 (distinct quadrant codes), got {}",
                self.classes
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 || self.patch_px == 0 {
            return Err(Error::invalid("grid and patch sizes must be positive"));
        }
        if self.sigma < 0.0 || !self.sigma.is_finite() {
            return Err(Error::invalid("sigma must be finite and non-negative"));
        }
        Ok(())
    }

    /// Mean value of grid cell (i, j) for the given class.
    pub fn cell_mean(&self, class: usize, i: usize, j: usize) -> f64 {
        let (h, w) = self.grid;
        let quadrant = usize::from(i >= h / 2) * 2 + usize::from(j >= w / 2);
        if (class + 1) >> quadrant & 1 == 1 {
            BRIGHT
        } else {
            DARK
        }
    }

    pub fn generate(&self) -> Result<Dataset> {
        self.validate()?;
        let (h, w) = self.grid;
        let p = self.patch_px;
        let (ih, iw) = (h * p, w * p);
        let mut rng = rng_from(substream(self.seed, streams::DATA));
        let noise = Normal::new(0.0, self.sigma)
            .map_err(|e| Error::invalid(format!("bad sigma: {}", e)))?;
        let mut labels = Vec::with_capacity(self.count);
        let mut pixels = Vec::with_capacity(self.count * ih * iw);
        for idx in 0..self.count {
            let class = idx % self.classes;
            labels.push(class as u16);
            for y in 0..ih {
                for x in 0..iw {
                    let mean = self.cell_mean(class, y / p, x / p);
                    let v = (mean + noise.sample(&mut rng)).clamp(0.0, 1.0);
                    pixels.push((v * 255.0).round() as u8);
                }
            }
        }
        // deterministic order shuffle so batches mix classes
        let mut order: Vec<usize> = (0..self.count).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let sb = ih * iw;
        let mut ds = Dataset {
            channels: 1,
            height: ih,
            width: iw,
            num_classes: self.classes,
            labels: Vec::with_capacity(self.count),
            pixels: Vec::with_capacity(self.count * sb),
        };
        for &i in &order {
            ds.labels.push(labels[i]);
            ds.pixels.extend_from_slice(&pixels[i * sb..(i + 1) * sb]);
        }
        Ok(ds)
    }
}
