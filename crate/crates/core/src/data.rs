//! Image datasets held in memory, synthetic generators, the CIFAR-10 binary
//! reader and PPM grid output.

use crate::{Error, Result};
use pgan_noise::{seed_mix, RngKind, RngState};
use pgan_tensor::Tensor;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

/// Images `(N, C, S, S)` in [-1, 1] with one label per image.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<u8>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.images.shape()[1]
    }

    /// Images at `indices`, in that order.
    pub fn gather(&self, indices: &[usize]) -> Tensor {
        let per: usize = self.images.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("gathered shape")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Horizontal gradients, bright on the left or (mirrored) on the right.
    TwoMode,
    /// One horizontal or vertical bright bar on a dark field.
    Bars,
    /// A bright blob near one of four quadrant centres.
    Gaussians,
}

impl SynthKind {
    pub fn classes(self) -> usize {
        match self {
            SynthKind::TwoMode | SynthKind::Bars => 2,
            SynthKind::Gaussians => 4,
        }
    }

    fn tag(self) -> u32 {
        match self {
            SynthKind::TwoMode => 1,
            SynthKind::Bars => 2,
            SynthKind::Gaussians => 3,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::TwoMode => "two-mode",
            SynthKind::Bars => "bars",
            SynthKind::Gaussians => "gaussians",
        })
    }
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two-mode" => Ok(SynthKind::TwoMode),
            "bars" => Ok(SynthKind::Bars),
            "gaussians" => Ok(SynthKind::Gaussians),
            _ => Err(Error::Data(format!(
                "unknown synthetic dataset {s:?} (two-mode, bars, gaussians)"
            ))),
        }
    }
}

/// Seed domain for synthetic data streams.
pub const SYNTH_DOMAIN: u32 = 0x5E7;

/// Per-pixel noise added to every synthetic image.
pub const SYNTH_NOISE: f64 = 0.05;

/// `n` images of `channels x size x size`. Labels cycle through the classes,
/// so every class gets `n / classes` images (plus one for the first `n % classes`).
pub fn synth(kind: SynthKind, n: usize, size: usize, channels: usize, seed: u64) -> Result<Dataset> {
    if n == 0 || size < 4 || channels == 0 {
        return Err(Error::Data(format!("cannot make {n} images of {channels}x{size}x{size}")));
    }
    let mut rng = RngState::seeded(RngKind::Mt19937, seed_mix(seed, SYNTH_DOMAIN, kind.tag()));
    let classes = kind.classes();
    let plane = size * size;
    let mut data = Vec::with_capacity(n * channels * plane);
    let mut labels = Vec::with_capacity(n);
    let last = (size - 1) as f64;
    for k in 0..n {
        let label = k % classes;
        let mut field = vec![0.0; plane];
        match kind {
            SynthKind::TwoMode => {
                let amp = rng.uniform_in(0.6, 0.9);
                let sign = if label == 0 { 1.0 } else { -1.0 };
                for (p, v) in field.iter_mut().enumerate() {
                    let j = (p % size) as f64;
                    *v = sign * amp * (1.0 - 2.0 * j / last);
                }
            }
            SynthKind::Bars => {
                let thick = (size / 8).max(1);
                let pos = rng.below(size - thick + 1);
                for (p, v) in field.iter_mut().enumerate() {
                    let (i, j) = (p / size, p % size);
                    let along = if label == 0 { i } else { j };
                    *v = if (pos..pos + thick).contains(&along) { 1.0 } else { -1.0 };
                }
            }
            SynthKind::Gaussians => {
                let q = size as f64 / 4.0;
                let (cy, cx) = [(q, q), (q, 3.0 * q), (3.0 * q, q), (3.0 * q, 3.0 * q)][label];
                let cy = cy - 0.5 + rng.uniform_in(-1.0, 1.0);
                let cx = cx - 0.5 + rng.uniform_in(-1.0, 1.0);
                let s2 = 2.0 * (size as f64 / 8.0).powi(2);
                for (p, v) in field.iter_mut().enumerate() {
                    let (i, j) = ((p / size) as f64, (p % size) as f64);
                    let r2 = (i - cy).powi(2) + (j - cx).powi(2);
                    *v = -1.0 + 2.0 * (-r2 / s2).exp();
                }
            }
        }
        for _ in 0..channels {
            let noise = rng.normals(plane);
            data.extend(field.iter().zip(noise).map(|(v, z)| (v + SYNTH_NOISE * z).clamp(-1.0, 1.0)));
        }
        labels.push(label as u8);
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, channels, size, size], data)?,
        labels,
        classes,
    })
}

/// Write `images.ptns` and `labels.ptns` into `dir` (created if missing).
pub fn save_ptns_dir(dir: &Path, ds: &Dataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("images.ptns"))?);
    ds.images.write_ptns(&mut f)?;
    f.flush()?;
    let labels = Tensor::vector(&ds.labels.iter().map(|&l| l as f64).collect::<Vec<_>>());
    let mut f = std::io::BufWriter::new(std::fs::File::create(dir.join("labels.ptns"))?);
    labels.write_ptns(&mut f)?;
    f.flush()?;
    Ok(())
}

/// Inverse of [`save_ptns_dir`]. The class count is one more than the largest label.
pub fn load_ptns_dir(dir: &Path) -> Result<Dataset> {
    let images = Tensor::read_ptns(&mut std::io::BufReader::new(std::fs::File::open(dir.join("images.ptns"))?))?;
    let raw = Tensor::read_ptns(&mut std::io::BufReader::new(std::fs::File::open(dir.join("labels.ptns"))?))?;
    if images.shape().len() != 4 || raw.shape() != [images.batch()] {
        return Err(Error::Data(format!(
            "images {:?} and labels {:?} do not pair up",
            images.shape(),
            raw.shape()
        )));
    }
    if images.data().iter().any(|v| !(-1.0..=1.0).contains(v)) {
        return Err(Error::Data("image values outside [-1, 1]".into()));
    }
    let mut labels = Vec::with_capacity(raw.len());
    for &v in raw.data() {
        if v.fract() != 0.0 || !(0.0..=255.0).contains(&v) {
            return Err(Error::Data(format!("label {v} is not a byte")));
        }
        labels.push(v as u8);
    }
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(Dataset {
        images,
        labels,
        classes: classes.max(2),
    })
}

pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Decode CIFAR-10 binary records: a label byte then 3072 channel-planar pixel bytes.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Data(format!(
            "CIFAR-10 data of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * 3072);
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i} has label {} > 9", rec[0])));
        }
        labels.push(rec[0]);
        data.extend(rec[1..].iter().map(|&b| b as f64 / 127.5 - 1.0));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, 3, 32, 32], data)?,
        labels,
        classes: 10,
    })
}

/// Read and concatenate CIFAR-10 batch files (a directory means every `*.bin` inside, sorted).
pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let files = if path.is_dir() {
        let mut v: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "bin"))
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!("no .bin files in {}", path.display())));
    }
    let mut bytes = Vec::new();
    for f in files {
        bytes.extend(std::fs::read(f)?);
    }
    parse_cifar10(&bytes)
}

/// Encode images back into CIFAR-10 records (pixels rounded to bytes).
pub fn to_cifar10(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.images.shape()[1..] != [3, 32, 32] {
        return Err(Error::Data(format!("CIFAR-10 records hold 3x32x32 images, not {:?}", &ds.images.shape()[1..])));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for (i, &l) in ds.labels.iter().enumerate() {
        out.push(l);
        out.extend(ds.images.data()[i * 3072..(i + 1) * 3072].iter().map(|&v| to_byte(v)));
    }
    Ok(out)
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Binary PPM of `images (N, C, H, W)` tiled into a near-square grid with a
/// one-pixel dark gutter. Single-channel images are shown in grey.
pub fn ppm_grid(images: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = match *images.shape() {
        [n, c, h, w] if n > 0 && (c == 1 || c == 3) => (n, c, h, w),
        _ => return Err(Error::Data(format!("cannot tile images of shape {:?}", images.shape()))),
    };
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh * 3];
    let d = images.data();
    for k in 0..n {
        let (oy, ox) = ((k / cols) * (h + 1) + 1, (k % cols) * (w + 1) + 1);
        for i in 0..h {
            for j in 0..w {
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    let v = d[((k * c + src) * h + i) * w + j];
                    px[((oy + i) * gw + ox + j) * 3 + ch] = to_byte(v);
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend(px);
    Ok(out)
}

pub fn write_ppm(path: &Path, images: &Tensor) -> Result<()> {
    let bytes = ppm_grid(images)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}
