//! Deterministic synthetic dataset: smooth "real" images and "fake" copies
//! with one locally manipulated elliptical region, plus the severity-graded
//! perturbations used for robustness sweeps.
//!
//! Every sample is a pure function of `(seed, sample_id)`, so datasets
//! regenerate byte-exactly from the manifest alone.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// One labeled image, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    /// [3 × H × W]
    pub image: Tensor<f64>,
    /// 0 real, 1 fake.
    pub label: usize,
    pub sample_id: u64,
}

/// Perturbation families of the robustness sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    GaussianBlur,
    GaussianNoise,
    BlockWise,
}

impl PerturbKind {
    pub const ALL: [PerturbKind; 3] = [
        PerturbKind::GaussianBlur,
        PerturbKind::GaussianNoise,
        PerturbKind::BlockWise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PerturbKind::GaussianBlur => "gaussian_blur",
            PerturbKind::GaussianNoise => "gaussian_noise",
            PerturbKind::BlockWise => "block_wise",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussian_blur" => Ok(PerturbKind::GaussianBlur),
            "gaussian_noise" => Ok(PerturbKind::GaussianNoise),
            "block_wise" => Ok(PerturbKind::BlockWise),
            other => Err(Error::arg(format!("unknown perturbation `{other}`"))),
        }
    }
}

/// A perturbation family at one of five severities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub kind: PerturbKind,
    /// 1..=5
    pub severity: usize,
}

impl PerturbationSpec {
    pub fn new(kind: PerturbKind, severity: usize) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::arg(format!("severity {severity} outside 1..=5")));
        }
        Ok(PerturbationSpec { kind, severity })
    }
}

// Fixed parameter tables, one entry per severity 1..=5.
const BLUR_SIGMAS: [f64; 5] = [0.5, 1.0, 1.5, 2.0, 2.5];
const NOISE_SIGMAS: [f64; 5] = [0.02, 0.04, 0.06, 0.08, 0.10];
const BLOCK_COUNTS: [usize; 5] = [2, 4, 6, 8, 10];
const BLOCK_SIZE: usize = 8;

/// Texture noise added to every real image.
const REAL_TEXTURE_STD: f64 = 0.02;
/// In-region manipulation strengths of fake images.
const FAKE_BLUR_SIGMA: f64 = 1.5;
const FAKE_SHIFT: f64 = 0.25;
const FAKE_NOISE_STD: f64 = 0.2;
/// Alpha-blend band width at the region boundary, pixels.
const BLEND_PIXELS: f64 = 2.0;

fn check_size(h: usize, w: usize) -> Result<()> {
    if h < 16 || w < 16 {
        return Err(Error::arg(format!("image {h}x{w} below the 16-pixel minimum")));
    }
    Ok(())
}

/// Smooth low-frequency image: per channel, 4 seeded 2-D cosines plus
/// Gaussian texture, min-max normalized to [0, 1].
pub fn real_image(h: usize, w: usize, rng: &mut Stream) -> Tensor<f64> {
    let mut data = vec![0.0; 3 * h * w];
    for c in 0..3 {
        let plane = &mut data[c * h * w..(c + 1) * h * w];
        for _ in 0..4 {
            // spatial frequencies kept low so the content is genuinely smooth
            let fy = rng.uniform(0.5, 3.0);
            let fx = rng.uniform(0.5, 3.0);
            let phase = rng.uniform(0.0, std::f64::consts::TAU);
            let amp = rng.uniform(0.3, 1.0);
            for i in 0..h {
                for j in 0..w {
                    let arg = std::f64::consts::TAU
                        * (fy * i as f64 / h as f64 + fx * j as f64 / w as f64)
                        + phase;
                    plane[i * w + j] += amp * arg.cos();
                }
            }
        }
        for v in plane.iter_mut() {
            *v += rng.normal() * REAL_TEXTURE_STD;
        }
        let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = (hi - lo).max(1e-12);
        for v in plane.iter_mut() {
            *v = (*v - lo) / span;
        }
    }
    Tensor::new(vec![3, h, w], data).unwrap()
}

/// Per-pixel blend weight of the manipulated region: 1 deep inside the
/// ellipse, 0 outside, ramping linearly over a [`BLEND_PIXELS`]-wide band
/// inside the boundary.
pub fn region_mask(h: usize, w: usize, rng: &mut Stream) -> Tensor<f64> {
    let min_side = h.min(w) as f64;
    let cx = rng.uniform(0.3, 0.7) * w as f64;
    let cy = rng.uniform(0.3, 0.7) * h as f64;
    let a = rng.uniform(0.15, 0.35) * min_side;
    let b = rng.uniform(0.15, 0.35) * min_side;
    let theta = rng.uniform(0.0, std::f64::consts::PI);
    let (ct, st) = (theta.cos(), theta.sin());
    let mut mask = vec![0.0; h * w];
    for i in 0..h {
        for j in 0..w {
            let dx = j as f64 + 0.5 - cx;
            let dy = i as f64 + 0.5 - cy;
            let u = (dx * ct + dy * st) / a;
            let v = (-dx * st + dy * ct) / b;
            let rho = (u * u + v * v).sqrt();
            // signed inward distance approximated on the smaller semi-axis
            let depth = (1.0 - rho) * a.min(b);
            mask[i * w + j] = (depth / BLEND_PIXELS).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![1, h, w], mask).unwrap()
}

/// Separable Gaussian blur per channel; truncated kernels are renormalized at
/// the borders so constant images pass through unchanged.
pub fn gaussian_blur(image: &Tensor<f64>, sigma: f64) -> Tensor<f64> {
    let (ch, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let pass = |src: &[f64], dst: &mut [f64], len: usize, stride: usize, lanes: usize,
                lane_stride: usize| {
        for lane in 0..lanes {
            for i in 0..len {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let t = i as isize + ki as isize - radius;
                    if t < 0 || t >= len as isize {
                        continue;
                    }
                    acc += kv * src[lane * lane_stride + t as usize * stride];
                    norm += kv;
                }
                dst[lane * lane_stride + i * stride] = acc / norm;
            }
        }
    };
    let mut out = vec![0.0; ch * h * w];
    let mut tmp = vec![0.0; ch * h * w];
    for c in 0..ch {
        let src = &image.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut tmp[c * h * w..(c + 1) * h * w];
        // horizontal pass: lanes are rows
        pass(src, dst, w, 1, h, w);
    }
    for c in 0..ch {
        let src = &tmp[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        // vertical pass: lanes are columns
        pass(src, dst, h, w, w, 1);
    }
    Tensor::new(image.shape().to_vec(), out).unwrap()
}

/// Manipulate one elliptical region of `base`: blur, intensity shift, and
/// high-frequency noise inside, alpha-blended at the boundary.
/// Returns the fake image and the blend mask actually used.
pub fn fake_from(base: &Tensor<f64>, rng: &mut Stream) -> (Tensor<f64>, Tensor<f64>) {
    let (h, w) = (base.shape()[1], base.shape()[2]);
    let mask = region_mask(h, w, rng);
    let blurred = gaussian_blur(base, FAKE_BLUR_SIGMA);
    let shift = if rng.next_f64() < 0.5 { FAKE_SHIFT } else { -FAKE_SHIFT };
    let hw = h * w;
    let mut out = base.data().to_vec();
    for c in 0..3 {
        for p in 0..hw {
            let alpha = mask.data()[p];
            if alpha == 0.0 {
                // noise draws stay inside the support so the outside is
                // bit-identical to the base image
                continue;
            }
            let manip = blurred.data()[c * hw + p] + shift + rng.normal() * FAKE_NOISE_STD;
            let v = (1.0 - alpha) * base.data()[c * hw + p] + alpha * manip;
            out[c * hw + p] = v.clamp(0.0, 1.0);
        }
    }
    (Tensor::new(base.shape().to_vec(), out).unwrap(), mask)
}

/// Deterministic dataset: `n_real` smooth images then `n_fake` manipulated
/// ones, sample ids 0..n_real+n_fake.
pub fn generate_dataset(
    n_real: usize,
    n_fake: usize,
    h: usize,
    w: usize,
    seed: u64,
) -> Result<Vec<ImageSample>> {
    check_size(h, w)?;
    let root = Stream::new(seed);
    let mut out = Vec::with_capacity(n_real + n_fake);
    for id in 0..(n_real + n_fake) as u64 {
        let mut rng = root.derive(id);
        let base = real_image(h, w, &mut rng);
        let (image, label) = if (id as usize) < n_real {
            (base, 0)
        } else {
            let (fake, _) = fake_from(&base, &mut rng);
            (fake, 1)
        };
        out.push(ImageSample {
            image,
            label,
            sample_id: id,
        });
    }
    Ok(out)
}

/// Apply one perturbation at its severity-mapped strength; output clipped to
/// [0, 1].
pub fn perturb(image: &Tensor<f64>, spec: PerturbationSpec, seed: u64) -> Result<Tensor<f64>> {
    if !(1..=5).contains(&spec.severity) {
        return Err(Error::arg(format!("severity {} outside 1..=5", spec.severity)));
    }
    let s = spec.severity - 1;
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut rng = Stream::new(seed);
    let out = match spec.kind {
        PerturbKind::GaussianBlur => gaussian_blur(image, BLUR_SIGMAS[s]),
        PerturbKind::GaussianNoise => {
            let sigma = NOISE_SIGMAS[s];
            let data: Vec<f64> = image
                .data()
                .iter()
                .map(|&v| v + rng.normal() * sigma)
                .collect();
            Tensor::new(image.shape().to_vec(), data)?
        }
        PerturbKind::BlockWise => {
            let mut data = image.data().to_vec();
            for _ in 0..BLOCK_COUNTS[s] {
                let bi = rng.below(h.saturating_sub(BLOCK_SIZE) + 1);
                let bj = rng.below(w.saturating_sub(BLOCK_SIZE) + 1);
                for c in 0..3 {
                    for di in 0..BLOCK_SIZE.min(h) {
                        for dj in 0..BLOCK_SIZE.min(w) {
                            data[c * h * w + (bi + di) * w + (bj + dj)] = 0.5;
                        }
                    }
                }
            }
            Tensor::new(image.shape().to_vec(), data)?
        }
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

// ── dataset persistence ──────────────────────────────────────────────

/// Everything needed to regenerate or reload a dataset directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub seed: u64,
    pub n_real: usize,
    pub n_fake: usize,
    pub height: usize,
    pub width: usize,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.n_real + self.n_fake
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::io(path.display().to_string(), e)
}

fn sample_file(dir: &Path, id: u64) -> std::path::PathBuf {
    dir.join(format!("sample_{id:06}.bin"))
}

/// Write manifest + one raw little-endian f64 file per sample.
pub fn save_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[ImageSample]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(manifest)
        .map_err(|e| Error::Format(format!("manifest encode: {e}")))?;
    std::fs::write(&mpath, json).map_err(|e| io_err(&mpath, e))?;
    for s in samples {
        let p = sample_file(dir, s.sample_id);
        std::fs::write(&p, s.image.to_le_bytes()).map_err(|e| io_err(&p, e))?;
    }
    Ok(())
}

pub fn load_manifest(dir: &Path) -> Result<DatasetManifest> {
    let mpath = dir.join("manifest.json");
    let text = std::fs::read_to_string(&mpath).map_err(|e| io_err(&mpath, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest decode: {e}")))
}

/// Load all samples of a dataset directory; labels come from the manifest's
/// real/fake split.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<ImageSample>)> {
    let manifest = load_manifest(dir)?;
    let shape = vec![3, manifest.height, manifest.width];
    let mut samples = Vec::with_capacity(manifest.len());
    for id in 0..manifest.len() as u64 {
        let p = sample_file(dir, id);
        let bytes = std::fs::read(&p).map_err(|e| io_err(&p, e))?;
        let image = Tensor::from_le_bytes(shape.clone(), &bytes)?;
        samples.push(ImageSample {
            image,
            label: usize::from(id as usize >= manifest.n_real),
            sample_id: id,
        });
    }
    Ok((manifest, samples))
}
