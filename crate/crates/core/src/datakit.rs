//! Stereo dataset manifests and a synthetic distortion generator.
//!
//! Manifest files are comma-separated with the header
//! `id,ref_id,left_path,right_path,dmos,distortion,symmetry`. Relative image
//! paths are resolved against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::derive_seed;
use crate::error::{contract, Error, Result};
use crate::imagepipe::GrayImage;

pub const MANIFEST_HEADER: &str = "id,ref_id,left_path,right_path,dmos,distortion,symmetry";
pub const MANIFEST_NAME: &str = "manifest.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Distortion {
    Jp2k,
    Jpeg,
    Wn,
    Blur,
    Ff,
    SynthBlur,
    SynthAwgn,
    SynthQuant,
    Pristine,
}

impl Distortion {
    pub const ALL: [Distortion; 9] = [
        Distortion::Jp2k,
        Distortion::Jpeg,
        Distortion::Wn,
        Distortion::Blur,
        Distortion::Ff,
        Distortion::SynthBlur,
        Distortion::SynthAwgn,
        Distortion::SynthQuant,
        Distortion::Pristine,
    ];
    /// The distortions [`apply_distortion`] can generate.
    pub const SYNTHETIC: [Distortion; 3] = [Distortion::SynthBlur, Distortion::SynthAwgn, Distortion::SynthQuant];

    pub fn tag(self) -> &'static str {
        match self {
            Distortion::Jp2k => "jp2k",
            Distortion::Jpeg => "jpeg",
            Distortion::Wn => "wn",
            Distortion::Blur => "blur",
            Distortion::Ff => "ff",
            Distortion::SynthBlur => "synth-blur",
            Distortion::SynthAwgn => "synth-awgn",
            Distortion::SynthQuant => "synth-quant",
            Distortion::Pristine => "pristine",
        }
    }
}

impl fmt::Display for Distortion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Distortion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Distortion::ALL
            .into_iter()
            .find(|d| d.tag() == s)
            .ok_or_else(|| contract(format!("unknown distortion tag {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Symmetry {
    Symmetric,
    Asymmetric,
}

impl Symmetry {
    pub fn tag(self) -> &'static str {
        match self {
            Symmetry::Symmetric => "symmetric",
            Symmetry::Asymmetric => "asymmetric",
        }
    }
}

impl fmt::Display for Symmetry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Symmetry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(Symmetry::Symmetric),
            "asymmetric" => Ok(Symmetry::Asymmetric),
            _ => Err(contract(format!("unknown symmetry tag {s:?}"))),
        }
    }
}

/// One stereo pair with its subjective score.
#[derive(Debug, Clone, PartialEq)]
pub struct StereoSample {
    pub id: String,
    pub ref_id: String,
    pub left_path: PathBuf,
    pub right_path: PathBuf,
    pub dmos: f64,
    pub distortion: Distortion,
    pub symmetry: Symmetry,
}

fn parse_line(line: &str, dir: &Path) -> std::result::Result<StereoSample, String> {
    let fields: Vec<&str> = line.split(',').map(str::trim).collect();
    if fields.len() != 7 {
        return Err(format!("expected 7 fields, found {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty id or ref_id".into());
    }
    let dmos: f64 = fields[4].parse().map_err(|_| format!("dmos {:?} is not a number", fields[4]))?;
    if !dmos.is_finite() {
        return Err(format!("dmos {dmos} is not finite"));
    }
    Ok(StereoSample {
        id: fields[0].to_string(),
        ref_id: fields[1].to_string(),
        left_path: dir.join(fields[2]),
        right_path: dir.join(fields[3]),
        dmos,
        distortion: fields[5].parse().map_err(|e: Error| e.to_string())?,
        symmetry: fields[6].parse().map_err(|e: Error| e.to_string())?,
    })
}

/// Parses and validates a manifest; every missing image is reported at once.
pub fn load_manifest(path: &Path) -> Result<Vec<StereoSample>> {
    let text = std::fs::read_to_string(path)?;
    let dir = path.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => return Err(Error::Parse { line: 1, msg: format!("header must be {MANIFEST_HEADER:?}") }),
    }
    let mut samples = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let s = parse_line(line, dir).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        if !ids.insert(s.id.clone()) {
            return Err(Error::Parse { line: i + 1, msg: format!("duplicate sample id {:?}", s.id) });
        }
        samples.push(s);
    }
    let missing: Vec<PathBuf> = samples
        .iter()
        .flat_map(|s| [&s.left_path, &s.right_path])
        .filter(|p| !p.is_file())
        .cloned()
        .collect();
    if !missing.is_empty() {
        return Err(Error::Resolution(missing));
    }
    Ok(samples)
}

/// Writes a manifest; paths under the manifest directory are stored relative.
pub fn write_manifest(path: &Path, samples: &[StereoSample]) -> Result<()> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| -> Result<String> {
        let shown = p.strip_prefix(dir).unwrap_or(p).to_string_lossy().into_owned();
        if shown.contains(',') || shown.contains('\n') {
            return Err(contract(format!("path {shown:?} cannot be stored in a manifest")));
        }
        Ok(shown)
    };
    let mut text = format!("{MANIFEST_HEADER}\n");
    for s in samples {
        if [&s.id, &s.ref_id].iter().any(|v| v.is_empty() || v.contains(',') || v.contains('\n')) {
            return Err(contract(format!("sample id {:?} / ref {:?} cannot be stored", s.id, s.ref_id)));
        }
        text.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.id,
            s.ref_id,
            rel(&s.left_path)?,
            rel(&s.right_path)?,
            s.dmos,
            s.distortion,
            s.symmetry
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Gaussian blur sigma, noise deviation and quantization levels per severity level 1–5.
pub const BLUR_SIGMA: [f64; 5] = [0.5, 1.0, 2.0, 4.0, 8.0];
pub const NOISE_STD: [f64; 5] = [0.01, 0.02, 0.05, 0.1, 0.2];
pub const QUANT_LEVELS: [u32; 5] = [64, 32, 16, 8, 4];

/// Applies a synthetic distortion; `level` 0 returns the image unchanged.
pub fn apply_distortion(image: &GrayImage, kind: Distortion, level: u8, seed: u64) -> Result<GrayImage> {
    if !Distortion::SYNTHETIC.contains(&kind) {
        return Err(contract(format!("{kind} cannot be synthesized")));
    }
    if level > 5 {
        return Err(contract(format!("distortion level {level} outside 0..=5")));
    }
    if level == 0 {
        return Ok(image.clone());
    }
    let i = usize::from(level - 1);
    let (h, w) = (image.height(), image.width());
    let pixels = match kind {
        Distortion::SynthBlur => gaussian_blur(image.pixels(), h, w, BLUR_SIGMA[i]),
        Distortion::SynthAwgn => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = Normal::new(0.0, NOISE_STD[i]).expect("positive deviation");
            image.pixels().iter().map(|&v| v + noise.sample(&mut rng)).collect()
        }
        Distortion::SynthQuant => {
            let steps = f64::from(QUANT_LEVELS[i] - 1);
            image.pixels().iter().map(|&v| (v * steps).round() / steps).collect()
        }
        _ => unreachable!("checked above"),
    };
    GrayImage::from_clamped(h, w, pixels)
}

fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian with a unit-sum kernel of radius `ceil(3σ)` and
/// symmetric boundary extension.
fn gaussian_blur(px: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|t| (-(t * t) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * px[y * w + reflect(x as isize + j as isize - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect(y as isize + j as isize - r, h) * w + x])
                .sum();
        }
    }
    out
}

/// Parameters of a synthetic stereo dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub contents: usize,
    pub distortions: Vec<Distortion>,
    /// Severity levels in increasing order, each in 1..=5.
    pub levels: Vec<u8>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Also emit pairs whose views carry different levels of the same distortion.
    pub asymmetric: bool,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            contents: 5,
            distortions: Distortion::SYNTHETIC.to_vec(),
            levels: vec![1, 2, 3, 4, 5],
            seed: 0,
            height: 256,
            width: 256,
            asymmetric: false,
        }
    }
}

impl SynthSpec {
    fn validate(&self) -> Result<()> {
        if self.contents == 0 {
            return Err(contract("synthetic dataset needs at least one content"));
        }
        if self.levels.len() < 4 {
            return Err(contract("synthetic dataset needs at least 4 distortion levels"));
        }
        if self.levels.windows(2).any(|p| p[0] >= p[1]) || self.levels.iter().any(|&l| !(1..=5).contains(&l)) {
            return Err(contract("levels must be strictly increasing within 1..=5"));
        }
        if let Some(d) = self.distortions.iter().find(|d| !Distortion::SYNTHETIC.contains(d)) {
            return Err(contract(format!("{d} cannot be synthesized")));
        }
        if self.height < 32 || self.width < 32 {
            return Err(contract("synthetic images must be at least 32x32"));
        }
        Ok(())
    }
}

/// Score of a synthetic pair: `20·level` per view, averaged over the views.
pub fn synthetic_dmos(left_level: u8, right_level: u8) -> f64 {
    10.0 * f64::from(left_level + right_level)
}

/// Procedural texture: blurred noise at two scales, a gradient and a few
/// hard-edged discs, rescaled into `[0.05, 0.95]`.
fn pristine_content(h: usize, w: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let white: Vec<f64> = (0..h * w).map(|_| rng.random::<f64>() - 0.5).collect();
    let coarse = gaussian_blur(&white, h, w, 6.0);
    let fine = gaussian_blur(&white, h, w, 1.5);
    let (gx, gy) = (rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5);
    let discs: Vec<(f64, f64, f64, f64)> = (0..6)
        .map(|_| {
            (
                rng.random::<f64>() * h as f64,
                rng.random::<f64>() * w as f64,
                (0.05 + 0.2 * rng.random::<f64>()) * h.min(w) as f64,
                rng.random::<f64>() - 0.5,
            )
        })
        .collect();
    let (sc, sf) = (rms(&coarse), rms(&fine));
    let mut img: Vec<f64> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let mut v = coarse[i] / sc + 0.5 * fine[i] / sf + 1.5 * (gx * x / w as f64 + gy * y / h as f64);
            for &(cy, cx, r, amp) in &discs {
                if (y - cy).powi(2) + (x - cx).powi(2) < r * r {
                    v += 2.0 * amp;
                }
            }
            v
        })
        .collect();
    let (lo, hi) = img.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    for v in &mut img {
        *v = 0.05 + 0.9 * (*v - lo) / (hi - lo);
    }
    img
}

fn rms(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt().max(1e-12)
}

/// Right view: the left view moved `disparity` pixels horizontally,
/// mirrored at the border.
fn shifted(px: &[f64], h: usize, w: usize, disparity: usize) -> Vec<f64> {
    (0..h * w).map(|i| px[(i / w) * w + reflect((i % w) as isize - disparity as isize, w)]).collect()
}

/// Quantizes to 8 bits, matching what a PNG round trip stores.
fn to_8bit(img: &GrayImage) -> GrayImage {
    let px = img.pixels().iter().map(|&v| (v * 255.0).round() / 255.0).collect();
    GrayImage::new(img.height(), img.width(), px).expect("rounding stays in range")
}

/// Generates images and `manifest.csv` under `out_dir`.
///
/// Every content yields one pristine pair (score 0) and, per distortion and
/// level, a symmetric pair scored `20·level`. With `asymmetric`, each level
/// `l` is also paired with level `l+2` (or `l−2` near the top) on the right
/// view, scored by the mean of the two views' scores.
pub fn synth_dataset(spec: &SynthSpec, out_dir: &Path, overwrite: bool) -> Result<PathBuf> {
    spec.validate()?;
    let manifest = out_dir.join(MANIFEST_NAME);
    let images = out_dir.join("images");
    if !overwrite {
        if let Some(p) = [&manifest, &images].into_iter().find(|p| p.exists()) {
            return Err(Error::OutputExists(p.clone()));
        }
    }
    std::fs::create_dir_all(&images)?;
    let (h, w) = (spec.height, spec.width);
    let mut samples = Vec::new();
    for c in 0..spec.contents {
        let ref_id = format!("c{c:03}");
        let content_seed = derive_seed(spec.seed, &[1, c as u64]);
        let disparity = 1 + (derive_seed(content_seed, &[2]) % 4) as usize;
        let left_px = pristine_content(h, w, content_seed);
        let right_px = shifted(&left_px, h, w, disparity);
        let left = to_8bit(&GrayImage::new(h, w, left_px)?);
        let right = to_8bit(&GrayImage::new(h, w, right_px)?);

        let mut emit = |id: String, l: &GrayImage, r: &GrayImage, dmos: f64, d: Distortion, s: Symmetry| -> Result<()> {
            let (lp, rp) = (images.join(format!("{id}_L.png")), images.join(format!("{id}_R.png")));
            l.save_png(&lp)?;
            r.save_png(&rp)?;
            samples.push(StereoSample {
                id,
                ref_id: ref_id.clone(),
                left_path: lp,
                right_path: rp,
                dmos,
                distortion: d,
                symmetry: s,
            });
            Ok(())
        };
        emit(format!("{ref_id}_pristine"), &left, &right, 0.0, Distortion::Pristine, Symmetry::Symmetric)?;

        for (t, &kind) in spec.distortions.iter().enumerate() {
            let distort = |img: &GrayImage, level: u8, view: u64| {
                apply_distortion(img, kind, level, derive_seed(content_seed, &[3, t as u64, u64::from(level), view]))
            };
            for &level in &spec.levels {
                let (l, r) = (distort(&left, level, 0)?, distort(&right, level, 1)?);
                emit(
                    format!("{ref_id}_{}_l{level}", kind.tag()),
                    &l,
                    &r,
                    synthetic_dmos(level, level),
                    kind,
                    Symmetry::Symmetric,
                )?;
                if spec.asymmetric {
                    let partner = if level + 2 <= 5 { level + 2 } else { level - 2 };
                    let r = distort(&right, partner, 1)?;
                    emit(
                        format!("{ref_id}_{}_l{level}r{partner}", kind.tag()),
                        &l,
                        &r,
                        synthetic_dmos(level, partner),
                        kind,
                        Symmetry::Asymmetric,
                    )?;
                }
            }
        }
    }
    write_manifest(&manifest, &samples)?;
    Ok(manifest)
}
