//! Naturalness labels: Gaussian-copula fits to DT-CWT magnitudes of both views.
//!
//! Each stereo pair yields four copula fits of dimension 6, one per
//! (scale, orientation group). Group A holds orientations 1–3 (15°, 45°,
//! 75°), group B orientations 4–6 (105°, 135°, 165°). The six dimensions
//! interleave the views: `[L(o1), R(o1), L(o2), R(o2), L(o3), R(o3)]`.
//!
//! Layout of the 108 values (blocks of 27):
//!
//! | offset | block            |
//! |--------|------------------|
//! | 0      | scale 1, group A |
//! | 27     | scale 1, group B |
//! | 54     | scale 2, group A |
//! | 81     | scale 2, group B |
//!
//! Inside a block, entries `0..12` are `a₁, b₁, a₂, b₂, …, a₆, b₆` (Gamma
//! scale and shape per dimension) and entries `12..27` are the correlations
//! `Σ₀₁, Σ₀₂, …, Σ₀₅, Σ₁₂, …, Σ₄₅` (upper triangle, row-major). See
//! [`feature_slot`] for the same mapping in code.

mod copula;
mod special;

use std::fmt::Write as _;
use std::path::Path;

pub use copula::{copula_log_density, fit_gaussian_copula, CopulaModel, CDF_CLAMP, MIN_COPULA_SAMPLES};
pub use special::{fit_gamma_mle, gamma_cdf, normal_quantile, GammaMargin, MIN_GAMMA_SAMPLES};

use crate::dtcwt::{forward, pad_symmetric, subband_magnitudes, DtcwtPyramid, Plane};
use crate::error::{contract, Error, Result};
use crate::imagepipe::GrayImage;

/// Length of a feature vector.
pub const FEATURE_DIM: usize = 108;
/// Wavelet scales used for the labels.
pub const NSS_SCALES: usize = 2;
/// Dimension of each copula fit.
pub const GROUP_DIM: usize = 6;
const BLOCK_LEN: usize = 2 * GROUP_DIM + GROUP_DIM * (GROUP_DIM - 1) / 2;
/// Magnitudes below this floor are raised to it before fitting.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;
const MIN_STD: f64 = 1e-8;
const STANDARDIZER_TAG: &str = "stereoqa-standardizer v1";

/// Orientation group of a copula fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    A,
    B,
}

impl Group {
    /// 1-based orientations in the group.
    pub fn orientations(self) -> [usize; 3] {
        match self {
            Group::A => [1, 2, 3],
            Group::B => [4, 5, 6],
        }
    }
}

/// Which parameter a feature slot holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureParam {
    /// Gamma scale `a` of a dimension.
    Scale { dim: usize },
    /// Gamma shape `b` of a dimension.
    Shape { dim: usize },
    /// Copula correlation `Σ[row][col]`, `row < col`.
    Correlation { row: usize, col: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureSlot {
    pub scale: usize,
    pub group: Group,
    pub param: FeatureParam,
}

/// Meaning of feature `index`, or `None` past the end.
pub fn feature_slot(index: usize) -> Option<FeatureSlot> {
    if index >= FEATURE_DIM {
        return None;
    }
    let (block, k) = (index / BLOCK_LEN, index % BLOCK_LEN);
    let scale = block / 2 + 1;
    let group = if block % 2 == 0 { Group::A } else { Group::B };
    let param = if k < 2 * GROUP_DIM {
        if k % 2 == 0 {
            FeatureParam::Scale { dim: k / 2 }
        } else {
            FeatureParam::Shape { dim: k / 2 }
        }
    } else {
        let (row, col) = upper_pairs().nth(k - 2 * GROUP_DIM).expect("15 pairs");
        FeatureParam::Correlation { row, col }
    };
    Some(FeatureSlot { scale, group, param })
}

fn upper_pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..GROUP_DIM).flat_map(|i| (i + 1..GROUP_DIM).map(move |j| (i, j)))
}

/// The 108 copula/Gamma parameters of one stereo pair.
#[derive(Debug, Clone, PartialEq)]
pub struct NssFeatureVector(Vec<f64>);

impl NssFeatureVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != FEATURE_DIM {
            return Err(contract(format!("feature vector has {} values, expected {FEATURE_DIM}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(crate::error::numeric(format!("feature {i} is not finite")));
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

fn push_block(out: &mut Vec<f64>, model: &CopulaModel) {
    for m in model.margins() {
        out.extend([m.a, m.b]);
    }
    out.extend(upper_pairs().map(|(i, j)| model.corr()[(i, j)]));
}

fn floored_magnitudes(p: &DtcwtPyramid, scale: usize, orientation: usize) -> Result<Vec<f64>> {
    let mut m = subband_magnitudes(p, scale, orientation)?.data;
    for v in &mut m {
        *v = v.max(MAGNITUDE_FLOOR);
    }
    Ok(m)
}

/// Smallest square side accepted by [`extract_nss_features`].
pub fn min_view_side() -> usize {
    let coarse = 1usize << NSS_SCALES;
    // the coarsest subband must hold enough samples for a copula fit
    let cells = (MIN_COPULA_SAMPLES as f64).sqrt().ceil() as usize;
    cells * coarse
}

/// Four copula fits over co-located DT-CWT magnitudes of both views.
///
/// Views are symmetrically padded to a multiple of 4 and every coefficient
/// is used, so the result is deterministic.
pub fn extract_nss_features(left: &GrayImage, right: &GrayImage) -> Result<NssFeatureVector> {
    if (left.height(), left.width()) != (right.height(), right.width()) {
        return Err(contract(format!(
            "views differ in size: {}x{} vs {}x{}",
            left.height(),
            left.width(),
            right.height(),
            right.width()
        )));
    }
    let multiple = 1 << NSS_SCALES;
    let (pl, pr) = (pad_symmetric(&Plane::from(left), multiple), pad_symmetric(&Plane::from(right), multiple));
    let coarse = (pl.rows / multiple) * (pl.cols / multiple);
    if coarse < MIN_COPULA_SAMPLES {
        return Err(contract(format!(
            "views of {}x{} are too small: scale {NSS_SCALES} holds {coarse} coefficients, \
             at least {MIN_COPULA_SAMPLES} are needed",
            left.height(),
            left.width()
        )));
    }
    let (lp, rp) = (forward(&pl, NSS_SCALES)?, forward(&pr, NSS_SCALES)?);
    let mut out = Vec::with_capacity(FEATURE_DIM);
    for scale in 1..=NSS_SCALES {
        for group in [Group::A, Group::B] {
            let mut cols = Vec::with_capacity(GROUP_DIM);
            for o in group.orientations() {
                cols.push(floored_magnitudes(&lp, scale, o)?);
                cols.push(floored_magnitudes(&rp, scale, o)?);
            }
            let model = fit_gaussian_copula(&cols).map_err(|e| match e {
                Error::Degenerate(msg) => Error::Degenerate(format!("scale {scale}, group {group:?}: {msg}")),
                other => other,
            })?;
            push_block(&mut out, &model);
        }
    }
    NssFeatureVector::new(out)
}

/// Per-dimension mean and standard deviation of training-split features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStandardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl FeatureStandardizer {
    /// Population statistics; standard deviations are floored at `1e-8`.
    pub fn fit(features: &[NssFeatureVector]) -> Result<Self> {
        if features.is_empty() {
            return Err(contract("standardizer needs at least one feature vector"));
        }
        let n = features.len() as f64;
        let mut mean = vec![0.0; FEATURE_DIM];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f.values()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; FEATURE_DIM];
        for f in features {
            for ((s, v), m) in var.iter_mut().zip(f.values()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(MIN_STD)).collect();
        Ok(Self { mean, std })
    }

    /// Zero mean, unit deviation: standardization is the identity.
    pub fn identity() -> Self {
        Self { mean: vec![0.0; FEATURE_DIM], std: vec![1.0; FEATURE_DIM] }
    }

    pub fn from_parts(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        if mean.len() != FEATURE_DIM || std.len() != FEATURE_DIM {
            return Err(contract("standardizer needs 108 means and 108 deviations"));
        }
        if mean.iter().any(|v| !v.is_finite()) || std.iter().any(|v| !(v.is_finite() && *v >= MIN_STD)) {
            return Err(contract("standardizer statistics must be finite with deviations >= 1e-8"));
        }
        Ok(Self { mean, std })
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    /// Versioned two-row text table (`mean,…` then `std,…`).
    pub fn to_text(&self) -> String {
        let row = |name: &str, v: &[f64]| {
            let mut s = name.to_string();
            for x in v {
                write!(s, ",{x}").expect("writing to a String");
            }
            s
        };
        format!("{STANDARDIZER_TAG}\n{}\n{}\n", row("mean", &self.mean), row("std", &self.std))
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some(l) if l.trim() == STANDARDIZER_TAG => {}
            other => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected '{STANDARDIZER_TAG}', found {:?}", other.unwrap_or("")),
                })
            }
        }
        let mut row = |line: usize, name: &str| -> Result<Vec<f64>> {
            let l = lines.next().ok_or_else(|| Error::Parse { line, msg: format!("missing '{name}' row") })?;
            let mut parts = l.trim().split(',');
            if parts.next() != Some(name) {
                return Err(Error::Parse { line, msg: format!("expected row '{name}'") });
            }
            parse_values(parts, line)
        };
        let mean = row(2, "mean")?;
        let std = row(3, "std")?;
        Self::from_parts(mean, std)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

fn parse_values<'a>(parts: impl Iterator<Item = &'a str>, line: usize) -> Result<Vec<f64>> {
    let values = parts
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|e| Error::Parse { line, msg: format!("bad number {p:?}: {e}") })
        })
        .collect::<Result<Vec<_>>>()?;
    if values.len() != FEATURE_DIM {
        return Err(Error::Parse { line, msg: format!("{} values, expected {FEATURE_DIM}", values.len()) });
    }
    Ok(values)
}

/// `(x − mean) / std` per dimension.
pub fn standardize(features: &NssFeatureVector, stats: &FeatureStandardizer) -> NssFeatureVector {
    NssFeatureVector(features.0.iter().zip(&stats.mean).zip(&stats.std).map(|((x, m), s)| (x - m) / s).collect())
}

/// Inverse of [`standardize`].
pub fn destandardize(features: &NssFeatureVector, stats: &FeatureStandardizer) -> NssFeatureVector {
    NssFeatureVector(features.0.iter().zip(&stats.mean).zip(&stats.std).map(|((x, m), s)| x * s + m).collect())
}

/// Writes `id,v1,…,v108` lines.
pub fn write_feature_file(path: &Path, records: &[(String, NssFeatureVector)]) -> Result<()> {
    let mut text = String::new();
    for (id, f) in records {
        if id.contains(',') || id.contains('\n') || id.is_empty() {
            return Err(contract(format!("sample id {id:?} cannot be written to a feature file")));
        }
        text.push_str(id);
        for v in f.values() {
            write!(text, ",{v}").expect("writing to a String");
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Parses a file written by [`write_feature_file`]; blank lines are skipped.
pub fn read_feature_file(path: &Path) -> Result<Vec<(String, NssFeatureVector)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let id = parts.next().unwrap_or_default().trim().to_string();
        if id.is_empty() {
            return Err(Error::Parse { line: i + 1, msg: "empty sample id".into() });
        }
        let values = parse_values(parts, i + 1)?;
        let f = NssFeatureVector::new(values).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        out.push((id, f));
    }
    Ok(out)
}
