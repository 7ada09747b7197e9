//! Synthetic multi-modal "videos" with a planted per-cell informativeness mask,
//! and the binary dataset format.
//!
//! For modality `k`, the class means are
//! `μ_{c,k} = offset · b̂_k + (m / √2) · e_{c,k}` where `b̂_k` and the `e_{c,k}`
//! are orthonormal. Class means are therefore exactly `m` apart, and every
//! informative cell sits `offset` away from the origin along `b̂_k`, while
//! uninformative cells are pure noise around the origin. The policy view is a
//! fixed orthonormal projection whose first row is `b̂_k`, so presence of
//! signal is cheap to detect even when the class is hard to tell.
//!
//! File layout (integers `u32` little-endian, values `f64` little-endian):
//!
//! ```text
//! "AMMLDS1" version=1 n_videos T K n_classes
//! per modality: recog_dim policy_dim
//! per video: label, mask[T][K] (one byte each, 0/1),
//!            recog views [T][K][recog_dim_k], policy views [T][K][policy_dim_k]
//! ```

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::params::ByteReader;
use crate::policy::ModalitySpec;
use crate::rng::{rng_from, Rng as SeededRng};

pub const DATASET_MAGIC: &[u8; 7] = b"AMMLDS1";
pub const DATASET_VERSION: u32 = 1;

/// One temporal chunk: K recognition views and K policy views.
#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub recog: Vec<Vec<f64>>,
    pub policy: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoExample {
    pub segments: Vec<Segment>,
    pub label: usize,
    /// `mask[t][k]` is true where the cell carries class signal; generated data only.
    pub mask: Option<Vec<Vec<bool>>>,
}

/// Recognition and policy widths of one modality.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewDims {
    pub recog: usize,
    pub policy: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub n_classes: usize,
    pub dims: Vec<ViewDims>,
    pub videos: Vec<VideoExample>,
}

impl Dataset {
    pub fn segments(&self) -> usize {
        self.videos.first().map_or(0, |v| v.segments.len())
    }

    pub fn modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn has_masks(&self) -> bool {
        !self.videos.is_empty() && self.videos.iter().all(|v| v.mask.is_some())
    }

    /// Fraction of informative cells.
    pub fn mask_density(&self) -> Option<f64> {
        if !self.has_masks() {
            return None;
        }
        let (mut on, mut all) = (0usize, 0usize);
        for v in &self.videos {
            for row in v.mask.as_ref().expect("checked") {
                on += row.iter().filter(|&&b| b).count();
                all += row.len();
            }
        }
        Some(on as f64 / all as f64)
    }

    /// Splits into the first `n` videos and the rest.
    pub fn split_at(&self, n: usize) -> (Dataset, Dataset) {
        let n = n.min(self.videos.len());
        let part = |videos: &[VideoExample]| Dataset {
            n_classes: self.n_classes,
            dims: self.dims.clone(),
            videos: videos.to_vec(),
        };
        (part(&self.videos[..n]), part(&self.videos[n..]))
    }

    /// Checks that every video agrees with the header.
    pub fn validate(&self) -> Result<()> {
        let t = self.segments();
        for (i, v) in self.videos.iter().enumerate() {
            if v.segments.len() != t || t == 0 {
                return Err(Error::Input(format!(
                    "video {i} has {} segments, expected {t}",
                    v.segments.len()
                )));
            }
            if v.label >= self.n_classes {
                return Err(Error::Input(format!(
                    "video {i} has label {} >= {}",
                    v.label, self.n_classes
                )));
            }
            for s in &v.segments {
                if s.recog.len() != self.dims.len() || s.policy.len() != self.dims.len() {
                    return Err(Error::Input(format!("video {i}: wrong number of modalities")));
                }
                for (k, d) in self.dims.iter().enumerate() {
                    if s.recog[k].len() != d.recog || s.policy[k].len() != d.policy {
                        return Err(Error::Input(format!("video {i}: modality {k} width mismatch")));
                    }
                }
            }
            if let Some(mask) = &v.mask {
                if mask.len() != t || mask.iter().any(|r| r.len() != self.dims.len()) {
                    return Err(Error::Input(format!("video {i}: mask shape mismatch")));
                }
            }
        }
        Ok(())
    }

    /// Exact byte size of the encoded file.
    pub fn encoded_len(&self) -> usize {
        let t = self.segments();
        let k = self.modalities();
        let widths: usize = self.dims.iter().map(|d| d.recog + d.policy).sum();
        DATASET_MAGIC.len() + 5 * 4 + 8 * k + self.videos.len() * (4 + t * k + 8 * t * widths)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let (t, k) = (self.segments(), self.modalities());
        let mut out = Vec::with_capacity(self.encoded_len());
        out.extend_from_slice(DATASET_MAGIC);
        for v in [
            DATASET_VERSION,
            self.videos.len() as u32,
            t as u32,
            k as u32,
            self.n_classes as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for d in &self.dims {
            out.extend_from_slice(&(d.recog as u32).to_le_bytes());
            out.extend_from_slice(&(d.policy as u32).to_le_bytes());
        }
        for v in &self.videos {
            out.extend_from_slice(&(v.label as u32).to_le_bytes());
            for ti in 0..t {
                for ki in 0..k {
                    let bit = v.mask.as_ref().is_some_and(|m| m[ti][ki]);
                    out.push(bit as u8);
                }
            }
            for s in &v.segments {
                for view in &s.recog {
                    view.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
            for s in &v.segments {
                for view in &s.policy {
                    view.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Dataset> {
        let mut r = ByteReader::new(bytes);
        if r.take(DATASET_MAGIC.len(), "magic")? != DATASET_MAGIC {
            return Err(Error::Format {
                offset: 0,
                reason: "bad dataset magic".into(),
            });
        }
        let version_at = r.offset();
        let version = r.u32("version")?;
        if version != DATASET_VERSION {
            return Err(Error::Format {
                offset: version_at,
                reason: format!("unsupported dataset version {version}"),
            });
        }
        let n_videos = r.u32("n_videos")? as usize;
        let t_at = r.offset();
        let t = r.u32("T")? as usize;
        let k_at = r.offset();
        let k = r.u32("K")? as usize;
        let c_at = r.offset();
        let n_classes = r.u32("n_classes")? as usize;
        for (v, at, what) in [(t, t_at, "T"), (k, k_at, "K"), (n_classes, c_at, "n_classes")] {
            if v == 0 {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("{what} must be positive"),
                });
            }
        }
        let mut dims = Vec::with_capacity(k);
        for _ in 0..k {
            let at = r.offset();
            let recog = r.u32("recog_dim")? as usize;
            let policy = r.u32("policy_dim")? as usize;
            if recog == 0 || policy == 0 {
                return Err(Error::Format {
                    offset: at,
                    reason: "view widths must be positive".into(),
                });
            }
            dims.push(ViewDims { recog, policy });
        }
        let mut videos = Vec::with_capacity(n_videos.min(1 << 20));
        for _ in 0..n_videos {
            let label_at = r.offset();
            let label = r.u32("label")? as usize;
            if label >= n_classes {
                return Err(Error::Format {
                    offset: label_at,
                    reason: format!("label {label} out of range"),
                });
            }
            let mut mask = vec![vec![false; k]; t];
            for row in mask.iter_mut() {
                for cell in row.iter_mut() {
                    let at = r.offset();
                    *cell = match r.u8("mask")? {
                        0 => false,
                        1 => true,
                        b => {
                            return Err(Error::Format {
                                offset: at,
                                reason: format!("mask byte {b} is not 0 or 1"),
                            })
                        }
                    };
                }
            }
            let mut segments: Vec<Segment> = (0..t)
                .map(|_| Segment {
                    recog: Vec::with_capacity(k),
                    policy: Vec::with_capacity(k),
                })
                .collect();
            for s in segments.iter_mut() {
                for d in &dims {
                    s.recog.push(r.f64s(d.recog, "recognition view")?);
                }
            }
            for s in segments.iter_mut() {
                for d in &dims {
                    s.policy.push(r.f64s(d.policy, "policy view")?);
                }
            }
            videos.push(VideoExample {
                segments,
                label,
                mask: Some(mask),
            });
        }
        if !r.at_end() {
            return Err(Error::Format {
                offset: r.offset(),
                reason: "trailing bytes after last video".into(),
            });
        }
        Ok(Dataset {
            n_classes,
            dims,
            videos,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::from_bytes(&std::fs::read(path)?)
    }
}

/// Parameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GenSpec {
    pub n_classes: usize,
    pub n_videos: usize,
    pub segments: usize,
    pub modalities: Vec<ModalitySpec>,
    /// Probability that a (segment, modality) cell carries class signal.
    pub informative_prob: Vec<f64>,
    /// Pairwise distance between class means.
    pub signal_margin: f64,
    pub noise_sigma: f64,
    /// Extra noise on policy views.
    pub proxy_corruption: f64,
    /// Distance of the class-mean cluster from the origin along the presence direction.
    pub presence_offset: f64,
    pub seed: u64,
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_classes < 2 || self.n_videos == 0 || self.segments == 0 {
            return bad("need n_classes >= 2, n_videos >= 1 and segments >= 1".into());
        }
        if self.modalities.is_empty() || self.informative_prob.len() != self.modalities.len() {
            return bad("need one informative_prob per modality".into());
        }
        if self.informative_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return bad("informative probabilities must lie in [0, 1]".into());
        }
        if self.informative_prob.iter().all(|&p| p == 0.0) {
            return bad("at least one modality must be informative with positive probability".into());
        }
        if !(self.signal_margin > 0.0) || !(self.noise_sigma >= 0.0) || !(self.proxy_corruption >= 0.0) {
            return bad("need signal_margin > 0 and non-negative noise levels".into());
        }
        if !(self.presence_offset >= 0.0) {
            return bad("presence_offset must be non-negative".into());
        }
        for m in &self.modalities {
            m.validate()?;
            if m.recog_dim < self.n_classes + 1 {
                return bad(format!(
                    "modality {}: recog_dim {} cannot hold {} orthogonal class means plus a presence axis",
                    m.name, m.recog_dim, self.n_classes
                ));
            }
        }
        Ok(())
    }
}

/// Geometry shared by all videos for one modality.
#[derive(Clone, Debug)]
pub struct ModalityGeometry {
    /// `means[c]`, width `recog_dim`.
    pub means: Vec<Vec<f64>>,
    /// `policy_dim` orthonormal rows of width `recog_dim`; row 0 is the presence axis.
    pub projection: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gram-Schmidt: `count` orthonormal vectors of width `dim` that are also orthogonal to `fixed`.
fn orthonormal(rng: &mut SeededRng, dim: usize, count: usize, fixed: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = fixed.to_vec();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
        }
        let norm = dot(&v, &v).sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v.clone());
        out.push(v);
    }
    out
}

/// Class means and the policy projection for modality `k`.
pub fn modality_geometry(spec: &GenSpec, k: usize) -> ModalityGeometry {
    let m = &spec.modalities[k];
    let mut rng = rng_from(spec.seed, &[0, k as u64]);
    let axes = orthonormal(&mut rng, m.recog_dim, spec.n_classes + 1, &[]);
    let presence = &axes[0];
    let spread = spec.signal_margin / std::f64::consts::SQRT_2;
    let means = (0..spec.n_classes)
        .map(|c| {
            presence
                .iter()
                .zip(&axes[c + 1])
                .map(|(p, e)| spec.presence_offset * p + spread * e)
                .collect()
        })
        .collect();
    let mut projection = vec![presence.clone()];
    projection.extend(orthonormal(
        &mut rng,
        m.recog_dim,
        m.policy_dim - 1,
        std::slice::from_ref(presence),
    ));
    ModalityGeometry { means, projection }
}

fn project(rows: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    rows.iter().map(|r| dot(r, x)).collect()
}

/// Draws the dataset described by `spec`; identical specs give identical data.
pub fn generate(spec: &GenSpec) -> Result<Dataset> {
    spec.validate()?;
    let k_count = spec.modalities.len();
    let geometry: Vec<ModalityGeometry> = (0..k_count).map(|k| modality_geometry(spec, k)).collect();
    let videos = (0..spec.n_videos)
        .map(|v| {
            let mut rng = rng_from(spec.seed, &[1, v as u64]);
            let label = rng.random_range(0..spec.n_classes);
            let mask = loop {
                let mask: Vec<Vec<bool>> = (0..spec.segments)
                    .map(|_| spec.informative_prob.iter().map(|&p| rng.random::<f64>() < p).collect())
                    .collect();
                if mask.iter().flatten().any(|&b| b) {
                    break mask;
                }
            };
            let segments = mask
                .iter()
                .map(|row| {
                    let mut seg = Segment {
                        recog: Vec::with_capacity(k_count),
                        policy: Vec::with_capacity(k_count),
                    };
                    for (k, m) in spec.modalities.iter().enumerate() {
                        let geo = &geometry[k];
                        let signal: Vec<f64> = if row[k] {
                            geo.means[label].clone()
                        } else {
                            vec![0.0; m.recog_dim]
                        };
                        let recog: Vec<f64> = signal
                            .iter()
                            .zip(gaussian(&mut rng, m.recog_dim))
                            .map(|(s, n)| s + spec.noise_sigma * n)
                            .collect();
                        let source: Vec<f64> = if m.proxy {
                            signal
                                .iter()
                                .zip(gaussian(&mut rng, m.recog_dim))
                                .map(|(s, n)| s + spec.noise_sigma * n)
                                .collect()
                        } else {
                            recog.clone()
                        };
                        let policy = project(&geo.projection, &source)
                            .into_iter()
                            .zip(gaussian(&mut rng, m.policy_dim))
                            .map(|(x, n)| x + spec.proxy_corruption * n)
                            .collect();
                        seg.recog.push(recog);
                        seg.policy.push(policy);
                    }
                    seg
                })
                .collect();
            VideoExample {
                segments,
                label,
                mask: Some(mask),
            }
        })
        .collect();
    Ok(Dataset {
        n_classes: spec.n_classes,
        dims: spec
            .modalities
            .iter()
            .map(|m| ViewDims {
                recog: m.recog_dim,
                policy: m.policy_dim,
            })
            .collect(),
        videos,
    })
}
