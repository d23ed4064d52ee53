//! Unit-sphere cluster benchmarks standing in for real image/text embeddings.
//!
//! Class means start as an orthonormal frame. Forget class `i` is paired
//! with retain class `n_forget + i`, and the pair's means are blended so
//! their cosine equals `overlap`. Each class text embedding is its mean
//! rotated by `text_noise` radians towards a random orthogonal direction.
//! Image features are the mean plus isotropic Gaussian noise with
//! per-coordinate standard deviation `concentration`, renormalized.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::classify::{accuracy, classify_with};
use crate::eval::forget_count;
use crate::par::Exec;
use crate::store::{self, ClassEntry, ClassManifest, EmbeddingMatrix, LabeledDataset, Partition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub n_classes: usize,
    pub images_per_class: usize,
    pub concentration: f64,
    pub text_noise: f64,
    pub overlap: f64,
    /// The first `ceil(forget_fraction * n_classes)` classes are forgotten.
    pub forget_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            dim: 64,
            n_classes: 20,
            images_per_class: 100,
            concentration: 0.15,
            text_noise: 0.05,
            overlap: 0.0,
            forget_fraction: 0.4,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn n_forget(&self) -> usize {
        forget_count(self.forget_fraction, self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidParameter(msg));
        if self.dim == 0 || self.n_classes == 0 || self.images_per_class == 0 {
            return bad("dim, n_classes and images_per_class must be positive".into());
        }
        for (name, v) in [
            ("concentration", self.concentration),
            ("text_noise", self.text_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) {
            return bad(format!("overlap must lie in [0, 1], got {}", self.overlap));
        }
        if !(self.forget_fraction > 0.0 && self.forget_fraction < 1.0) {
            return bad(format!(
                "forget_fraction must lie in (0, 1), got {}",
                self.forget_fraction
            ));
        }
        if self.n_classes > self.dim {
            return Err(Error::Infeasible(format!(
                "{} class means need {} orthogonal directions but dim is {}",
                self.n_classes, self.n_classes, self.dim
            )));
        }
        let n_forget = self.n_forget();
        if n_forget == 0 || n_forget >= self.n_classes {
            return Err(Error::Infeasible(format!(
                "forget fraction {} of {} classes leaves one side empty",
                self.forget_fraction, self.n_classes
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: LabeledDataset,
    pub manifest: ClassManifest,
    pub texts: EmbeddingMatrix,
}

pub const TEXTS_FILE: &str = "texts.emb";
pub const FEATURES_FILE: &str = "features.emb";
pub const LABELS_FILE: &str = "labels.txt";

impl SyntheticData {
    /// Writes `texts.emb` (+ manifest sidecar), `features.emb` and
    /// `labels.txt` into `dir`, returning the three primary paths.
    pub fn save(&self, dir: &Path) -> Result<[PathBuf; 3]> {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        let texts = dir.join(TEXTS_FILE);
        let features = dir.join(FEATURES_FILE);
        let labels = dir.join(LABELS_FILE);
        store::save_embeddings(&texts, &self.texts, &self.manifest)?;
        store::save_matrix(&features, self.dataset.features())?;
        store::save_labels(&labels, self.dataset.labels())?;
        Ok([texts, features, labels])
    }
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| StandardNormal.sample(rng))
}

fn class_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn class_means(spec: &SyntheticSpec) -> DMatrix<f64> {
    let (d, k) = (spec.dim, spec.n_classes);
    let mut rng = class_rng(spec.seed, 0);
    let raw = DMatrix::from_fn(d, k, |_, _| StandardNormal.sample(&mut rng));
    let frame = raw.qr().q();
    let mut means = frame.clone();
    let n_forget = spec.n_forget();
    let blend = (1.0 - spec.overlap * spec.overlap).sqrt();
    for i in 0..n_forget.min(k - n_forget) {
        let j = n_forget + i;
        let mixed = frame.column(i) * spec.overlap + frame.column(j) * blend;
        means.set_column(j, &mixed);
    }
    means
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    generate_with(spec, Exec::default())
}

/// Deterministic in `spec.seed`: each class draws from its own stream, so
/// the output does not depend on the execution policy.
pub fn generate_with(spec: &SyntheticSpec, exec: Exec) -> Result<SyntheticData> {
    spec.validate()?;
    let (d, k, per) = (spec.dim, spec.n_classes, spec.images_per_class);
    let means = class_means(spec);
    let (cos_t, sin_t) = (spec.text_noise.cos(), spec.text_noise.sin());

    let per_class = exec.map(k, |c| {
        let mut rng = class_rng(spec.seed, c as u64 + 1);
        let mean = means.column(c).into_owned();
        let text = if spec.text_noise == 0.0 {
            mean.clone()
        } else {
            // Random unit direction orthogonal to the mean.
            let g = gaussian(&mut rng, d);
            let ortho = &g - &mean * mean.dot(&g);
            let u = ortho.normalize();
            (&mean * cos_t + u * sin_t).normalize()
        };
        let images: Vec<DVector<f64>> = (0..per)
            .map(|_| (&mean + gaussian(&mut rng, d) * spec.concentration).normalize())
            .collect();
        (text, images)
    });

    let mut texts = DMatrix::zeros(d, k);
    let mut features = DMatrix::zeros(d, k * per);
    let mut labels = Vec::with_capacity(k * per);
    for (c, (text, images)) in per_class.into_iter().enumerate() {
        texts.set_column(c, &text);
        for (i, x) in images.iter().enumerate() {
            features.set_column(c * per + i, x);
            labels.push(c);
        }
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(Error::Infeasible("generated a zero-norm feature".into()));
    }

    let n_forget = spec.n_forget();
    let manifest = ClassManifest::new(
        (0..k)
            .map(|c| ClassEntry {
                name: format!("class_{c:03}"),
                partition: if c < n_forget {
                    Partition::Forget
                } else {
                    Partition::Retain
                },
            })
            .collect(),
    )?;
    Ok(SyntheticData {
        dataset: LabeledDataset::new(EmbeddingMatrix::unit(features)?, labels, k)?,
        manifest,
        texts: EmbeddingMatrix::unit(texts)?,
    })
}

/// Reference ceiling for after-forgetting retain accuracy under a transform
/// that annihilates `span(T_f)`: the before-forgetting retain accuracy with
/// the forget classes removed from the candidate list.
///
/// When retain texts are orthogonal to the forget span, the nullspace
/// projector rescales retain scores uniformly and zeroes forget scores, so
/// it cannot beat this number. Only defined for `overlap = 0`.
pub fn oracle_retention_bound(spec: &SyntheticSpec, manifest: &ClassManifest) -> Result<f64> {
    if spec.overlap > 0.0 {
        return Err(Error::Unsupported(format!(
            "retention bound is only analytic for overlap = 0, got {}",
            spec.overlap
        )));
    }
    let data = generate(spec)?;
    if manifest.len() != spec.n_classes {
        return Err(Error::ManifestMismatch {
            header: spec.n_classes,
            manifest: manifest.len(),
        });
    }
    let retain = manifest.retain_indices();
    let scores = classify_with(
        data.dataset.features(),
        &data.texts.select_columns(&retain),
        None,
        Exec::default(),
    )?;
    // Map candidate positions back to manifest indices.
    let predictions: Vec<usize> = scores.predictions.iter().map(|&p| retain[p]).collect();
    accuracy(&predictions, data.dataset.labels(), Some(&retain))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classify::classify;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            dim: 16,
            n_classes: 6,
            images_per_class: 10,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn noiseless_is_perfectly_separable() {
        let spec = SyntheticSpec {
            concentration: 0.0,
            text_noise: 0.0,
            ..small()
        };
        let data = generate(&spec).unwrap();
        let s = classify(data.dataset.features(), &data.texts).unwrap();
        assert_eq!(accuracy(&s.predictions, data.dataset.labels(), None).unwrap(), 100.0);
        assert_eq!(oracle_retention_bound(&spec, &data.manifest).unwrap(), 100.0);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate_with(&small(), Exec::Sequential).unwrap();
        let b = generate_with(&small(), Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let c = generate(&SyntheticSpec { seed: 1, ..small() }).unwrap();
        assert_ne!(a.texts, c.texts);
    }

    #[test]
    fn vectors_are_unit_norm() {
        let data = generate(&SyntheticSpec { overlap: 0.7, ..small() }).unwrap();
        for m in [data.dataset.features(), &data.texts] {
            for c in m.values().column_iter() {
                assert!((c.norm() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn overlap_sets_pair_cosine() {
        let spec = SyntheticSpec { overlap: 0.6, text_noise: 0.0, ..small() };
        let data = generate(&spec).unwrap();
        let n_f = spec.n_forget();
        assert_eq!(n_f, 3);
        let t = data.texts.values();
        assert!((t.column(0).dot(&t.column(n_f)) - 0.6).abs() < 1e-12);
        assert!(t.column(0).dot(&t.column(1)).abs() < 1e-12);
        assert!(t.column(n_f).dot(&t.column(n_f + 1)).abs() < 1e-12);
    }

    #[test]
    fn text_noise_is_an_angle() {
        let spec = SyntheticSpec { concentration: 0.0, text_noise: 0.3, ..small() };
        let data = generate(&spec).unwrap();
        // With zero concentration every image equals its class mean.
        let mean = data.dataset.features().column(0);
        let cos = mean.dot(&data.texts.column(0));
        assert!((cos - 0.3f64.cos()).abs() < 1e-12);
    }

    #[test]
    fn partitions_and_labels() {
        let data = generate(&small()).unwrap();
        assert_eq!(data.manifest.forget_indices(), vec![0, 1, 2]);
        assert_eq!(data.dataset.len(), 60);
        assert_eq!(&data.dataset.labels()[8..12], &[0, 0, 1, 1]);
    }

    #[test]
    fn infeasible_and_invalid_specs() {
        assert!(matches!(
            generate(&SyntheticSpec { n_classes: 20, ..small() }),
            Err(Error::Infeasible(_))
        ));
        assert!(generate(&SyntheticSpec { overlap: 1.5, ..small() }).is_err());
        assert!(generate(&SyntheticSpec { concentration: -1.0, ..small() }).is_err());
        assert!(generate(&SyntheticSpec { n_classes: 1, ..small() }).is_err());
    }

    #[test]
    fn bound_rejects_overlap() {
        let spec = SyntheticSpec { overlap: 0.5, ..small() };
        let data = generate(&spec).unwrap();
        assert!(matches!(
            oracle_retention_bound(&spec, &data.manifest),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn fixture_files() {
        let dir = tempfile::tempdir().unwrap();
        let data = generate(&small()).unwrap();
        let [texts, features, labels] = data.save(dir.path()).unwrap();
        let (t, m) = store::load_embeddings(&texts, None).unwrap();
        assert_eq!(m, data.manifest);
        assert_eq!(t.count(), 6);
        assert_eq!(store::load_matrix(&features).unwrap().count(), 60);
        assert_eq!(store::load_labels(&labels).unwrap(), data.dataset.labels());
    }
}
