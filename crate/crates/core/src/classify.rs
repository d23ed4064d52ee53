//! Cosine-similarity zero-shot classification against class text embeddings.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::store::EmbeddingMatrix;

/// Similarities are cosine similarities multiplied by this factor.
pub const LOGIT_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityScores {
    /// `n_images x n_classes`.
    pub scores: DMatrix<f64>,
    pub predictions: Vec<usize>,
}

impl SimilarityScores {
    pub fn n_images(&self) -> usize {
        self.scores.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.scores.ncols()
    }
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax(values: impl IntoIterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for (i, v) in values.into_iter().enumerate() {
        if v > best_value {
            best = i;
            best_value = v;
        }
    }
    best
}

pub(crate) fn unit_texts(class_texts: &EmbeddingMatrix, names: Option<&[String]>) -> Result<DMatrix<f64>> {
    let mut texts = class_texts.values().clone();
    for (i, mut col) in texts.column_iter_mut().enumerate() {
        let norm = col.norm();
        if norm == 0.0 {
            let class = names
                .and_then(|n| n.get(i).cloned())
                .unwrap_or_else(|| format!("#{i}"));
            return Err(Error::ZeroTextEmbedding { class });
        }
        col /= norm;
    }
    Ok(texts)
}

pub fn classify(features: &EmbeddingMatrix, class_texts: &EmbeddingMatrix) -> Result<SimilarityScores> {
    classify_with(features, class_texts, None, Exec::default())
}

/// Scores every image against every class. `class_names` only feeds error
/// messages. Features without the normalized flag are normalized first.
pub fn classify_with(
    features: &EmbeddingMatrix,
    class_texts: &EmbeddingMatrix,
    class_names: Option<&[String]>,
    exec: Exec,
) -> Result<SimilarityScores> {
    if features.dim() != class_texts.dim() {
        return Err(Error::DimMismatch {
            context: "feature vs text embedding dimension".into(),
            expected: class_texts.dim(),
            actual: features.dim(),
        });
    }
    let features = features.ensure_normalized()?;
    let texts = unit_texts(class_texts, class_names)?;
    let texts_t = texts.transpose();
    let x = features.values();
    let n_classes = texts.ncols();

    let rows = exec.map(features.count(), |j| {
        (&texts_t * x.column(j)) * LOGIT_SCALE
    });
    let mut scores = DMatrix::zeros(rows.len(), n_classes);
    let mut predictions = Vec::with_capacity(rows.len());
    for (j, row) in rows.iter().enumerate() {
        scores.set_row(j, &row.transpose());
        predictions.push(argmax(row.iter().copied()));
    }
    Ok(SimilarityScores {
        scores,
        predictions,
    })
}

/// Top-1 accuracy in percent over images whose true label lies in `subset`
/// (all images when `subset` is `None`).
pub fn accuracy(predictions: &[usize], labels: &[usize], subset: Option<&[usize]>) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::DimMismatch {
            context: "predictions vs labels".into(),
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let in_subset = |l: usize| subset.is_none_or(|s| s.contains(&l));
    let (mut total, mut correct) = (0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        if in_subset(l) {
            total += 1;
            correct += usize::from(p == l);
        }
    }
    if total == 0 {
        return Err(Error::EmptySubset(
            "no images carry a label in the requested subset".into(),
        ));
    }
    Ok(100.0 * correct as f64 / total as f64)
}
