//! Embedding matrices, class manifests and their on-disk formats.
//!
//! Binary payloads use the EMB1 container: the ASCII magic `EMB1`, a
//! little-endian `u32` dimension, a `u32` column count, a `u8` normalized
//! flag, three zero padding bytes, then `dim * count` little-endian `f32`
//! values in column-major order. Class manifests live in a JSON sidecar
//! next to the payload (`texts.emb` pairs with `texts.manifest.json`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"EMB1";
pub const HEADER_LEN: usize = 16;

/// Norm tolerance for the normalized flag on vectors held in memory.
pub const UNIT_NORM_TOL: f64 = 1e-6;
/// Norm tolerance for the normalized flag on vectors read from a 32-bit payload.
pub const STORED_UNIT_NORM_TOL: f64 = 1e-5;

/// A `dim x count` column stack of feature vectors, stored in 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    values: DMatrix<f64>,
    normalized: bool,
}

impl EmbeddingMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 {
            return Err(Error::InvalidParameter(
                "embedding dimension must be positive".into(),
            ));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!(
                    "embedding matrix entry ({}, {})",
                    pos % values.nrows(),
                    pos / values.nrows()
                ),
            });
        }
        Ok(EmbeddingMatrix {
            values,
            normalized: false,
        })
    }

    /// Builds a matrix from column-major data.
    pub fn from_column_slice(dim: usize, count: usize, data: &[f64]) -> Result<Self> {
        if data.len() != dim * count {
            return Err(Error::DimMismatch {
                context: "column-major data length".into(),
                expected: dim * count,
                actual: data.len(),
            });
        }
        Self::new(DMatrix::from_column_slice(dim, count, data))
    }

    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(dim * columns.len());
        for (j, col) in columns.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::DimMismatch {
                    context: format!("column {j}"),
                    expected: dim,
                    actual: col.len(),
                });
            }
            data.extend_from_slice(col);
        }
        Self::from_column_slice(dim, columns.len(), &data)
    }

    /// An empty `dim x 0` matrix, e.g. a retain set with no classes.
    pub fn empty(dim: usize) -> Result<Self> {
        Self::new(DMatrix::zeros(dim, 0))
    }

    /// Wraps values that are already unit-norm per column.
    pub fn unit(values: DMatrix<f64>) -> Result<Self> {
        Self::new(values)?.with_normalized_flag(UNIT_NORM_TOL)
    }

    fn with_normalized_flag(mut self, tol: f64) -> Result<Self> {
        for (j, col) in self.values.column_iter().enumerate() {
            let norm = col.norm();
            if (norm - 1.0).abs() > tol {
                return Err(Error::Malformed(format!(
                    "normalized flag set but column {j} has norm {norm}"
                )));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_values(self) -> DMatrix<f64> {
        self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn column(&self, j: usize) -> DVector<f64> {
        self.values.column(j).into_owned()
    }

    /// Divides every column by its Euclidean norm.
    pub fn normalize_columns(&self) -> Result<Self> {
        let mut values = self.values.clone();
        for (j, mut col) in values.column_iter_mut().enumerate() {
            let norm = col.norm();
            if norm == 0.0 {
                return Err(Error::ZeroColumn { index: j });
            }
            col /= norm;
        }
        Ok(EmbeddingMatrix {
            values,
            normalized: true,
        })
    }

    /// Returns `self` if already flagged normalized, else a normalized copy.
    pub fn ensure_normalized(&self) -> Result<Self> {
        if self.normalized {
            Ok(self.clone())
        } else {
            self.normalize_columns()
        }
    }

    /// Sub-matrix made of the given columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Self {
        EmbeddingMatrix {
            values: self.values.select_columns(indices),
            normalized: self.normalized,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Forget,
    Retain,
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Partition::Forget => f.write_str("forget"),
            Partition::Retain => f.write_str("retain"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    pub partition: Partition,
}

/// Ordered class list with forget/retain labels. Column `j` of a class
/// text matrix and dataset label `j` both refer to `classes()[j]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ClassEntry>", into = "Vec<ClassEntry>")]
pub struct ClassManifest {
    classes: Vec<ClassEntry>,
}

impl TryFrom<Vec<ClassEntry>> for ClassManifest {
    type Error = Error;

    fn try_from(classes: Vec<ClassEntry>) -> Result<Self> {
        ClassManifest::new(classes)
    }
}

impl From<ClassManifest> for Vec<ClassEntry> {
    fn from(manifest: ClassManifest) -> Self {
        manifest.classes
    }
}

impl ClassManifest {
    pub fn new(classes: Vec<ClassEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for entry in &classes {
            if !seen.insert(entry.name.as_str()) {
                return Err(Error::DuplicateClass(entry.name.clone()));
            }
        }
        Ok(ClassManifest { classes })
    }

    /// All classes marked retain.
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        Self::new(
            names
                .iter()
                .map(|n| ClassEntry {
                    name: n.as_ref().to_owned(),
                    partition: Partition::Retain,
                })
                .collect(),
        )
    }

    pub fn classes(&self) -> &[ClassEntry] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.classes.iter().position(|c| c.name == name)
    }

    pub fn indices(&self, partition: Partition) -> Vec<usize> {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.partition == partition)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn forget_indices(&self) -> Vec<usize> {
        self.indices(Partition::Forget)
    }

    pub fn retain_indices(&self) -> Vec<usize> {
        self.indices(Partition::Retain)
    }

    pub fn forget_count(&self) -> usize {
        self.forget_indices().len()
    }

    pub fn retain_count(&self) -> usize {
        self.retain_indices().len()
    }

    pub fn with_partitions(&self, partitions: &[Partition]) -> Result<Self> {
        if partitions.len() != self.len() {
            return Err(Error::ManifestMismatch {
                header: partitions.len(),
                manifest: self.len(),
            });
        }
        Ok(ClassManifest {
            classes: self
                .classes
                .iter()
                .zip(partitions)
                .map(|(c, &partition)| ClassEntry {
                    name: c.name.clone(),
                    partition,
                })
                .collect(),
        })
    }

    /// Splits per-class text embeddings into `(T_f, T_r)`.
    pub fn split_texts(
        &self,
        texts: &EmbeddingMatrix,
    ) -> Result<(EmbeddingMatrix, EmbeddingMatrix)> {
        if texts.count() != self.len() {
            return Err(Error::ManifestMismatch {
                header: texts.count(),
                manifest: self.len(),
            });
        }
        Ok((
            texts.select_columns(&self.forget_indices()),
            texts.select_columns(&self.retain_indices()),
        ))
    }
}

/// Image features with one class label per column.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    features: EmbeddingMatrix,
    labels: Vec<usize>,
}

impl LabeledDataset {
    pub fn new(features: EmbeddingMatrix, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if labels.len() != features.count() {
            return Err(Error::DimMismatch {
                context: "label count vs feature count".into(),
                expected: features.count(),
                actual: labels.len(),
            });
        }
        if let Some((position, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes)
        {
            return Err(Error::LabelOutOfRange {
                position,
                label,
                classes: n_classes,
            });
        }
        Ok(LabeledDataset { features, labels })
    }

    pub fn features(&self) -> &EmbeddingMatrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Encodes `matrix` as EMB1. Nothing is written if validation fails.
pub fn write_matrix<W: Write>(matrix: &EmbeddingMatrix, mut sink: W) -> Result<()> {
    let dim = u32::try_from(matrix.dim())
        .map_err(|_| Error::InvalidParameter("dimension exceeds u32".into()))?;
    let count = u32::try_from(matrix.count())
        .map_err(|_| Error::InvalidParameter("count exceeds u32".into()))?;

    let mut buf = Vec::with_capacity(HEADER_LEN + 4 * matrix.values.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&dim.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.push(u8::from(matrix.normalized));
    buf.extend_from_slice(&[0u8; 3]);
    for (pos, &v) in matrix.values.iter().enumerate() {
        let narrow = v as f32;
        if !narrow.is_finite() {
            return Err(Error::NonFinite {
                context: format!("32-bit payload at column-major offset {pos}"),
            });
        }
        buf.extend_from_slice(&narrow.to_le_bytes());
    }
    sink.write_all(&buf)?;
    sink.flush()?;
    Ok(())
}

pub fn read_matrix<R: Read>(mut source: R) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    source.read_to_end(&mut bytes)?;
    decode_matrix(&bytes)
}

fn decode_matrix(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            actual: bytes.len(),
        });
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize;
    let dim = u32_at(4);
    let count = u32_at(8);
    let flag = match bytes[12] {
        0 => false,
        1 => true,
        other => return Err(Error::Malformed(format!("normalized flag byte {other}"))),
    };
    if bytes[13..16] != [0, 0, 0] {
        return Err(Error::Malformed("non-zero header padding".into()));
    }
    let expected = HEADER_LEN + 4 * dim * count;
    if bytes.len() < expected {
        return Err(Error::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(Error::Malformed(format!(
            "{} trailing bytes after payload",
            bytes.len() - expected
        )));
    }
    let data: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let matrix = EmbeddingMatrix::from_column_slice(dim, count, &data)?;
    if flag {
        matrix.with_normalized_flag(STORED_UNIT_NORM_TOL)
    } else {
        Ok(matrix)
    }
}

pub fn write_manifest<W: Write>(manifest: &ClassManifest, mut sink: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut sink, manifest)?;
    sink.write_all(b"\n")?;
    Ok(())
}

pub fn read_manifest<R: Read>(source: R) -> Result<ClassManifest> {
    Ok(serde_json::from_reader(source)?)
}

/// Writes per-class embeddings and their manifest.
pub fn write_embeddings<W: Write, M: Write>(
    matrix: &EmbeddingMatrix,
    manifest: &ClassManifest,
    payload: W,
    manifest_sink: M,
) -> Result<()> {
    if matrix.count() != manifest.len() {
        return Err(Error::ManifestMismatch {
            header: matrix.count(),
            manifest: manifest.len(),
        });
    }
    write_matrix(matrix, payload)?;
    write_manifest(manifest, manifest_sink)
}

pub fn read_embeddings<R: Read, M: Read>(
    payload: R,
    manifest_source: M,
) -> Result<(EmbeddingMatrix, ClassManifest)> {
    let matrix = read_matrix(payload)?;
    let manifest = read_manifest(manifest_source)?;
    if matrix.count() != manifest.len() {
        return Err(Error::ManifestMismatch {
            header: matrix.count(),
            manifest: manifest.len(),
        });
    }
    Ok((matrix, manifest))
}

/// Reads a hand-written CSV fixture: a `dim,count` row (optionally preceded
/// by the literal header `dim,count`), then one vector per line.
pub fn read_csv_matrix<R: Read>(source: R) -> Result<EmbeddingMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(source);
    let mut records = reader.records();
    let parse_usize = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Malformed(format!("expected an integer, found {s:?}")))
    };
    let mut header = records
        .next()
        .ok_or_else(|| Error::Malformed("empty CSV".into()))??;
    if header.get(0) == Some("dim") {
        header = records
            .next()
            .ok_or_else(|| Error::Malformed("missing dim,count row".into()))??;
    }
    if header.len() != 2 {
        return Err(Error::Malformed("first row must be dim,count".into()));
    }
    let dim = parse_usize(&header[0])?;
    let count = parse_usize(&header[1])?;
    let mut data = Vec::with_capacity(dim * count);
    let mut rows = 0;
    for record in records {
        let record = record?;
        if record.len() != dim {
            return Err(Error::DimMismatch {
                context: format!("CSV vector {rows}"),
                expected: dim,
                actual: record.len(),
            });
        }
        for field in record.iter() {
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Malformed(format!("expected a number, found {field:?}")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows != count {
        return Err(Error::DimMismatch {
            context: "CSV vector count".into(),
            expected: count,
            actual: rows,
        });
    }
    EmbeddingMatrix::from_column_slice(dim, count, &data)
}

/// Labels file: one class index per line.
pub fn write_labels<W: Write>(labels: &[usize], mut sink: W) -> Result<()> {
    let mut text = String::with_capacity(labels.len() * 4);
    for l in labels {
        text.push_str(&l.to_string());
        text.push('\n');
    }
    sink.write_all(text.as_bytes())?;
    Ok(())
}

pub fn read_labels<R: Read>(mut source: R) -> Result<Vec<usize>> {
    let mut text = String::new();
    source.read_to_string(&mut text)?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.parse::<usize>()
                .map_err(|_| Error::Malformed(format!("bad label {l:?}")))
        })
        .collect()
}

/// Sidecar path sharing the payload's basename: `a/texts.emb` -> `a/texts.<suffix>`.
pub fn sidecar_path(path: &Path, suffix: &str) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

pub fn manifest_path(path: &Path) -> PathBuf {
    sidecar_path(path, "manifest.json")
}

fn open(path: &Path) -> Result<fs::File> {
    fs::File::open(path).map_err(|e| Error::file(path, e))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::file(path, e))
}

/// Loads an EMB1 file, or a CSV fixture when the extension is `.csv`.
pub fn load_matrix(path: &Path) -> Result<EmbeddingMatrix> {
    let file = std::io::BufReader::new(open(path)?);
    if path.extension().is_some_and(|e| e == "csv") {
        read_csv_matrix(file)
    } else {
        read_matrix(file)
    }
}

pub fn save_matrix(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    // Encode first so an invalid matrix never creates the file.
    let mut buf = Vec::new();
    write_matrix(matrix, &mut buf)?;
    fs::write(path, buf).map_err(|e| Error::file(path, e))
}

pub fn load_manifest(path: &Path) -> Result<ClassManifest> {
    read_manifest(std::io::BufReader::new(open(path)?))
}

pub fn save_manifest(path: &Path, manifest: &ClassManifest) -> Result<()> {
    write_manifest(manifest, create(path)?)
}

/// Loads per-class embeddings plus the manifest (sidecar path by default).
pub fn load_embeddings(
    path: &Path,
    manifest: Option<&Path>,
) -> Result<(EmbeddingMatrix, ClassManifest)> {
    let matrix = load_matrix(path)?;
    let manifest_file = manifest.map_or_else(|| manifest_path(path), Path::to_path_buf);
    let manifest = load_manifest(&manifest_file)?;
    if matrix.count() != manifest.len() {
        return Err(Error::ManifestMismatch {
            header: matrix.count(),
            manifest: manifest.len(),
        });
    }
    Ok((matrix, manifest))
}

pub fn save_embeddings(path: &Path, matrix: &EmbeddingMatrix, manifest: &ClassManifest) -> Result<()> {
    if matrix.count() != manifest.len() {
        return Err(Error::ManifestMismatch {
            header: matrix.count(),
            manifest: manifest.len(),
        });
    }
    save_matrix(path, matrix)?;
    save_manifest(&manifest_path(path), manifest)
}

pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    read_labels(open(path)?)
}

pub fn save_labels(path: &Path, labels: &[usize]) -> Result<()> {
    write_labels(labels, create(path)?)
}
