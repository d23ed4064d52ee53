//! Construction and application of the `d x d` feature transforms: the
//! nullspace projector, the closed-form CCUP matrix, its ablation variants
//! and the partial-strength projector.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen, SVD};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Exec;
use crate::store::{self, EmbeddingMatrix};

/// Relative singular-value cutoff for rank decisions and pseudo-inverses.
pub const RANK_CUTOFF: f64 = 1e-10;
/// Largest `cond(T_f^T T_f)` for which the Gram-inverse form is used.
pub const GRAM_CONDITION_LIMIT: f64 = 1e4;
/// Projected features with a smaller norm are treated as fully erased.
pub const DEGENERATE_NORM: f64 = 1e-12;

pub const DEFAULT_LAMBDA: f64 = 100.0;
pub const DEFAULT_MU: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegularizationConfig {
    /// Forgetting strength.
    pub lambda: f64,
    /// Retention strength.
    pub mu: f64,
}

impl Default for RegularizationConfig {
    fn default() -> Self {
        RegularizationConfig {
            lambda: DEFAULT_LAMBDA,
            mu: DEFAULT_MU,
        }
    }
}

impl RegularizationConfig {
    pub fn new(lambda: f64, mu: f64) -> Result<Self> {
        let config = RegularizationConfig { lambda, mu };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda", self.lambda), ("mu", self.mu)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Which objective terms an ablation keeps: C1 identity preservation,
/// C2 forgetting, C3 retention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Components {
    pub identity: bool,
    pub forget: bool,
    pub retain: bool,
}

impl Components {
    pub const ALL: Components = Components {
        identity: true,
        forget: true,
        retain: true,
    };
    pub const IDENTITY_FORGET: Components = Components {
        identity: true,
        forget: true,
        retain: false,
    };
    pub const FORGET_RETAIN: Components = Components {
        identity: false,
        forget: true,
        retain: true,
    };
    pub const NONE: Components = Components {
        identity: false,
        forget: false,
        retain: false,
    };
}

impl fmt::Display for Components {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [
            (self.identity, "C1"),
            (self.forget, "C2"),
            (self.retain, "C3"),
        ]
        .into_iter()
        .filter_map(|(on, name)| on.then_some(name))
        .collect();
        if names.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&names.join("+"))
        }
    }
}

impl FromStr for Components {
    type Err = Error;

    /// Accepts `C1+C2+C3`, `c1,c2` and similar; `none` or `` is the empty set.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Components::NONE;
        let s = s.trim();
        if s.is_empty() || s.eq_ignore_ascii_case("none") {
            return Ok(out);
        }
        for part in s.split(['+', ',']).map(str::trim) {
            match part.to_ascii_uppercase().as_str() {
                "C1" => out.identity = true,
                "C2" => out.forget = true,
                "C3" => out.retain = true,
                _ => {
                    return Err(Error::InvalidParameter(format!(
                        "unknown component {part:?}"
                    )))
                }
            }
        }
        Ok(out)
    }
}

impl TryFrom<String> for Components {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Components> for String {
    fn from(c: Components) -> Self {
        c.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Identity,
    Nullspace,
    Ccup,
    Ablation,
    Partial,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Identity => "identity",
            Method::Nullspace => "nullspace",
            Method::Ccup => "ccup",
            Method::Ablation => "ablation",
            Method::Partial => "partial",
        })
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "identity" => Ok(Method::Identity),
            "nullspace" => Ok(Method::Nullspace),
            "ccup" => Ok(Method::Ccup),
            "ablation" => Ok(Method::Ablation),
            "partial" => Ok(Method::Partial),
            _ => Err(Error::InvalidParameter(format!("unknown method {s:?}"))),
        }
    }
}

/// How a projection was built.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub method: Method,
    pub lambda: f64,
    pub mu: f64,
    pub components: Components,
    pub alpha: f64,
}

impl Provenance {
    fn identity() -> Self {
        Provenance {
            method: Method::Identity,
            lambda: 0.0,
            mu: 0.0,
            components: Components::NONE,
            alpha: 0.0,
        }
    }

    fn nullspace() -> Self {
        Provenance {
            method: Method::Nullspace,
            alpha: 1.0,
            ..Self::identity()
        }
    }

    fn regularized(method: Method, config: RegularizationConfig, components: Components) -> Self {
        Provenance {
            method,
            lambda: config.lambda,
            mu: config.mu,
            components,
            alpha: 1.0,
        }
    }
}

/// A square feature transform together with how it was built.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    values: DMatrix<f64>,
    provenance: Provenance,
}

impl ProjectionMatrix {
    pub fn new(values: DMatrix<f64>, provenance: Provenance) -> Result<Self> {
        if !values.is_square() || values.nrows() == 0 {
            return Err(Error::InvalidParameter(format!(
                "projection must be a non-empty square matrix, got {}x{}",
                values.nrows(),
                values.ncols()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "projection matrix".into(),
            });
        }
        Ok(ProjectionMatrix { values, provenance })
    }

    pub fn identity(dim: usize) -> Self {
        ProjectionMatrix {
            values: DMatrix::identity(dim, dim),
            provenance: Provenance::identity(),
        }
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }
}

fn check_same_dim(t_f: &EmbeddingMatrix, t_r: &EmbeddingMatrix) -> Result<()> {
    if t_f.dim() != t_r.dim() {
        return Err(Error::DimMismatch {
            context: "forget vs retain embeddings".into(),
            expected: t_f.dim(),
            actual: t_r.dim(),
        });
    }
    Ok(())
}

fn check_forget_nonempty(t_f: &EmbeddingMatrix) -> Result<()> {
    if t_f.count() == 0 {
        return Err(Error::InvalidParameter(
            "forget set must contain at least one embedding".into(),
        ));
    }
    Ok(())
}

/// `T T^T`.
fn outer_gram(t: &EmbeddingMatrix) -> DMatrix<f64> {
    let v = t.values();
    v * v.transpose()
}

/// Orthonormal basis of the column space of `t`, dropping singular values
/// below `RANK_CUTOFF * sigma_max`.
pub fn orthonormal_basis(t: &DMatrix<f64>) -> DMatrix<f64> {
    let d = t.nrows();
    if t.ncols() == 0 {
        return DMatrix::zeros(d, 0);
    }
    let svd = SVD::new(t.clone(), true, false);
    let u = svd.u.expect("left singular vectors requested");
    let sigma_max = svd.singular_values.max();
    if sigma_max == 0.0 {
        return DMatrix::zeros(d, 0);
    }
    let keep: Vec<usize> = svd
        .singular_values
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > RANK_CUTOFF * sigma_max)
        .map(|(i, _)| i)
        .collect();
    u.select_columns(&keep)
}

/// `I - Q Q^T` with `Q` an orthonormal basis of `span(T_f)`.
pub fn nullspace_from_basis(t_f: &DMatrix<f64>) -> DMatrix<f64> {
    let d = t_f.nrows();
    let q = orthonormal_basis(t_f);
    let mut p = DMatrix::identity(d, d) - &q * q.transpose();
    symmetrize(&mut p);
    p
}

/// `I - T_f (T_f^T T_f)^{-1} T_f^T` through a Cholesky solve on the Gram
/// matrix. Fails when the Gram matrix is not numerically positive definite.
pub fn nullspace_from_gram(t_f: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let d = t_f.nrows();
    let gram = t_f.transpose() * t_f;
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Infeasible("forget Gram matrix is not positive definite".into())
    })?;
    // (T^T T)^{-1} T^T
    let coeffs = chol.solve(&t_f.transpose());
    let mut p = DMatrix::identity(d, d) - t_f * coeffs;
    symmetrize(&mut p);
    Ok(p)
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Standard nullspace projector removing `span(T_f)`.
///
/// Uses the Gram-inverse form when `T_f` has full column rank and
/// `cond(T_f^T T_f) <= GRAM_CONDITION_LIMIT`, and the orthonormal-basis
/// form otherwise. Both agree on well-conditioned input.
pub fn nullspace_projector(t_f: &EmbeddingMatrix) -> Result<ProjectionMatrix> {
    check_forget_nonempty(t_f)?;
    let t = t_f.values();
    let sv = t.singular_values();
    let (s_max, s_min) = (sv.max(), sv.min());
    let full_rank = t.ncols() <= t.nrows() && s_min > RANK_CUTOFF * s_max;
    let values = if full_rank && (s_max / s_min).powi(2) <= GRAM_CONDITION_LIMIT {
        nullspace_from_gram(t)?
    } else {
        nullspace_from_basis(t)
    };
    ProjectionMatrix::new(values, Provenance::nullspace())
}

/// Solves `D X = N` for symmetric positive definite `D` and returns `X^T`,
/// i.e. `N^T D^{-1}`, which is `N D^{-1}` for symmetric `N`.
fn right_divide_spd(numerator: &DMatrix<f64>, denominator: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = denominator.cholesky().ok_or_else(|| {
        Error::Infeasible("regularized denominator is not positive definite".into())
    })?;
    Ok(chol.solve(&numerator.transpose()).transpose())
}

/// `(I + mu T_r T_r^T)(I + lambda T_f T_f^T + mu T_r T_r^T)^{-1}`.
fn ccup_values(
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
) -> Result<DMatrix<f64>> {
    let d = t_f.dim();
    if config.lambda == 0.0 {
        // Numerator and denominator coincide.
        log::warn!("lambda = 0: the projection is the identity and nothing is forgotten");
        return Ok(DMatrix::identity(d, d));
    }
    let identity = DMatrix::<f64>::identity(d, d);
    let m_f = outer_gram(t_f) * config.lambda;
    let m_r = outer_gram(t_r) * config.mu;
    let denominator = &identity + m_f + &m_r;
    let numerator = identity + m_r;
    right_divide_spd(&numerator, denominator)
}

/// Closed-form CCUP matrix.
pub fn ccup_matrix(
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
) -> Result<ProjectionMatrix> {
    check_same_dim(t_f, t_r)?;
    config.validate()?;
    let values = ccup_values(t_f, t_r, config)?;
    ProjectionMatrix::new(
        values,
        Provenance::regularized(Method::Ccup, config, Components::ALL),
    )
}

/// Moore-Penrose pseudo-inverse of a symmetric matrix via its
/// eigendecomposition, zeroing eigenvalues below `RANK_CUTOFF * max|eig|`.
pub fn symmetric_pinv(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let max_abs = eig.eigenvalues.amax();
    if max_abs == 0.0 {
        return DMatrix::zeros(n, n);
    }
    let inv_diag = eig.eigenvalues.map(|e| {
        if e.abs() > RANK_CUTOFF * max_abs {
            1.0 / e
        } else {
            0.0
        }
    });
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= inv_diag[j];
    }
    let mut out = scaled * v.transpose();
    symmetrize(&mut out);
    out
}

/// Minimizer of the objective restricted to `components`.
///
/// C2 is mandatory. With C1 the problem is strictly convex and has a unique
/// solution; without C1 the minimum-Frobenius-norm minimizer is returned.
pub fn ablation_matrix(
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
    components: Components,
) -> Result<ProjectionMatrix> {
    if !components.forget {
        return Err(Error::MissingForgetTerm(components.to_string()));
    }
    check_same_dim(t_f, t_r)?;
    config.validate()?;
    let d = t_f.dim();
    let values = match (components.identity, components.retain) {
        (true, true) => ccup_values(t_f, t_r, config)?,
        (true, false) => {
            let no_retain = RegularizationConfig { mu: 0.0, ..config };
            ccup_values(t_f, &EmbeddingMatrix::empty(d)?, no_retain)?
        }
        (false, true) => {
            let m_r = outer_gram(t_r) * config.mu;
            let a = outer_gram(t_f) * config.lambda + &m_r;
            m_r * symmetric_pinv(&a)
        }
        // lambda ||W T_f||^2 alone: the minimum-norm minimizer is zero.
        (false, false) => DMatrix::zeros(d, d),
    };
    ProjectionMatrix::new(
        values,
        Provenance::regularized(Method::Ablation, config, components),
    )
}

/// `I - alpha Q Q^T`: erases a fraction `alpha` of every direction in
/// `span(T_f)`. `alpha = 1` is the nullspace projector, `alpha = 0` the identity.
pub fn partial_projector(t_f: &EmbeddingMatrix, alpha: f64) -> Result<ProjectionMatrix> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(format!(
            "alpha must lie in [0, 1], got {alpha}"
        )));
    }
    check_forget_nonempty(t_f)?;
    let d = t_f.dim();
    let values = if alpha == 1.0 {
        nullspace_projector(t_f)?.values
    } else if alpha == 0.0 {
        DMatrix::identity(d, d)
    } else {
        let q = orthonormal_basis(t_f.values());
        let mut p = DMatrix::identity(d, d) - (&q * q.transpose()) * alpha;
        symmetrize(&mut p);
        p
    };
    ProjectionMatrix::new(
        values,
        Provenance {
            method: Method::Partial,
            alpha,
            ..Provenance::identity()
        },
    )
}

/// Features after `x -> Wx / ||Wx||`. Columns whose projection fell below
/// `DEGENERATE_NORM` are left at zero and listed in `degenerate`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedFeatures {
    pub values: DMatrix<f64>,
    pub degenerate: Vec<usize>,
}

pub fn project_features(
    proj: &ProjectionMatrix,
    features: &EmbeddingMatrix,
    exec: Exec,
) -> Result<ProjectedFeatures> {
    if proj.dim() != features.dim() {
        return Err(Error::DimMismatch {
            context: "projection vs feature dimension".into(),
            expected: proj.dim(),
            actual: features.dim(),
        });
    }
    let w = proj.values();
    let x = features.values();
    let columns = exec.map(features.count(), |j| {
        let y = w * x.column(j);
        let norm = y.norm();
        (norm >= DEGENERATE_NORM).then(|| y / norm)
    });
    let mut values = DMatrix::zeros(features.dim(), features.count());
    let mut degenerate = Vec::new();
    for (j, col) in columns.into_iter().enumerate() {
        match col {
            Some(c) => values.set_column(j, &c),
            None => degenerate.push(j),
        }
    }
    Ok(ProjectedFeatures { values, degenerate })
}

pub fn apply_projection(
    proj: &ProjectionMatrix,
    features: &EmbeddingMatrix,
) -> Result<EmbeddingMatrix> {
    apply_projection_with(proj, features, Exec::default())
}

pub fn apply_projection_with(
    proj: &ProjectionMatrix,
    features: &EmbeddingMatrix,
    exec: Exec,
) -> Result<EmbeddingMatrix> {
    let projected = project_features(proj, features, exec)?;
    if !projected.degenerate.is_empty() {
        return Err(Error::DegenerateFeatures {
            indices: projected.degenerate,
        });
    }
    EmbeddingMatrix::new(projected.values)?.normalize_columns()
}

#[derive(Debug, Serialize, Deserialize)]
struct ProvenanceFile {
    dim: usize,
    #[serde(flatten)]
    provenance: Provenance,
}

pub fn provenance_path(path: &Path) -> std::path::PathBuf {
    store::sidecar_path(path, "provenance.json")
}

/// Writes the matrix as EMB1 plus a `<stem>.provenance.json` sidecar.
pub fn save_projection(path: &Path, proj: &ProjectionMatrix) -> Result<()> {
    let matrix = EmbeddingMatrix::new(proj.values.clone())?;
    store::save_matrix(path, &matrix)?;
    let side = provenance_path(path);
    let file = fs::File::create(&side).map_err(|e| Error::file(&side, e))?;
    serde_json::to_writer_pretty(
        file,
        &ProvenanceFile {
            dim: proj.dim(),
            provenance: proj.provenance,
        },
    )?;
    Ok(())
}

pub fn load_projection(path: &Path) -> Result<ProjectionMatrix> {
    let matrix = store::load_matrix(path)?;
    let side = provenance_path(path);
    let file = fs::File::open(&side).map_err(|e| Error::file(&side, e))?;
    let meta: ProvenanceFile = serde_json::from_reader(std::io::BufReader::new(file))?;
    if meta.dim != matrix.dim() || matrix.count() != matrix.dim() {
        return Err(Error::DimMismatch {
            context: format!("projection {}", path.display()),
            expected: meta.dim,
            actual: matrix.count(),
        });
    }
    ProjectionMatrix::new(matrix.into_values(), meta.provenance)
}
