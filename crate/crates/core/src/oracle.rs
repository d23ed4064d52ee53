//! Direct evaluation of the CCUP objective
//!
//! `||W - I||_F^2 + lambda ||W T_f||_F^2 + mu ||W T_r - T_r||_F^2`,
//!
//! its gradient, and a gradient-descent minimizer. These never touch the
//! closed form and serve as an independent check on it.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::projection::{Components, Method, ProjectionMatrix, Provenance, RegularizationConfig};
use crate::store::EmbeddingMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    /// `||W - I||_F^2`
    pub identity_term: f64,
    /// `lambda ||W T_f||_F^2`
    pub forget_term: f64,
    /// `mu ||W T_r - T_r||_F^2`
    pub retain_term: f64,
}

fn check_dims(w: &DMatrix<f64>, t_f: &EmbeddingMatrix, t_r: &EmbeddingMatrix) -> Result<()> {
    let d = w.nrows();
    if !w.is_square() {
        return Err(Error::DimMismatch {
            context: "W must be square".into(),
            expected: d,
            actual: w.ncols(),
        });
    }
    for (name, t) in [("T_f", t_f), ("T_r", t_r)] {
        if t.dim() != d {
            return Err(Error::DimMismatch {
                context: format!("{name} rows vs W"),
                expected: d,
                actual: t.dim(),
            });
        }
    }
    Ok(())
}

pub fn objective(
    w: &DMatrix<f64>,
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
) -> Result<ObjectiveValue> {
    check_dims(w, t_f, t_r)?;
    let d = w.nrows();
    let identity_term = (w - DMatrix::<f64>::identity(d, d)).norm_squared();
    let forget_term = config.lambda * (w * t_f.values()).norm_squared();
    let retain_term = config.mu * (w * t_r.values() - t_r.values()).norm_squared();
    Ok(ObjectiveValue {
        total: identity_term + forget_term + retain_term,
        identity_term,
        forget_term,
        retain_term,
    })
}

/// `2(W - I) + 2 lambda W T_f T_f^T + 2 mu (W T_r - T_r) T_r^T`
pub fn gradient(
    w: &DMatrix<f64>,
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
) -> Result<DMatrix<f64>> {
    check_dims(w, t_f, t_r)?;
    let d = w.nrows();
    let (tf, tr) = (t_f.values(), t_r.values());
    let g = (w - DMatrix::<f64>::identity(d, d))
        + (w * tf * tf.transpose()) * config.lambda
        + ((w * tr - tr) * tr.transpose()) * config.mu;
    Ok(g * 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinimizeOptions {
    pub max_iters: usize,
    /// Stop once the gradient Frobenius norm is at or below this.
    pub tolerance: f64,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        MinimizeOptions {
            max_iters: 200_000,
            tolerance: 1e-9,
        }
    }
}

const ARMIJO: f64 = 1e-4;

/// Gradient descent with backtracking (halving, Armijo constant 1e-4)
/// started from `W = I`.
///
/// Returns `Error::NotConverged` carrying the last iterate when the cap is
/// reached first.
pub fn minimize(
    t_f: &EmbeddingMatrix,
    t_r: &EmbeddingMatrix,
    config: RegularizationConfig,
    options: MinimizeOptions,
) -> Result<ProjectionMatrix> {
    config.validate()?;
    if options.tolerance.is_nan() || options.tolerance <= 0.0 {
        return Err(Error::InvalidParameter("tolerance must be positive".into()));
    }
    let d = t_f.dim();
    let provenance = Provenance {
        method: Method::Ccup,
        lambda: config.lambda,
        mu: config.mu,
        components: Components::ALL,
        alpha: 1.0,
    };
    let mut w = DMatrix::<f64>::identity(d, d);
    // Validates dimensions.
    objective(&w, t_f, t_r, config)?;
    let mut g = gradient(&w, t_f, t_r, config)?;
    let mut step = 1.0;
    let mut iterations = 0;
    loop {
        let g_norm2 = g.norm_squared();
        if g_norm2.sqrt() <= options.tolerance {
            return ProjectionMatrix::new(w, provenance);
        }
        if iterations >= options.max_iters {
            return Err(Error::NotConverged {
                iterations,
                gradient_norm: g_norm2.sqrt(),
                best: Box::new(ProjectionMatrix::new(w, provenance)?),
            });
        }
        iterations += 1;

        // Along -G the objective is exactly quadratic:
        // f(W - tG) - f(W) = -t ||G||^2 + t^2 q(G).
        // Evaluating the change this way avoids cancellation near the optimum.
        let curvature = g.norm_squared()
            + config.lambda * (&g * t_f.values()).norm_squared()
            + config.mu * (&g * t_r.values()).norm_squared();
        // Let the step grow back after earlier shrinking.
        step *= 2.0;
        while -step * g_norm2 + step * step * curvature > -ARMIJO * step * g_norm2 {
            step *= 0.5;
        }
        w -= &g * step;
        g = gradient(&w, t_f, t_r, config)?;
    }
}
