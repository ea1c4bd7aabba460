//! Finite-volume operators for the three Keller-Segel variants.
//!
//! The cell-density equation is discretized with a two-point diffusive flux
//! and a hybrid central/upwind chemotactic flux selected by the limiter `S`.
//! Each time level yields two decoupled linear systems: one for the
//! chemoattractant `c`, then one for the density `u` using the fresh `c`.
//! The nonlinear couplings are evaluated at a supplied prediction `u~` of the
//! new density (the previous level for the semi-implicit scheme).

use serde::{Deserialize, Serialize};

pub use crate::linsolve::{CsrMatrix, SparseSystem};

use crate::error::{KsError, Result};
use crate::mesh::{Field, Mesh};

/// Predictions at or below `-1 + KINETIC_GUARD` make `s / (s + 1)` blow up.
pub const KINETIC_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Parabolic-elliptic model with kinetic production `u / (u + 1) - c`.
    Embryonic,
    /// Parabolic-parabolic chemotaxis-growth model.
    Growth,
    /// Parabolic-parabolic model with density-dependent sensitivity.
    VolumeFilling,
}

/// Chemotactic sensitivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Sensitivity {
    Constant { chi: f64 },
    /// `chi(u) = chi0 (1 - u / u_bar)`
    Threshold { chi0: f64, u_bar: f64 },
}

impl Sensitivity {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            Sensitivity::Constant { chi } => chi,
            Sensitivity::Threshold { chi0, u_bar } => chi0 * (1.0 - u / u_bar),
        }
    }
}

/// Cell growth term `f(u)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum GrowthTerm {
    None,
    /// `f(u) = rate u (1 - u)`, linearized as `rate u~ (1 - u^{n+1})`.
    Quadratic { rate: f64 },
    /// `f(u) = rate u^2 (1 - u)`, linearized as `rate |u~|^2 (1 - u^{n+1})`.
    Cubic { rate: f64 },
}

impl GrowthTerm {
    /// Coefficient multiplying `m(K) (1 - u_K^{n+1})` for a predicted value.
    fn linear_coefficient(&self, u_tilde: f64) -> f64 {
        match *self {
            GrowthTerm::None => 0.0,
            GrowthTerm::Quadratic { rate } => rate * u_tilde,
            GrowthTerm::Cubic { rate } => rate * u_tilde * u_tilde,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub d_u: f64,
    pub chi: Sensitivity,
    /// Decay rate of `c` in the parabolic equations.
    pub lambda: f64,
    pub growth: GrowthTerm,
    /// Limiter constant, `0 <= eps_s < d_u`.
    pub eps_s: f64,
    /// Clamp predictions at zero before they enter the nonlinear terms.
    #[serde(default)]
    pub clamp_prediction_nonneg: bool,
}

impl ModelSpec {
    pub fn embryonic(d_u: f64, chi: f64) -> Self {
        Self {
            variant: Variant::Embryonic,
            d_u,
            chi: Sensitivity::Constant { chi },
            lambda: 1.0,
            growth: GrowthTerm::None,
            eps_s: 1e-3 * d_u,
            clamp_prediction_nonneg: false,
        }
    }

    pub fn growth(d_u: f64, chi: f64, lambda: f64, growth: GrowthTerm) -> Self {
        Self {
            variant: Variant::Growth,
            d_u,
            chi: Sensitivity::Constant { chi },
            lambda,
            growth,
            eps_s: 1e-3 * d_u,
            clamp_prediction_nonneg: false,
        }
    }

    /// Volume-filling model with `chi(u) = chi0 (1 - u / u_bar)` and unit decay.
    pub fn volume_filling(d_u: f64, chi0: f64, u_bar: f64) -> Self {
        Self {
            variant: Variant::VolumeFilling,
            d_u,
            chi: Sensitivity::Threshold { chi0, u_bar },
            lambda: 1.0,
            growth: GrowthTerm::None,
            eps_s: 1e-3 * d_u,
            clamp_prediction_nonneg: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(KsError::InvalidParameter(msg));
        if !(self.d_u > 0.0 && self.d_u.is_finite()) {
            return bad(format!("d_u must be positive, got {}", self.d_u));
        }
        if !(self.eps_s >= 0.0 && self.eps_s < self.d_u) {
            return bad(format!("eps_s must lie in [0, d_u), got {}", self.eps_s));
        }
        if self.variant != Variant::Embryonic && !(self.lambda > 0.0) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        match (self.variant, self.chi) {
            (Variant::VolumeFilling, Sensitivity::Threshold { chi0, u_bar }) => {
                if !(chi0 > 0.0 && u_bar > 0.0) {
                    return bad(format!("chi0 and u_bar must be positive, got {chi0}, {u_bar}"));
                }
            }
            (Variant::VolumeFilling, _) => {
                return bad("volume-filling model needs a threshold sensitivity".into())
            }
            (_, Sensitivity::Constant { chi }) => {
                if !(chi > 0.0 && chi.is_finite()) {
                    return bad(format!("chi must be positive, got {chi}"));
                }
            }
            _ => return bad("constant-sensitivity models need a constant chi".into()),
        }
        if self.variant != Variant::Growth && self.growth != GrowthTerm::None {
            return bad("growth term only applies to the growth variant".into());
        }
        Ok(())
    }

    /// Whether the u-equation reads the prediction (beyond the c-equation).
    pub fn u_needs_prediction(&self) -> bool {
        matches!(self.variant, Variant::Growth | Variant::VolumeFilling)
    }
}

/// Hybrid limiter: `0` below `2(eps - D)/chi`, `x` above `2(D - eps)/chi`, `x/2` in between.
pub fn limiter_s(x: f64, d_u: f64, chi_scale: f64, eps_s: f64) -> f64 {
    let lower = 2.0 * (eps_s - d_u) / chi_scale;
    let upper = 2.0 * (d_u - eps_s) / chi_scale;
    if x < lower {
        0.0
    } else if x > upper {
        x
    } else {
        0.5 * x
    }
}

/// Kinetic production `s / (s + 1)`.
pub fn kinetic_g(s: f64) -> Result<f64> {
    if !(s > -1.0 + KINETIC_GUARD) {
        return Err(KsError::SingularKinetic { cell: 0, value: s });
    }
    Ok(s / (s + 1.0))
}

/// Edge value of the sensitivity: the mean of `chi` at both predicted endpoints.
pub fn chi_edge_average(u_tilde_k: f64, u_tilde_l: f64, chi: impl Fn(f64) -> f64) -> f64 {
    0.5 * (chi(u_tilde_k) + chi(u_tilde_l))
}

fn check_len(mesh: &Mesh, f: &Field) -> Result<()> {
    f.check_mesh(mesh)
}

fn prepared_prediction<'a>(model: &ModelSpec, u: &'a [f64]) -> std::borrow::Cow<'a, [f64]> {
    if model.clamp_prediction_nonneg && u.iter().any(|&v| v < 0.0) {
        std::borrow::Cow::Owned(u.iter().map(|&v| v.max(0.0)).collect())
    } else {
        std::borrow::Cow::Borrowed(u)
    }
}

/// `(neighbor, tau, edge id)` around `k`, sorted by neighbor so that assembly
/// does not depend on edge enumeration order.
fn sorted_neighbors(mesh: &Mesh, k: usize) -> Vec<(usize, f64, usize)> {
    let mut nb: Vec<(usize, f64, usize)> = mesh
        .cell_edges(k)
        .iter()
        .map(|&e| {
            let edge = mesh.interior_edges()[e];
            let other = if edge.k == k { edge.l } else { edge.k };
            (other, edge.transmissibility, e)
        })
        .collect();
    nb.sort_by_key(|&(l, _, _)| l);
    nb
}

/// Assembles the linear system for `u^{n+1}`.
///
/// `u_tilde` is the prediction of `u^{n+1}` used by the growth source and the
/// volume-filling sensitivity; it is ignored by the embryonic variant.
pub fn assemble_u_system(
    mesh: &Mesh,
    model: &ModelSpec,
    c_new: &Field,
    u_old: &Field,
    u_tilde: Option<&Field>,
    dt: f64,
) -> Result<SparseSystem> {
    if !(dt > 0.0) {
        return Err(KsError::NonPositiveDt(dt));
    }
    check_len(mesh, c_new)?;
    check_len(mesh, u_old)?;
    let u_tilde = match (model.u_needs_prediction(), u_tilde) {
        (true, None) => {
            return Err(KsError::InvalidParameter(
                "growth and volume-filling u-systems need a prediction".into(),
            ))
        }
        (_, Some(f)) => {
            check_len(mesh, f)?;
            Some(prepared_prediction(model, &f.values))
        }
        (false, None) => None,
    };

    let n = mesh.num_cells();
    let c = &c_new.values;
    let mut triplets = Vec::with_capacity(5 * n);
    let mut rhs = Vec::with_capacity(n);

    for k in 0..n {
        let m = mesh.measure(k);
        let mut diag = m / dt;
        let mut b = m / dt * u_old.values[k];
        if let (Variant::Growth, Some(ut)) = (model.variant, u_tilde.as_deref()) {
            let g = model.growth.linear_coefficient(ut[k]);
            diag += g * m;
            b += g * m;
        }
        for (l, tau, _) in sorted_neighbors(mesh, k) {
            let dc = c[l] - c[k];
            let (out_coef, in_coef) = match (model.variant, model.chi) {
                (Variant::VolumeFilling, chi) => {
                    let ut = u_tilde.as_deref().expect("checked above");
                    let chi_t = chi_edge_average(ut[k], ut[l], |u| chi.eval(u));
                    let x = chi_t * dc;
                    (
                        model.d_u + limiter_s(x, model.d_u, 1.0, model.eps_s),
                        model.d_u + limiter_s(-x, model.d_u, 1.0, model.eps_s),
                    )
                }
                (_, Sensitivity::Constant { chi }) => (
                    model.d_u + chi * limiter_s(dc, model.d_u, chi, model.eps_s),
                    model.d_u + chi * limiter_s(-dc, model.d_u, chi, model.eps_s),
                ),
                (_, Sensitivity::Threshold { .. }) => {
                    return Err(KsError::InvalidParameter(
                        "threshold sensitivity requires the volume-filling variant".into(),
                    ))
                }
            };
            diag += tau * out_coef;
            triplets.push((k, l, -tau * in_coef));
        }
        triplets.push((k, k, diag));
        rhs.push(b);
    }
    SparseSystem::new(CsrMatrix::from_triplets(n, &triplets)?, rhs)
}

/// Assembles the linear system for `c^{n+1}`.
///
/// For the embryonic (elliptic) variant `source` enters through `s / (s + 1)`
/// and `c_old`, `dt` are unused. For the parabolic variants `source` enters
/// linearly and `c_old`, `dt` are required.
pub fn assemble_c_system(
    mesh: &Mesh,
    model: &ModelSpec,
    source: &Field,
    c_old: Option<&Field>,
    dt: Option<f64>,
) -> Result<SparseSystem> {
    check_len(mesh, source)?;
    let n = mesh.num_cells();
    let s = prepared_prediction(model, &source.values);
    let mut triplets = Vec::with_capacity(5 * n);
    let mut rhs = Vec::with_capacity(n);

    match model.variant {
        Variant::Embryonic => {
            for k in 0..n {
                let m = mesh.measure(k);
                let g = kinetic_g(s[k]).map_err(|_| KsError::SingularKinetic { cell: k, value: s[k] })?;
                let mut diag = m;
                for (l, tau, _) in sorted_neighbors(mesh, k) {
                    diag += tau;
                    triplets.push((k, l, -tau));
                }
                triplets.push((k, k, diag));
                rhs.push(m * g);
            }
        }
        Variant::Growth | Variant::VolumeFilling => {
            let c_old = c_old.ok_or_else(|| {
                KsError::InvalidParameter("parabolic c-systems need the previous concentration".into())
            })?;
            check_len(mesh, c_old)?;
            let dt = dt.ok_or_else(|| {
                KsError::InvalidParameter("parabolic c-systems need a time step".into())
            })?;
            if !(dt > 0.0) {
                return Err(KsError::NonPositiveDt(dt));
            }
            for k in 0..n {
                let m = mesh.measure(k);
                let mut diag = m / dt + model.lambda * m;
                for (l, tau, _) in sorted_neighbors(mesh, k) {
                    diag += tau;
                    triplets.push((k, l, -tau));
                }
                triplets.push((k, k, diag));
                rhs.push(m / dt * c_old.values[k] + m * s[k]);
            }
        }
    }
    SparseSystem::new(CsrMatrix::from_triplets(n, &triplets)?, rhs)
}

/// Structural sign and dominance audit of an assembled matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MMatrixAudit {
    pub diag_positive: bool,
    pub offdiag_nonpositive: bool,
    pub row_dominant: bool,
    pub col_dominant: bool,
    pub structurally_symmetric: bool,
}

impl MMatrixAudit {
    /// Positive diagonal, nonpositive off-diagonals, and weak diagonal
    /// dominance with at least one strict line, by rows or by columns.
    pub fn passes(&self) -> bool {
        self.diag_positive
            && self.offdiag_nonpositive
            && (self.row_dominant || self.col_dominant)
            && self.structurally_symmetric
    }
}

/// Chemotactic rows are generally not row dominant (the row sum carries the
/// net drift), but columns are: each column sums to the mass term.
pub fn audit_m_matrix(a: &CsrMatrix) -> MMatrixAudit {
    let n = a.n();
    let diag = a.diagonal();
    let mut offdiag_nonpositive = true;
    let mut row_off = vec![0.0; n];
    let mut col_off = vec![0.0; n];
    for i in 0..n {
        for (j, v) in a.row(i) {
            if i != j {
                if v > 0.0 {
                    offdiag_nonpositive = false;
                }
                row_off[i] += v.abs();
                col_off[j] += v.abs();
            }
        }
    }
    let dominance = |off: &[f64]| {
        let tol = 1e-12;
        let weak = (0..n).all(|i| diag[i] - off[i] >= -tol * diag[i].abs());
        let strict = (0..n).any(|i| diag[i] - off[i] > tol * diag[i].abs());
        weak && strict
    };
    MMatrixAudit {
        diag_positive: diag.iter().all(|&d| d > 0.0),
        offdiag_nonpositive,
        row_dominant: dominance(&row_off),
        col_dominant: dominance(&col_off),
        structurally_symmetric: a.is_structurally_symmetric(),
    }
}
