//! Finite-difference steady-state heat-conduction solver.
//!
//! Solves `∂²T/∂x² + ∂²T/∂y² + φ/k = 0` on the cell-centered grid with a
//! Dirichlet heat sink (`T = T0` on the bc mask) and adiabatic (zero-flux)
//! conditions on every other boundary pixel, implemented by ghost-cell
//! mirroring: a mirrored neighbor cancels out of both the numerator and the
//! diagonal of the stencil. Produces the ground-truth fields and sparse
//! monitor images that the learning pipeline trains and evaluates on.

use ndarray::Array2;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::grid::{build_masks, DomainSpec, FieldGrid, GridError, LayoutSpec, MpImage, RegionMasks};
use crate::stochastic::SeededRng;

/// Thermal conductivity k in W/(m·K). Fixed; only the ratio φ/k matters for
/// the reconstruction problem's shape.
pub const CONDUCTIVITY: f64 = 1.0;

#[derive(Debug, Error)]
pub enum SolverError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("solver did not converge: residual {residual:.3e} after {iters} iterations (tolerance {tol:.3e})")]
    NonConvergence { iters: usize, residual: f64, tol: f64 },
    #[error("power count {got} does not match component count {want}")]
    PowerCountMismatch { got: usize, want: usize },
    #[error("solver config invalid: {0}")]
    BadConfig(String),
}

/// Iterative method selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolveMethod {
    Sor,
    ConjugateResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub method: SolveMethod,
    /// SOR relaxation factor, 1 ≤ ω < 2.
    pub omega: f64,
    pub max_iters: usize,
    /// Convergence threshold on the diagonally scaled residual
    /// `max |r| / diag`, which carries Kelvin units.
    pub tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { method: SolveMethod::Sor, omega: 1.9, max_iters: 100_000, tolerance: 1e-8 }
    }
}

impl SolverConfig {
    fn validate(&self) -> Result<(), SolverError> {
        if !(self.omega >= 1.0 && self.omega < 2.0) {
            return Err(SolverError::BadConfig(format!("omega {} not in [1, 2)", self.omega)));
        }
        if !(self.tolerance > 0.0) {
            return Err(SolverError::BadConfig(format!("tolerance {} not positive", self.tolerance)));
        }
        Ok(())
    }
}

/// Heat-source intensity raster φ (W/m²): each component's sampled power
/// spread uniformly over its rectangle's physical area, zero elsewhere.
pub fn source_from_powers(
    domain: &DomainSpec,
    layout: &LayoutSpec,
    powers: &[f64],
) -> Result<Array2<f64>, SolverError> {
    layout.validate(domain)?;
    if powers.len() != layout.components.len() {
        return Err(SolverError::PowerCountMismatch {
            got: powers.len(),
            want: layout.components.len(),
        });
    }
    let mut phi = Array2::zeros(domain.shape());
    let cell_area = domain.dx() * domain.dy();
    for (comp, &p) in layout.components.iter().zip(powers) {
        let cells = (comp.x1 - comp.x0) * (comp.y1 - comp.y0);
        let intensity = p / (cells as f64 * cell_area);
        for r in comp.rows() {
            for c in comp.cols() {
                phi[[r, c]] = intensity;
            }
        }
    }
    Ok(phi)
}

/// Sparse linear system over the non-Dirichlet pixels, assembled once per
/// solve. Row k couples unknown k to its in-grid neighbors; Dirichlet
/// neighbors contribute to the right-hand side instead.
struct StencilSystem {
    diag: Vec<f64>,
    rhs: Vec<f64>,
    row_start: Vec<usize>,
    entries: Vec<(usize, f64)>,
    pixels: Vec<(usize, usize)>,
}

impl StencilSystem {
    fn assemble(
        domain: &DomainSpec,
        masks: &RegionMasks,
        source: &Array2<f64>,
    ) -> StencilSystem {
        let (h, w) = domain.shape();
        let cx = 1.0 / (domain.dx() * domain.dx());
        let cy = 1.0 / (domain.dy() * domain.dy());

        let mut index = Array2::from_elem((h, w), usize::MAX);
        let mut pixels = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !masks.bc[[r, c]] {
                    index[[r, c]] = pixels.len();
                    pixels.push((r, c));
                }
            }
        }

        let n = pixels.len();
        let mut diag = vec![0.0; n];
        let mut rhs = vec![0.0; n];
        let mut row_start = Vec::with_capacity(n + 1);
        let mut entries = Vec::with_capacity(4 * n);
        row_start.push(0);
        for (k, &(r, c)) in pixels.iter().enumerate() {
            let neighbors = [
                (r.wrapping_sub(1), c, cy),
                (r + 1, c, cy),
                (r, c.wrapping_sub(1), cx),
                (r, c + 1, cx),
            ];
            for (nr, nc, coeff) in neighbors {
                if nr >= h || nc >= w {
                    continue; // adiabatic boundary: mirrored ghost drops out
                }
                diag[k] += coeff;
                if masks.bc[[nr, nc]] {
                    rhs[k] += coeff * domain.sink_temp;
                } else {
                    entries.push((index[[nr, nc]], coeff));
                }
            }
            rhs[k] += source[[r, c]] / CONDUCTIVITY;
            row_start.push(entries.len());
        }
        StencilSystem { diag, rhs, row_start, entries, pixels }
    }

    fn row(&self, k: usize) -> &[(usize, f64)] {
        &self.entries[self.row_start[k]..self.row_start[k + 1]]
    }

    /// out = A·x where A has `diag` on the diagonal and −coeff off-diagonal.
    fn apply(&self, x: &[f64], out: &mut [f64]) {
        for k in 0..self.diag.len() {
            let mut acc = self.diag[k] * x[k];
            for &(j, coeff) in self.row(k) {
                acc -= coeff * x[j];
            }
            out[k] = acc;
        }
    }

    /// Diagonally scaled residual max |b − A·x| / diag (Kelvin).
    fn residual_norm(&self, x: &[f64]) -> f64 {
        let mut worst: f64 = 0.0;
        for k in 0..self.diag.len() {
            let mut r = self.rhs[k] - self.diag[k] * x[k];
            for &(j, coeff) in self.row(k) {
                r += coeff * x[j];
            }
            worst = worst.max((r / self.diag[k]).abs());
        }
        worst
    }
}

/// Solve the steady-state conduction problem. Deterministic given the config.
pub fn solve_steady(
    domain: &DomainSpec,
    masks: &RegionMasks,
    source: &Array2<f64>,
    cfg: &SolverConfig,
) -> Result<FieldGrid, SolverError> {
    cfg.validate()?;
    domain.validate()?;
    let sys = StencilSystem::assemble(domain, masks, source);
    let mut x = vec![domain.sink_temp; sys.diag.len()];

    let (iters, residual) = match cfg.method {
        SolveMethod::Sor => sor_iterate(&sys, &mut x, cfg),
        SolveMethod::ConjugateResidual => cr_iterate(&sys, &mut x, cfg),
    };
    if residual > cfg.tolerance {
        return Err(SolverError::NonConvergence { iters, residual, tol: cfg.tolerance });
    }
    log::debug!(
        "solve_steady converged: {iters} iterations, residual {residual:.3e} ({:?})",
        cfg.method
    );

    let mut values = Array2::from_elem(domain.shape(), domain.sink_temp);
    for (k, &(r, c)) in sys.pixels.iter().enumerate() {
        values[[r, c]] = x[k];
    }
    Ok(FieldGrid { values, dx: domain.dx(), dy: domain.dy() })
}

fn sor_iterate(sys: &StencilSystem, x: &mut [f64], cfg: &SolverConfig) -> (usize, f64) {
    let mut residual = sys.residual_norm(x);
    if residual <= cfg.tolerance {
        return (0, residual);
    }
    for sweep in 1..=cfg.max_iters {
        for k in 0..sys.diag.len() {
            let mut acc = sys.rhs[k];
            for &(j, coeff) in sys.row(k) {
                acc += coeff * x[j];
            }
            x[k] += cfg.omega * (acc / sys.diag[k] - x[k]);
        }
        residual = sys.residual_norm(x);
        if residual <= cfg.tolerance {
            return (sweep, residual);
        }
    }
    (cfg.max_iters, residual)
}

/// Conjugate-residual iteration; the assembled operator is symmetric positive
/// definite, for which CR converges monotonically in ‖r‖.
fn cr_iterate(sys: &StencilSystem, x: &mut [f64], cfg: &SolverConfig) -> (usize, f64) {
    let n = sys.diag.len();
    let mut r = vec![0.0; n];
    sys.apply(x, &mut r);
    for k in 0..n {
        r[k] = sys.rhs[k] - r[k];
    }
    let mut p = r.clone();
    let mut ar = vec![0.0; n];
    sys.apply(&r, &mut ar);
    let mut ap = ar.clone();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
    let mut r_ar = dot(&r, &ar);

    let mut residual = sys.residual_norm(x);
    if residual <= cfg.tolerance {
        return (0, residual);
    }
    for iter in 1..=cfg.max_iters {
        let ap_ap = dot(&ap, &ap);
        if ap_ap == 0.0 || r_ar == 0.0 {
            return (iter, sys.residual_norm(x));
        }
        let alpha = r_ar / ap_ap;
        for k in 0..n {
            x[k] += alpha * p[k];
            r[k] -= alpha * ap[k];
        }
        sys.apply(&r, &mut ar);
        let r_ar_next = dot(&r, &ar);
        let beta = r_ar_next / r_ar;
        r_ar = r_ar_next;
        for k in 0..n {
            p[k] = r[k] + beta * p[k];
            ap[k] = ar[k] + beta * ap[k];
        }
        residual = sys.residual_norm(x);
        if residual <= cfg.tolerance {
            return (iter, residual);
        }
    }
    (cfg.max_iters, residual)
}

/// Recompute the diagonally scaled 5-point residual of a field under the
/// given source; independent check that a solve actually satisfies the
/// discrete equations.
pub fn normalized_residual(
    domain: &DomainSpec,
    masks: &RegionMasks,
    source: &Array2<f64>,
    field: &FieldGrid,
) -> f64 {
    let sys = StencilSystem::assemble(domain, masks, source);
    let x: Vec<f64> = sys.pixels.iter().map(|&(r, c)| field.values[[r, c]]).collect();
    sys.residual_norm(&x)
}

/// Sample the field at sensor pixels, adding Gaussian noise per the layout's
/// noise plan; every non-sensor pixel is exactly 0. Noise draws consume the
/// rng once per noisy sensor, in sensor order, so the result is reproducible.
pub fn extract_mp(field: &FieldGrid, layout: &LayoutSpec, rng: &mut SeededRng) -> MpImage {
    let mut mp = Array2::zeros(field.values.dim());
    let noisy = layout.noisy_sensor_indices();
    let sigma = layout.noise.as_ref().map_or(0.0, |n| n.sigma);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    for (i, &[r, c]) in layout.sensors.iter().enumerate() {
        let mut v = field.values[[r, c]];
        if sigma > 0.0 && noisy.binary_search(&i).is_ok() {
            v += sigma * std_normal.inverse_cdf(rng.next_f64_open());
        }
        mp[[r, c]] = v;
    }
    mp
}

/// Convenience wrapper: masks, source, solve in one call.
pub fn solve_layout(
    domain: &DomainSpec,
    layout: &LayoutSpec,
    powers: &[f64],
    cfg: &SolverConfig,
) -> Result<FieldGrid, SolverError> {
    let masks = build_masks(domain, layout)?;
    let source = source_from_powers(domain, layout, powers)?;
    solve_steady(domain, &masks, &source, cfg)
}

/// Temperature rise above the sink per unit power, one field per component.
///
/// The governing equation is linear in the source, so
/// `T(P) = T0 + Σⱼ Pⱼ · responseⱼ` holds exactly; precomputing these makes
/// repeated power draws (e.g. Monte Carlo reliability sweeps) cost an affine
/// combination instead of a solve.
pub fn unit_responses(
    domain: &DomainSpec,
    layout: &LayoutSpec,
    cfg: &SolverConfig,
) -> Result<Vec<Array2<f64>>, SolverError> {
    let n = layout.components.len();
    let mut responses = Vec::with_capacity(n);
    for j in 0..n {
        let mut powers = vec![0.0; n];
        powers[j] = 1.0;
        let field = solve_layout(domain, layout, &powers, cfg)?;
        responses.push(field.values.mapv(|v| v - domain.sink_temp));
    }
    Ok(responses)
}

/// Reassemble the field for a power vector from precomputed unit responses.
pub fn superpose(
    domain: &DomainSpec,
    responses: &[Array2<f64>],
    powers: &[f64],
) -> Result<FieldGrid, SolverError> {
    if powers.len() != responses.len() {
        return Err(SolverError::PowerCountMismatch { got: powers.len(), want: responses.len() });
    }
    let mut values = Array2::from_elem(domain.shape(), domain.sink_temp);
    for (resp, &p) in responses.iter().zip(powers) {
        values.scaled_add(p, resp);
    }
    FieldGrid::new(domain, values).map_err(SolverError::Grid)
}
