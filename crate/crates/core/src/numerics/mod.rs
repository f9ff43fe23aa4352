//! Radial grids, fields, norms and the discrete radial Laplacian.
//!
//! Nodes are `ρ_j = ρ_max ((j+1)/n)^grading`, so the last node sits on the
//! outer radius and carries boundary data. Operators are finite-volume with
//! faces at node midpoints; the face at `ρ = 0` carries no flux, which is the
//! Neumann condition at the origin.

pub mod eig;
pub mod expm;
pub mod quad;
pub mod tridiag;

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use crate::{gate, Error, Result};
use quad::GaussLegendre;
pub use tridiag::Tridiag;

#[derive(Debug, Clone)]
pub struct RadialGrid {
    d: usize,
    rho_max: f64,
    grading: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    /// Right face of each cell; the left face of cell 0 is the origin.
    faces: Vec<f64>,
}

/// Area of the unit sphere in ℝ^d.
pub fn sphere_area(d: usize) -> f64 {
    2.0 * PI.powf(d as f64 / 2.0) / gamma_half(d)
}

/// Γ(d/2) for a positive integer d.
fn gamma_half(d: usize) -> f64 {
    let (mut g, mut x) = if d % 2 == 0 { (1.0, 1.0) } else { (PI.sqrt(), 0.5) };
    let target = d as f64 / 2.0;
    while x < target - 1e-12 {
        g *= x;
        x += 1.0;
    }
    g
}

impl RadialGrid {
    pub fn new(d: usize, rho_max: f64, n: usize, grading: f64) -> Result<Self> {
        if d < 3 {
            return gate(format!("dimension d={d} must satisfy d >= 3"));
        }
        if n < 16 {
            return gate(format!("grid size n={n} must be at least 16"));
        }
        if !(rho_max > 0.0 && rho_max.is_finite()) {
            return gate(format!("rho_max={rho_max} must be positive"));
        }
        if !(grading >= 1.0) {
            return gate(format!("grading={grading} must be >= 1"));
        }
        let nodes: Vec<f64> = (0..n)
            .map(|j| rho_max * ((j + 1) as f64 / n as f64).powf(grading))
            .collect();
        if nodes[0] <= 0.0 || nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Numerical("grid nodes underflow; reduce grading".into()));
        }
        let mut faces: Vec<f64> = nodes.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        faces.push(rho_max);
        let weights = quadratic_weights(d, &nodes);
        Ok(RadialGrid { d, rho_max, grading, nodes, weights, faces })
    }

    pub fn d(&self) -> usize {
        self.d
    }
    pub fn rho_max(&self) -> f64 {
        self.rho_max
    }
    pub fn grading(&self) -> f64 {
        self.grading
    }
    pub fn n(&self) -> usize {
        self.nodes.len()
    }
    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }
    /// Weights for `∫_0^{ρ_max} f(ρ) ρ^{d-1} dρ`.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn faces(&self) -> &[f64] {
        &self.faces
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().zip(&self.weights).map(|(v, w)| v * w).sum()
    }

    fn left_face(&self, j: usize) -> f64 {
        if j == 0 {
            0.0
        } else {
            self.faces[j - 1]
        }
    }

    /// `∫ ρ^{d-1} e^{κρ²} dρ` over each finite-volume cell.
    pub fn cell_volumes(&self, kappa: f64) -> Vec<f64> {
        let dm1 = (self.d - 1) as i32;
        if kappa == 0.0 {
            let df = self.d as f64;
            return (0..self.n())
                .map(|j| (self.faces[j].powi(self.d as i32) - self.left_face(j).powi(self.d as i32)) / df)
                .collect();
        }
        let gl = GaussLegendre::new(10);
        (0..self.n())
            .map(|j| gl.integrate(self.left_face(j), self.faces[j], |r| r.powi(dm1) * (kappa * r * r).exp()))
            .collect()
    }

    /// Flux coefficients `m(face)/(ρ_{j+1}-ρ_j)` for the weight `m = ρ^{d-1}e^{κρ²}`.
    pub fn conductances(&self, kappa: f64) -> Vec<f64> {
        let dm1 = (self.d - 1) as i32;
        (0..self.n() - 1)
            .map(|j| {
                let f = self.faces[j];
                f.powi(dm1) * (kappa * f * f).exp() / (self.nodes[j + 1] - self.nodes[j])
            })
            .collect()
    }

    /// Finite-volume form of `m^{-1} ∂_ρ(m ∂_ρ ·)` with `m = ρ^{d-1}e^{κρ²}`.
    /// κ = 0 gives the radial Laplacian, κ = 1/4 gives `Δ + (ρ/2)∂_ρ`.
    /// The last row is zero: the outer node holds its value.
    pub fn weighted_operator(&self, kappa: f64) -> Tridiag {
        let n = self.n();
        let vol = self.cell_volumes(kappa);
        let cond = self.conductances(kappa);
        let mut op = Tridiag::zeros(n);
        for j in 0..n - 1 {
            let cl = if j == 0 { 0.0 } else { cond[j - 1] };
            let cr = cond[j];
            op.lower[j] = cl / vol[j];
            op.upper[j] = cr / vol[j];
            op.diag[j] = -(op.lower[j] + op.upper[j]);
        }
        op
    }

    pub fn laplacian(&self) -> Tridiag {
        self.weighted_operator(0.0)
    }

    /// Index of the first node with `ρ_j >= r`.
    pub fn locate(&self, r: f64) -> usize {
        self.nodes.partition_point(|&x| x < r)
    }
}

/// Product rule from quadratic interpolation: each interval `[ρ_{i-1}, ρ_i]`
/// (with `ρ_{-1} = 0`) integrates a quadratic through neighbouring nodes
/// against `ρ^{d-1}`. In high dimension the weight `ρ^{d-1}` can push the
/// innermost weights negative; those intervals fall back to linear
/// interpolation, which costs nothing measurable since they carry almost no mass.
fn quadratic_weights(d: usize, nodes: &[f64]) -> Vec<f64> {
    let mut linear_upto = 0;
    loop {
        let w = product_weights(d, nodes, linear_upto);
        match w.iter().rposition(|&x| x <= 0.0) {
            None => return w,
            Some(k) => linear_upto = (k + 3).max(linear_upto + 1).min(nodes.len()),
        }
    }
}

fn product_weights(d: usize, nodes: &[f64], linear_upto: usize) -> Vec<f64> {
    let n = nodes.len();
    let gl = GaussLegendre::new((d / 2 + 3).max(8));
    let dm1 = (d - 1) as i32;
    let mut w = vec![0.0; n];
    // integrate the Lagrange basis on `idx` over [a, b] against ρ^{d-1}
    let add = |w: &mut [f64], a: f64, b: f64, idx: &[usize], scale: f64| {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (t, gw) in gl.nodes.iter().zip(&gl.weights) {
            let x = mid + half * t;
            let m = gw * half * x.powi(dm1) * scale;
            for &k in idx {
                let mut l = 1.0;
                for &o in idx {
                    if o != k {
                        l *= (x - nodes[o]) / (nodes[k] - nodes[o]);
                    }
                }
                w[k] += m * l;
            }
        }
    };
    if linear_upto > 0 {
        add(&mut w, 0.0, nodes[0], &[0], 1.0);
    } else {
        add(&mut w, 0.0, nodes[0], &[0, 1, 2], 1.0);
    }
    for i in 1..n {
        let (a, b) = (nodes[i - 1], nodes[i]);
        if i <= linear_upto {
            add(&mut w, a, b, &[i - 1, i], 1.0);
            continue;
        }
        // Averaging both stencils cancels the leading error on smooth grids; where
        // spacing jumps (near the origin of graded grids) the outward stencil is safer.
        let smooth = i >= 2 && i + 1 < n && (b - a) < 1.5 * (a - nodes[i - 2]);
        if smooth {
            add(&mut w, a, b, &[i - 2, i - 1, i], 0.5);
            add(&mut w, a, b, &[i - 1, i, i + 1], 0.5);
        } else {
            let s = (i - 1).min(n - 3);
            add(&mut w, a, b, &[s, s + 1, s + 2], 1.0);
        }
    }
    w
}

#[derive(Debug, Clone)]
pub struct RadialField {
    pub grid: Arc<RadialGrid>,
    pub values: Vec<f64>,
}

impl RadialField {
    pub fn new(grid: Arc<RadialGrid>, values: Vec<f64>) -> Self {
        assert_eq!(grid.n(), values.len(), "field length must match grid");
        RadialField { grid, values }
    }

    pub fn zeros(grid: Arc<RadialGrid>) -> Self {
        let n = grid.n();
        RadialField { grid, values: vec![0.0; n] }
    }

    pub fn from_fn(grid: Arc<RadialGrid>, f: impl Fn(f64) -> f64) -> Self {
        let values = grid.nodes().iter().map(|&r| f(r)).collect();
        RadialField { grid, values }
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        RadialField::new(self.grid.clone(), values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scaled(&self, c: f64) -> Self {
        self.with_values(self.values.iter().map(|v| c * v).collect())
    }

    pub fn axpy(&self, c: f64, other: &RadialField) -> Self {
        self.with_values(self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect())
    }

    pub fn sup(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Cubic Lagrange interpolation through the four surrounding nodes.
    /// Outside `ρ_max` the field is continued by zero.
    pub fn sample(&self, r: f64) -> f64 {
        let nodes = self.grid.nodes();
        let n = nodes.len();
        if r > self.grid.rho_max() {
            return 0.0;
        }
        let i = nodes.partition_point(|&x| x < r);
        let s = i.saturating_sub(2).min(n - 4);
        let mut acc = 0.0;
        for a in s..s + 4 {
            let mut l = 1.0;
            for b in s..s + 4 {
                if a != b {
                    l *= (r - nodes[b]) / (nodes[a] - nodes[b]);
                }
            }
            acc += l * self.values[a];
        }
        acc
    }

    pub fn resample(&self, target: &Arc<RadialGrid>) -> RadialField {
        RadialField::from_fn(target.clone(), |r| self.sample(r))
    }

    pub fn to_csv(&self) -> String {
        let g = &self.grid;
        let mut s = format!("# d={} rho_max={} n={}\nrho,value\n", g.d(), g.rho_max(), g.n());
        for (r, v) in g.nodes().iter().zip(&self.values) {
            let _ = writeln!(s, "{r:.17e},{v:.17e}");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Reads values written by [`RadialField::to_csv`] onto a grid with the same nodes.
    pub fn from_csv(grid: Arc<RadialGrid>, text: &str) -> Result<Self> {
        let mut values = Vec::with_capacity(grid.n());
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.starts_with("rho") {
                continue;
            }
            let mut it = line.split(',');
            let parse = |s: Option<&str>| -> Result<f64> {
                s.ok_or_else(|| Error::Parse(format!("short line: {line}")))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(e.to_string()))
            };
            let r = parse(it.next())?;
            let v = parse(it.next())?;
            let j = values.len();
            if j >= grid.n() || (grid.nodes()[j] - r).abs() > 1e-12 * r.abs().max(1.0) {
                return Err(Error::Parse(format!("node mismatch at row {j}")));
            }
            values.push(v);
        }
        if values.len() != grid.n() {
            return Err(Error::Parse("row count does not match grid".into()));
        }
        Ok(RadialField::new(grid, values))
    }
}

/// `‖f‖_{L^p(ℝ^d)}` for a radial field; `p = ∞` gives the sup norm.
pub fn lp_norm(f: &RadialField, p: f64) -> Result<f64> {
    if !(p >= 1.0) {
        return gate(format!("Lebesgue exponent p={p} must be >= 1"));
    }
    if p.is_infinite() {
        return Ok(f.sup());
    }
    let g = &f.grid;
    let s: f64 = f.values.iter().zip(g.weights()).map(|(v, w)| w * v.abs().powf(p)).sum();
    Ok((sphere_area(g.d()) * s.max(0.0)).powf(1.0 / p))
}

/// `‖f‖_{L^η} + 1_{γ>η} ‖f‖_{L^γ}`.
pub fn intersection_norm(f: &RadialField, eta: f64, gamma: f64) -> Result<f64> {
    if !(eta >= 1.0) || eta > gamma {
        return gate(format!("intersection exponents need 1 <= eta <= gamma, got ({eta}, {gamma})"));
    }
    let a = lp_norm(f, eta)?;
    if gamma > eta {
        Ok(a + lp_norm(f, gamma)?)
    } else {
        Ok(a)
    }
}

pub fn apply_radial_laplacian(f: &RadialField) -> RadialField {
    f.with_values(f.grid.laplacian().apply(&f.values))
}

/// Discrete `e^{tΔ} f` with the outer node held fixed.
pub fn heat_step(f: &RadialField, t: f64) -> Result<RadialField> {
    if !(t > 0.0) {
        return gate(format!("heat_step time t={t} must be positive"));
    }
    let op = f.grid.laplacian();
    Ok(f.with_values(expm::expm_apply(&op, t, &f.values)))
}
