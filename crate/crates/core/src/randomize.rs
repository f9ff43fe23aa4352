//! Gaussian randomization of initial data on the periodic box `[-L, L]^d`.
//!
//! Frequencies live on the dual lattice `(π/L)ℤ^d`; a smooth unit-scale partition
//! `ψ_k` splits them into overlapping cubes, and `f^ω = Σ_k h_k P_k f` multiplies each
//! piece by its own Gaussian. The second half of the module solves the heat equation
//! from such data by a fixed point around the free flow `ẑ(t) = e^{tΔ} f^ω`.

use std::sync::Arc;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::branch::{continuity_from_increments, ContinuityReport};
use crate::noise::{stopping_time, MonitorState, PathMonitor, StopClause, StoppingTimeRecord};
use crate::numerics::quad::GaussLegendre;
use crate::rng::{path_rng, PathRng};
use crate::{gate, numerical, Result};

/// Grid and FFT plans shared by every field on one box.
pub struct Torus {
    pub d: usize,
    pub half_width: f64,
    pub n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// Dual-lattice coordinate of each axis index.
    axis_xi: Vec<f64>,
    xi_sq: Vec<f64>,
    /// Nodes carrying the unpaired Nyquist frequency on some axis.
    nyquist: Vec<bool>,
}

impl std::fmt::Debug for Torus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Torus(d={}, L={}, n={})", self.d, self.half_width, self.n)
    }
}

impl Torus {
    pub fn new(d: usize, half_width: f64, n: usize) -> Result<Arc<Self>> {
        if d == 0 || n < 4 || n % 2 != 0 {
            return gate(format!("torus needs d >= 1 and even n >= 4, got d={d}, n={n}"));
        }
        if !(half_width > 0.0) {
            return gate(format!("half width L={half_width} must be positive"));
        }
        let total = n.checked_pow(d as u32).filter(|&t| t <= 1 << 24);
        let Some(total) = total else {
            return gate(format!("n^d too large for n={n}, d={d}"));
        };
        let mut planner = FftPlanner::new();
        let axis_xi: Vec<f64> = (0..n)
            .map(|i| {
                let m = if i < n / 2 { i as i64 } else { i as i64 - n as i64 };
                std::f64::consts::PI * m as f64 / half_width
            })
            .collect();
        let mut xi_sq = vec![0.0; total];
        let mut nyquist = vec![false; total];
        for idx in 0..total {
            let mut rest = idx;
            for _ in 0..d {
                let i = rest % n;
                rest /= n;
                xi_sq[idx] += axis_xi[i] * axis_xi[i];
                nyquist[idx] |= i == n / 2;
            }
        }
        Ok(Arc::new(Torus {
            d,
            half_width,
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            axis_xi,
            xi_sq,
            nyquist,
        }))
    }

    pub fn len(&self) -> usize {
        self.xi_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi_sq.is_empty()
    }

    pub fn volume(&self) -> f64 {
        (2.0 * self.half_width).powi(self.d as i32)
    }

    pub fn cell_volume(&self) -> f64 {
        self.volume() / self.len() as f64
    }

    /// Axis indices of a linear index, slowest axis first.
    pub fn axes(&self, idx: usize) -> Vec<usize> {
        let mut out = vec![0; self.d];
        let mut rest = idx;
        for a in (0..self.d).rev() {
            out[a] = rest % self.n;
            rest /= self.n;
        }
        out
    }

    pub fn xi(&self, idx: usize) -> Vec<f64> {
        self.axes(idx).into_iter().map(|i| self.axis_xi[i]).collect()
    }

    pub fn xi_sq(&self) -> &[f64] {
        &self.xi_sq
    }

    /// Physical position of a linear index.
    pub fn position(&self, idx: usize) -> Vec<f64> {
        let h = 2.0 * self.half_width / self.n as f64;
        self.axes(idx).into_iter().map(|i| -self.half_width + h * i as f64).collect()
    }

    /// Linear index of the node at integer frequency `m` (per axis, |m| < n/2).
    pub fn index_of_frequency(&self, m: &[i64]) -> Option<usize> {
        if m.len() != self.d {
            return None;
        }
        let mut idx = 0;
        for &mi in m {
            if mi.unsigned_abs() as usize >= self.n / 2 {
                return None;
            }
            let i = if mi >= 0 { mi as usize } else { (self.n as i64 + mi) as usize };
            idx = idx * self.n + i;
        }
        Some(idx)
    }

    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let total = data.len();
        let fft = if inverse { &self.inv } else { &self.fwd };
        let mut scratch = vec![Complex64::default(); fft.get_inplace_scratch_len()];
        let mut buf = Vec::new();
        for axis in 0..self.d {
            let stride = n.pow((self.d - 1 - axis) as u32);
            if stride == 1 {
                fft.process_with_scratch(data, &mut scratch);
                continue;
            }
            buf.resize(total, Complex64::default());
            let block = stride * n;
            let mut line = 0;
            for b in 0..total / block {
                for s in 0..stride {
                    let base = b * block + s;
                    for j in 0..n {
                        buf[line * n + j] = data[base + j * stride];
                    }
                    line += 1;
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            line = 0;
            for b in 0..total / block {
                for s in 0..stride {
                    let base = b * block + s;
                    for j in 0..n {
                        data[base + j * stride] = buf[line * n + j];
                    }
                    line += 1;
                }
            }
        }
    }

    /// Coefficients of `f(x) = Σ c(ξ) e^{iξ·(x+L)}`; the unpaired Nyquist line is dropped
    /// so that real fields keep an exactly conjugate-symmetric spectrum.
    fn analyze(&self, values: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.transform(&mut data, false);
        let scale = 1.0 / self.len() as f64;
        for (c, &nq) in data.iter_mut().zip(&self.nyquist) {
            *c = if nq { Complex64::default() } else { *c * scale };
        }
        data
    }

    fn synthesize(&self, spectrum: &[Complex64]) -> Vec<Complex64> {
        let mut data = spectrum.to_vec();
        self.transform(&mut data, true);
        data
    }

    fn real_lp(&self, values: &[f64], p: f64) -> Result<f64> {
        if p.is_infinite() {
            return Ok(values.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        }
        if !(p >= 1.0) {
            return gate(format!("Lebesgue exponent {p} below 1"));
        }
        let s: f64 = values.iter().map(|v| v.abs().powf(p)).sum();
        Ok((s * self.cell_volume()).powf(1.0 / p))
    }
}

/// A field on the torus, stored by its Fourier coefficients.
#[derive(Debug, Clone)]
pub struct LatticeField {
    pub torus: Arc<Torus>,
    pub spectrum: Vec<Complex64>,
}

impl LatticeField {
    pub fn zeros(torus: Arc<Torus>) -> Self {
        let spectrum = vec![Complex64::default(); torus.len()];
        LatticeField { torus, spectrum }
    }

    pub fn from_physical(torus: Arc<Torus>, values: &[f64]) -> Result<Self> {
        if values.len() != torus.len() {
            return gate(format!("expected {} samples, got {}", torus.len(), values.len()));
        }
        let spectrum = torus.analyze(values);
        Ok(LatticeField { torus, spectrum })
    }

    pub fn from_fn(torus: Arc<Torus>, f: impl Fn(&[f64]) -> f64) -> Self {
        let values: Vec<f64> = (0..torus.len()).map(|i| f(&torus.position(i))).collect();
        let spectrum = torus.analyze(&values);
        LatticeField { torus, spectrum }
    }

    pub fn from_spectrum(torus: Arc<Torus>, spectrum: Vec<Complex64>) -> Result<Self> {
        if spectrum.len() != torus.len() {
            return gate("spectrum length does not match the torus");
        }
        Ok(LatticeField { torus, spectrum })
    }

    pub fn physical_complex(&self) -> Vec<Complex64> {
        self.torus.synthesize(&self.spectrum)
    }

    pub fn physical(&self) -> Vec<f64> {
        self.physical_complex().into_iter().map(|c| c.re).collect()
    }

    /// Largest imaginary part in physical space relative to the largest real part.
    pub fn imaginary_residue(&self) -> f64 {
        let z = self.physical_complex();
        let re = z.iter().fold(0.0f64, |m, c| m.max(c.re.abs()));
        let im = z.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
        im / re.max(f64::MIN_POSITIVE)
    }

    /// `L²` norm from Parseval.
    pub fn l2_norm(&self) -> f64 {
        (self.torus.volume() * self.spectrum.iter().map(|c| c.norm_sqr()).sum::<f64>()).sqrt()
    }

    /// `L^p` norm of the (real part of the) physical field.
    pub fn lp_norm(&self, p: f64) -> Result<f64> {
        self.torus.real_lp(&self.physical(), p)
    }

    pub fn scaled(&self, c: f64) -> Self {
        LatticeField { torus: self.torus.clone(), spectrum: self.spectrum.iter().map(|z| z * c).collect() }
    }

    pub fn axpy(&self, c: f64, other: &LatticeField) -> Self {
        let spectrum = self.spectrum.iter().zip(&other.spectrum).map(|(a, b)| a + b * c).collect();
        LatticeField { torus: self.torus.clone(), spectrum }
    }

    /// Multiplier depending on `|ξ|²` only.
    pub fn radial_multiplier(&self, m: impl Fn(f64) -> f64) -> Self {
        let spectrum = self.spectrum.iter().zip(self.torus.xi_sq()).map(|(c, &x)| c * m(x)).collect();
        LatticeField { torus: self.torus.clone(), spectrum }
    }

    pub fn heat(&self, t: f64) -> Self {
        self.radial_multiplier(|x| (-x * t).exp())
    }

    /// `(I - Δ)^{σ/2}`.
    pub fn bessel(&self, sigma: f64) -> Self {
        self.radial_multiplier(|x| (1.0 + x).powf(0.5 * sigma))
    }

    /// `‖(I - Δ)^{s/2} f‖_{L²}`; negative `s` gives `H^{-α}` norms.
    pub fn sobolev_norm(&self, s: f64) -> f64 {
        let sum: f64 =
            self.spectrum.iter().zip(self.torus.xi_sq()).map(|(c, &x)| c.norm_sqr() * (1.0 + x).powf(s)).sum();
        (self.torus.volume() * sum).sqrt()
    }

    /// Largest `|c(ξ) - conj c(-ξ)|`.
    pub fn conjugate_defect(&self) -> f64 {
        let t = &self.torus;
        let mut worst = 0.0f64;
        for idx in 0..t.len() {
            let neg: Vec<i64> = t
                .axes(idx)
                .iter()
                .map(|&i| if i < t.n / 2 { -(i as i64) } else { t.n as i64 - i as i64 })
                .collect();
            match t.index_of_frequency(&neg) {
                Some(j) => worst = worst.max((self.spectrum[idx] - self.spectrum[j].conj()).norm()),
                None => worst = worst.max(self.spectrum[idx].norm()),
            }
        }
        worst
    }
}

/// The smooth bump: 1 on `[-1/2, 1/2]`, 0 outside `(-1, 1)`.
pub fn bump(x: f64) -> f64 {
    let a = x.abs();
    if a <= 0.5 {
        return 1.0;
    }
    if a >= 1.0 {
        return 0.0;
    }
    let g = |s: f64| if s > 0.0 { (-1.0 / s).exp() } else { 0.0 };
    let s = 2.0 * (a - 0.5);
    g(1.0 - s) / (g(1.0 - s) + g(s))
}

/// One-dimensional `ψ_l(x) = φ(x - l) / Σ_m φ(x - m)`.
pub fn partition_factor(l: i64, x: f64) -> f64 {
    let num = bump(x - l as f64);
    if num == 0.0 {
        return 0.0;
    }
    let lo = x.floor() as i64;
    let den: f64 = (lo - 1..=lo + 2).map(|m| bump(x - m as f64)).sum();
    num / den
}

/// Unit-scale partition `ψ_k(ξ) = Π_a ψ_{k_a}(ξ_a)` sampled on one torus, `|k|_∞ ≤ K`.
#[derive(Debug, Clone)]
pub struct BlockPartition {
    pub torus: Arc<Torus>,
    pub cutoff: i64,
    /// Non-zero one-dimensional factors `(l, ψ_l(ξ))` at each axis index.
    axis_factors: Vec<Vec<(i64, f64)>>,
}

pub fn build_block_partition(torus: Arc<Torus>, cutoff: i64) -> Result<BlockPartition> {
    if cutoff < 1 {
        return gate(format!("block cutoff K={cutoff} must be at least 1"));
    }
    let axis_factors = torus
        .axis_xi
        .iter()
        .map(|&x| {
            let lo = x.floor() as i64;
            (lo - 1..=lo + 2)
                .filter(|l| l.abs() <= cutoff)
                .map(|l| (l, partition_factor(l, x)))
                .filter(|&(_, w)| w > 0.0)
                .collect()
        })
        .collect();
    Ok(BlockPartition { torus, cutoff, axis_factors })
}

impl BlockPartition {
    pub fn side(&self) -> usize {
        (2 * self.cutoff + 1) as usize
    }

    pub fn n_blocks(&self) -> usize {
        self.side().pow(self.torus.d as u32)
    }

    pub fn block_index(&self, k: &[i64]) -> Option<usize> {
        if k.len() != self.torus.d || k.iter().any(|v| v.abs() > self.cutoff) {
            return None;
        }
        Some(k.iter().fold(0, |acc, &v| acc * self.side() + (v + self.cutoff) as usize))
    }

    pub fn block(&self, index: usize) -> Vec<i64> {
        let mut out = vec![0; self.torus.d];
        let mut rest = index;
        for a in (0..self.torus.d).rev() {
            out[a] = (rest % self.side()) as i64 - self.cutoff;
            rest /= self.side();
        }
        out
    }

    /// `ψ_k(ξ)` at an arbitrary frequency.
    pub fn psi(&self, k: &[i64], xi: &[f64]) -> f64 {
        k.iter().zip(xi).map(|(&l, &x)| partition_factor(l, x)).product()
    }

    /// Calls `f(block index, ψ_k(ξ))` for every block overlapping node `idx`.
    pub fn for_each_block(&self, idx: usize, mut f: impl FnMut(usize, f64)) {
        let axes = self.torus.axes(idx);
        let lists: Vec<&Vec<(i64, f64)>> = axes.iter().map(|&i| &self.axis_factors[i]).collect();
        if lists.iter().any(|l| l.is_empty()) {
            return;
        }
        let mut pos = vec![0usize; lists.len()];
        loop {
            let mut bi = 0;
            let mut w = 1.0;
            for (a, l) in lists.iter().enumerate() {
                let (k, v) = l[pos[a]];
                bi = bi * self.side() + (k + self.cutoff) as usize;
                w *= v;
            }
            f(bi, w);
            let mut a = lists.len();
            loop {
                if a == 0 {
                    return;
                }
                a -= 1;
                pos[a] += 1;
                if pos[a] < lists[a].len() {
                    break;
                }
                pos[a] = 0;
            }
        }
    }

    /// `Σ_{|k|≤K} ψ_k` at node `idx`.
    pub fn coverage(&self, idx: usize) -> f64 {
        self.torus.axes(idx).iter().map(|&i| self.axis_factors[i].iter().map(|p| p.1).sum::<f64>()).product()
    }

    /// Relative `L²` mass of `f - Σ_k P_k f`.
    pub fn truncation_residual(&self, f: &LatticeField) -> f64 {
        let (mut miss, mut all) = (0.0, 0.0);
        for (idx, c) in f.spectrum.iter().enumerate() {
            let n2 = c.norm_sqr();
            all += n2;
            miss += n2 * (1.0 - self.coverage(idx)).powi(2);
        }
        if all == 0.0 {
            0.0
        } else {
            (miss / all).sqrt()
        }
    }

    /// Frequency mass `‖P_k f‖²_{L²}` of every block.
    pub fn block_masses(&self, f: &LatticeField) -> Vec<f64> {
        let mut mass = vec![0.0; self.n_blocks()];
        for (idx, c) in f.spectrum.iter().enumerate() {
            let n2 = c.norm_sqr();
            if n2 > 0.0 {
                self.for_each_block(idx, |bi, w| mass[bi] += n2 * w * w);
            }
        }
        mass.iter_mut().for_each(|m| *m *= self.torus.volume());
        mass
    }
}

/// `P_k f = ℱ^{-1}(ψ_k f̂)`.
pub fn project_block(f: &LatticeField, bp: &BlockPartition, k: &[i64]) -> Result<LatticeField> {
    let Some(target) = bp.block_index(k) else {
        return gate(format!("block {k:?} outside |k| <= {}", bp.cutoff));
    };
    let mut spectrum = vec![Complex64::default(); f.spectrum.len()];
    for (idx, c) in f.spectrum.iter().enumerate() {
        if *c != Complex64::default() {
            bp.for_each_block(idx, |bi, w| {
                if bi == target {
                    spectrum[idx] = c * w;
                }
            });
        }
    }
    LatticeField::from_spectrum(f.torus.clone(), spectrum)
}

/// The Gaussian multipliers `h_k`, indexed like the blocks.
#[derive(Debug, Clone)]
pub struct BlockCoefficients {
    pub values: Vec<Complex64>,
}

impl BlockCoefficients {
    pub fn ones(bp: &BlockPartition) -> Self {
        BlockCoefficients { values: vec![Complex64::new(1.0, 0.0); bp.n_blocks()] }
    }

    /// `h_0` real, `h_k = h¹_k + i h²_k` on the half-lattice whose first non-zero
    /// component is positive, `h_{-k} = conj h_k` on the rest.
    pub fn sample(bp: &BlockPartition, rng: &mut PathRng) -> Self {
        let nb = bp.n_blocks();
        let mut values = vec![Complex64::default(); nb];
        for (bi, slot) in values.iter_mut().enumerate() {
            let k = bp.block(bi);
            match k.iter().find(|&&v| v != 0) {
                None => *slot = Complex64::new(rng.sample(StandardNormal), 0.0),
                Some(&lead) if lead > 0 => *slot = Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)),
                _ => {}
            }
        }
        for bi in 0..nb {
            let k = bp.block(bi);
            if k.iter().find(|&&v| v != 0).is_some_and(|&lead| lead < 0) {
                let neg: Vec<i64> = k.iter().map(|v| -v).collect();
                values[bi] = values[bp.block_index(&neg).unwrap()].conj();
            }
        }
        BlockCoefficients { values }
    }

    pub fn get(&self, bp: &BlockPartition, k: &[i64]) -> Option<Complex64> {
        bp.block_index(k).map(|i| self.values[i])
    }
}

/// Relative spectral mass allowed outside the block table.
pub const TRUNCATION_TOLERANCE: f64 = 1e-6;

/// `Σ_k h_k P_k f` for given coefficients.
pub fn randomize_with(f: &LatticeField, bp: &BlockPartition, h: &BlockCoefficients) -> Result<LatticeField> {
    let miss = bp.truncation_residual(f);
    if miss > TRUNCATION_TOLERANCE {
        return gate(format!("relative spectral mass {miss:.3e} beyond block cutoff K={}", bp.cutoff));
    }
    let mut spectrum = vec![Complex64::default(); f.spectrum.len()];
    for (idx, c) in f.spectrum.iter().enumerate() {
        if *c == Complex64::default() {
            continue;
        }
        let mut m = Complex64::default();
        bp.for_each_block(idx, |bi, w| m += h.values[bi] * w);
        spectrum[idx] = c * m;
    }
    LatticeField::from_spectrum(f.torus.clone(), spectrum)
}

#[derive(Debug, Clone)]
pub struct RandomizedDatum {
    pub base: LatticeField,
    pub seed: u64,
    pub coefficients: BlockCoefficients,
    pub result: LatticeField,
}

pub fn randomize(f: &LatticeField, bp: &BlockPartition, seed: u64) -> Result<RandomizedDatum> {
    let mut rng = path_rng(seed, 0);
    let coefficients = BlockCoefficients::sample(bp, &mut rng);
    let result = randomize_with(f, bp, &coefficients)?;
    Ok(RandomizedDatum { base: f.clone(), seed, coefficients, result })
}

/// `E‖f^ω‖²_{L²} = Σ_ξ |f̂(ξ)|² (ψ_0(ξ)² + 2 Σ_{k≠0} ψ_k(ξ)²)`.
pub fn expected_l2_energy(f: &LatticeField, bp: &BlockPartition) -> f64 {
    let zero = bp.block_index(&vec![0; f.torus.d]).unwrap();
    let mut s = 0.0;
    for (idx, c) in f.spectrum.iter().enumerate() {
        let n2 = c.norm_sqr();
        if n2 > 0.0 {
            bp.for_each_block(idx, |bi, w| s += n2 * w * w * if bi == zero { 1.0 } else { 2.0 });
        }
    }
    s * f.torus.volume()
}

/// Relative block mass below which a block is left out of modulation sums.
const NEGLIGIBLE_BLOCK: f64 = 1e-28;

/// `(Σ_k (1+|k|²)^{s q/2} ‖P_k f‖^q_{L^p})^{1/q}`, with `∞` exponents taken as maxima.
pub fn modulation_norm(f: &LatticeField, bp: &BlockPartition, p_exp: f64, q_exp: f64, s: f64) -> Result<f64> {
    if !(p_exp >= 1.0 && q_exp >= 1.0) {
        return gate(format!("modulation exponents must be >= 1, got p={p_exp}, q={q_exp}"));
    }
    let mass = bp.block_masses(f);
    let total: f64 = mass.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let active: Vec<usize> = (0..mass.len()).filter(|&b| mass[b] > NEGLIGIBLE_BLOCK * total).collect();
    let terms: Vec<f64> = active
        .par_iter()
        .map(|&b| {
            let k = bp.block(b);
            let pk = project_block(f, bp, &k)?;
            let weight = (1.0 + k.iter().map(|v| (v * v) as f64).sum::<f64>()).powf(0.5 * s);
            Ok(weight * pk.lp_norm(p_exp)?)
        })
        .collect::<Result<_>>()?;
    Ok(if q_exp.is_infinite() {
        terms.iter().fold(0.0f64, |m, v| m.max(*v))
    } else {
        terms.iter().map(|v| v.powf(q_exp)).sum::<f64>().powf(1.0 / q_exp)
    })
}

#[derive(Debug, Clone)]
pub struct MomentReport {
    pub q: f64,
    pub samples: usize,
    /// Empirical `E‖u₀^ω‖²_{L^q}`, all samples and first half.
    pub mean_sq: f64,
    pub mean_sq_half: f64,
    /// `‖u₀‖²_{M^{q,q}}` for `q < 2`, `‖u₀‖²_{L²}` otherwise.
    pub bound_rhs: f64,
    pub ratio: f64,
    pub ratio_half: f64,
    /// `(ρ, E‖u₀^ω‖^ρ_{L^ρ})`.
    pub rho_moments: Vec<(f64, f64)>,
    /// Slope of `ln(E‖u₀^ω‖^ρ_{L^ρ}) / ρ` against `ln ρ`.
    pub growth_slope: f64,
}

pub const MIN_MOMENT_SAMPLES: usize = 1000;

pub const MOMENT_ORDERS: [f64; 4] = [2.0, 4.0, 6.0, 8.0];

/// Empirical `L^q` and `L^ρ` moments of the randomization.
pub fn lq_moment_check(u0: &LatticeField, bp: &BlockPartition, q: f64, samples: usize, seed: u64) -> Result<MomentReport> {
    if samples < MIN_MOMENT_SAMPLES {
        return gate(format!("moment check needs at least {MIN_MOMENT_SAMPLES} samples"));
    }
    if !(q >= 1.0) {
        return gate(format!("q={q} below 1"));
    }
    let rows: Vec<[f64; 5]> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let h = BlockCoefficients::sample(bp, &mut rng);
            let u = randomize_with(u0, bp, &h)?.physical();
            let t = &u0.torus;
            let mut row = [t.real_lp(&u, q)?.powi(2), 0.0, 0.0, 0.0, 0.0];
            for (j, &rho) in MOMENT_ORDERS.iter().enumerate() {
                row[j + 1] = t.real_lp(&u, rho)?.powf(rho);
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let mean = |col: usize, upto: usize| rows[..upto].iter().map(|r| r[col]).sum::<f64>() / upto as f64;
    let mean_sq = mean(0, samples);
    let mean_sq_half = mean(0, samples / 2);
    let bound_rhs = if q < 2.0 { modulation_norm(u0, bp, q, q, 0.0)?.powi(2) } else { u0.l2_norm().powi(2) };
    let rho_moments: Vec<(f64, f64)> = MOMENT_ORDERS.iter().enumerate().map(|(j, &r)| (r, mean(j + 1, samples))).collect();
    let pts: Vec<(f64, f64)> =
        rho_moments.iter().filter(|m| m.1 > 0.0).map(|&(r, m)| (r.ln(), m.ln() / r)).collect();
    let growth_slope = if pts.len() >= 2 { crate::spectrum::fit_slope(&pts) } else { 0.0 };
    let ratio_of = |m: f64| if bound_rhs > 0.0 { m / bound_rhs } else { 0.0 };
    Ok(MomentReport {
        q,
        samples,
        mean_sq,
        mean_sq_half,
        bound_rhs,
        ratio: ratio_of(mean_sq),
        ratio_half: ratio_of(mean_sq_half),
        rho_moments,
        growth_slope,
    })
}

/// Exponents of `‖t^γ (I-Δ)^{σ/2} e^{tΔ} u‖_{L^{θ₃}(0,T; L^{θ₂})}`.
#[derive(Debug, Clone, Copy)]
pub struct SmoothingNorm {
    pub gamma: f64,
    pub sigma: f64,
    pub theta2: f64,
    pub theta3: f64,
    /// `u₀ ∈ H^{-α}`.
    pub alpha: f64,
    pub horizon: f64,
    pub quad_nodes: usize,
}

impl SmoothingNorm {
    pub fn validate(&self) -> Result<()> {
        let lhs = (self.sigma + self.alpha - 2.0 * self.gamma) * self.theta3;
        if !(lhs < 2.0) {
            return gate(format!("integrability (sigma+alpha-2 gamma) theta3 < 2 violated: left side {lhs}"));
        }
        if !(self.theta3 >= 2.0 && self.theta2 >= self.theta3) {
            return gate(format!("need theta2 >= theta3 >= 2, got theta2={}, theta3={}", self.theta2, self.theta3));
        }
        if !(self.horizon > 0.0 && self.alpha >= 0.0 && self.quad_nodes >= 2) {
            return gate("need T > 0, alpha >= 0 and at least 2 quadrature nodes");
        }
        Ok(())
    }

    /// The space-time norm of `e^{tΔ} u`, by Gauss–Legendre after `t = T s^κ`,
    /// which absorbs the power weight at `t = 0`.
    pub fn evaluate(&self, u: &LatticeField) -> Result<f64> {
        self.evaluate_up_to(u, self.horizon)
    }

    pub fn evaluate_up_to(&self, u: &LatticeField, horizon: f64) -> Result<f64> {
        let beta = self.gamma * self.theta3;
        let kappa = if beta < 0.0 { 1.0 / (beta + 1.0) } else { 1.0 };
        let gl = GaussLegendre::new(self.quad_nodes);
        let base = u.bessel(self.sigma);
        let mut sum = 0.0;
        for (x, w) in gl.nodes.iter().zip(&gl.weights) {
            let s = 0.5 * (x + 1.0);
            let t = horizon * s.powf(kappa);
            let jac = 0.5 * w * kappa * horizon * s.powf(kappa - 1.0);
            let norm = base.heat(t).lp_norm(self.theta2)?;
            sum += jac * t.powf(beta) * norm.powf(self.theta3);
        }
        Ok(sum.powf(1.0 / self.theta3))
    }
}

#[derive(Debug, Clone)]
pub struct QuadraticTail {
    /// Least-squares line `ln P ≈ a - bλ²` through the fit window.
    pub a: f64,
    pub b: f64,
    /// Smallest intercept putting `envelope_a - bλ²` above every resolved point past the median.
    pub envelope_a: f64,
    /// `b > 0` and the dominating curve sits within one decade of the least-squares line.
    pub dominated: bool,
    /// Largest excess of the unresolved extremes (fewer than five exceedances) over the envelope.
    pub extreme_excess: f64,
    pub fit_points: usize,
}

#[derive(Debug, Clone)]
pub struct TailReport {
    pub norms: Vec<f64>,
    /// `(λ, P(norm ≥ λ))` at every sample value.
    pub survival: Vec<(f64, f64)>,
    pub fit: Option<QuadraticTail>,
    pub mean_norm: f64,
    /// Mean norm with the horizon cut to `T/4`.
    pub mean_norm_quarter: f64,
    pub h_minus_alpha: f64,
}

pub fn smoothing_tail_estimate(
    u0: &LatticeField,
    bp: &BlockPartition,
    norm: SmoothingNorm,
    samples: usize,
    seed: u64,
) -> Result<TailReport> {
    norm.validate()?;
    if samples < 20 {
        return gate("tail estimate needs at least 20 samples");
    }
    let pairs: Vec<(f64, f64)> = (0..samples)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let h = BlockCoefficients::sample(bp, &mut rng);
            let u = randomize_with(u0, bp, &h)?;
            Ok((norm.evaluate(&u)?, norm.evaluate_up_to(&u, 0.25 * norm.horizon)?))
        })
        .collect::<Result<_>>()?;
    let norms: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let mean_norm = norms.iter().sum::<f64>() / samples as f64;
    let mean_norm_quarter = pairs.iter().map(|p| p.1).sum::<f64>() / samples as f64;
    let mut sorted = norms.clone();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let survival: Vec<(f64, f64)> =
        sorted.iter().enumerate().map(|(i, &l)| (l, (i + 1) as f64 / samples as f64)).rev().collect();
    Ok(TailReport {
        fit: fit_quadratic_tail(&survival, samples),
        norms,
        survival,
        mean_norm,
        mean_norm_quarter,
        h_minus_alpha: u0.sobolev_norm(-norm.alpha),
    })
}

/// `ln P = a - bλ²` by least squares over the outer decile, then the intercept raised until the
/// curve covers every point past the median. Points with fewer than five exceedances are too
/// noisy to fit or bound and are only reported.
pub fn fit_quadratic_tail(survival: &[(f64, f64)], samples: usize) -> Option<QuadraticTail> {
    let beyond: Vec<(f64, f64)> = survival.iter().copied().filter(|&(l, p)| p <= 0.5 && l > 0.0).collect();
    let min_p = 4.5 / samples as f64;
    let pts: Vec<(f64, f64)> =
        beyond.iter().filter(|s| s.1 >= min_p && s.1 <= 0.1).map(|&(l, p)| (l * l, p.ln())).collect();
    if pts.len() < 3 || pts.iter().all(|p| p.0 == pts[0].0) {
        return None;
    }
    let slope = crate::spectrum::fit_slope(&pts);
    let n = pts.len() as f64;
    let a = pts.iter().map(|p| p.1 - slope * p.0).sum::<f64>() / n;
    let b = -slope;
    let lift = |&(l, p): &(f64, f64)| p.ln() + b * l * l;
    let envelope_a = beyond.iter().filter(|s| s.1 >= min_p).map(lift).fold(f64::MIN, f64::max);
    let extreme_excess = beyond.iter().filter(|s| s.1 < min_p).map(lift).fold(f64::MIN, f64::max) - envelope_a;
    let dominated = b > 0.0 && envelope_a - a <= std::f64::consts::LN_10;
    Some(QuadraticTail { a, b, envelope_a, dominated, extreme_excess: extreme_excess.max(0.0), fit_points: pts.len() })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegularityCase {
    /// `q ≥ 2`: `u₀ ∈ L² ∩ L^q`.
    Lebesgue,
    /// `q < 2`: `u₀ ∈ M^{q,q} ⊂ H^{-s₀}`.
    Negative,
}

/// Exponents of the fixed-point argument for randomized data.
#[derive(Debug, Clone)]
pub struct RandomDataParams {
    pub d: usize,
    pub p: f64,
    pub q: f64,
    pub qc: f64,
    pub r: f64,
    pub case: RegularityCase,
    pub s0: f64,
    pub eps_prime: f64,
    pub alpha_prime: f64,
    pub gamma: f64,
    pub gamma_prime: f64,
    /// Time powers in the self-map and contraction clauses.
    pub self_map_power: f64,
    pub contraction_power: f64,
    /// Exponent of `T` in the success bound.
    pub kappa: f64,
    /// Set when `d < 3`: outside the theorem, kept for fast diagnostics.
    pub low_dimensional: bool,
}

pub fn random_data_gate(d: usize, p: f64, q: f64, allow_low_dim: bool) -> Result<RandomDataParams> {
    let df = d as f64;
    if d < 3 && !allow_low_dim {
        return gate(format!("d >= 3 required, got d={d}"));
    }
    let pmin = 0.5 + (0.25 + 4.0 / df).sqrt();
    if !(p > pmin) {
        return gate(format!("p > 1/2 + sqrt(1/4 + 4/d) = {pmin} violated: p={p}"));
    }
    let qc = df * (p - 1.0) / 2.0;
    let qmin = 2.0 - 8.0 / (4.0 + df * p);
    if !(q > qmin && q < qc) {
        return gate(format!("2 - 8/(4+dp) < q < q_c violated: {qmin} < {q} < {qc}"));
    }
    let pc = p / (p - 1.0);
    let pm = p.max(pc);
    let r = qc * pm;
    let self_exp = 1.0 - df * (p - 1.0) / (2.0 * (r - p + 1.0));
    let kappa_rhs = 2.0 / (p - 1.0) - df / (r - p + 1.0);
    let mut out = RandomDataParams {
        d,
        p,
        q,
        qc,
        r,
        case: RegularityCase::Lebesgue,
        s0: 0.0,
        eps_prime: 0.0,
        alpha_prime: 0.0,
        gamma: 0.0,
        gamma_prime: 0.0,
        self_map_power: 0.5,
        contraction_power: self_exp,
        kappa: 1.0 / p,
        low_dimensional: d < 3,
    };
    if q >= 2.0 {
        if !(self_exp > 0.0) {
            return gate(format!("contraction time power 1 - d(p-1)/(2(r-p+1)) = {self_exp} not positive"));
        }
        return Ok(out);
    }
    let s0 = df * (2.0 - q) / (2.0 * q);
    if !(s0 < 2.0 / p) {
        return gate(format!("s0 = d(2-q)/(2q) = {s0} not below 2/p = {}", 2.0 / p));
    }
    let alpha = 2.0;
    let ap = pc.max(2.0 / (p - 1.0));
    let room = 2.0 - s0 * (p - 1.0) - 2.0 / pm;
    let eps_max = (room / (2.0 * ap)).min(ap * (2.0 - s0 * (p - 1.0))).min(alpha * (2.0 - s0 * p) / 2.0);
    if !(eps_max > 0.0) {
        return gate(format!("no admissible eps': upper bound {eps_max}"));
    }
    let eps = 0.5 * eps_max;
    let gamma = (s0 * p - 1.0 + eps) / (2.0 * p);
    let gamma_prime = (ap - 1.0) / (ap * (p - 1.0)) - (ap * (2.0 - s0 * (p - 1.0)) - eps) / (2.0 * ap * (p - 1.0));
    let checks = [
        ("r >= alpha'(p-1) >= 2", r >= ap * (p - 1.0) && ap * (p - 1.0) >= 2.0),
        // time singularity of the contraction integral, with the Hölder exponent alpha of its display;
        // the alpha' form equals 1 identically once p >= 2
        ("d(p-1)alpha/(2r(alpha-1)) < 1", df * (p - 1.0) * alpha / (2.0 * r * (alpha - 1.0)) < 1.0),
        ("alpha'/(alpha'-1) gamma'(p-1) < 1", ap / (ap - 1.0) * gamma_prime * (p - 1.0) < 1.0),
        ("(s0 - 2 gamma') alpha'(p-1) < 2", (s0 - 2.0 * gamma_prime) * ap * (p - 1.0) < 2.0),
        ("(s0 - 2 gamma) 2p < 2", (s0 - 2.0 * gamma) * 2.0 * p < 2.0),
        ("2 gamma p < 1", 2.0 * gamma * p < 1.0),
    ];
    if let Some((name, _)) = checks.iter().find(|c| !c.1) {
        return gate(format!("weighted-norm exponent condition {name} fails"));
    }
    out.case = RegularityCase::Negative;
    out.s0 = s0;
    out.eps_prime = eps;
    out.alpha_prime = ap;
    out.gamma = gamma;
    out.gamma_prime = gamma_prime;
    out.self_map_power = (2.0 - s0 * p) / 4.0;
    out.contraction_power = room / 4.0;
    out.kappa = (1.0 / p).min(kappa_rhs);
    Ok(out)
}

/// `(1/p, 2/(p-1) - d/(r-p+1))` with `r = q_c max(p, p')`; the first never exceeds the second.
pub fn kappa_exponents(d: usize, p: f64) -> (f64, f64) {
    let qc = d as f64 * (p - 1.0) / 2.0;
    let r = qc * p.max(p / (p - 1.0));
    (1.0 / p, 2.0 / (p - 1.0) - d as f64 / (r - p + 1.0))
}

#[derive(Debug, Clone)]
pub struct MildConfig {
    pub horizon: f64,
    /// Uniform steps of the solve on `[0, 𝒯]`.
    pub steps: usize,
    /// Geometric monitor mesh from `horizon·10^{-decades}` to `horizon`.
    pub monitor_points: usize,
    pub monitor_decades: f64,
    /// `C` in the clauses and the ball radius `M = (2C)^{-1/(p-1)}`.
    pub scheme_constant: f64,
    pub picard_tol: f64,
    pub picard_max_iter: usize,
    pub picard_min_iter: usize,
}

impl Default for MildConfig {
    fn default() -> Self {
        MildConfig {
            horizon: 1.0,
            steps: 32,
            monitor_points: 48,
            monitor_decades: 4.0,
            scheme_constant: 1.0,
            picard_tol: 1e-10,
            picard_max_iter: 60,
            picard_min_iter: 3,
        }
    }
}

impl MildConfig {
    pub fn ball_radius(&self, p: f64) -> f64 {
        (2.0 * self.scheme_constant).powf(-1.0 / (p - 1.0))
    }

    pub fn monitor_mesh(&self) -> Vec<f64> {
        let m = self.monitor_points.max(2);
        let mut t = vec![0.0];
        t.extend((0..m).map(|i| self.horizon * 10f64.powf(-self.monitor_decades * (1.0 - i as f64 / (m - 1) as f64))));
        t
    }
}

/// Space-time norms of `ẑ = e^{tΔ} u` accumulated on `times` (right-endpoint values,
/// power weights integrated exactly), one column per clause.
pub fn free_flow_monitor(u: &LatticeField, times: &[f64], params: &RandomDataParams) -> Result<PathMonitor> {
    let (p, r) = (params.p, params.r);
    let (w0, e0, w1, e1) = match params.case {
        RegularityCase::Lebesgue => (0.0, 2.0 * p, 0.0, r),
        RegularityCase::Negative => {
            let e1 = params.alpha_prime * (p - 1.0);
            (2.0 * p * params.gamma, 2.0 * p, params.gamma_prime * e1, e1)
        }
    };
    let mut acc = [0.0f64; 2];
    let mut rows = vec![vec![0.0, 0.0]];
    for k in 1..times.len() {
        let z = u.heat(times[k]).physical();
        let n_rp = u.torus.real_lp(&z, r * p)?;
        let n_r = u.torus.real_lp(&z, r)?;
        let seg = |w: f64| (times[k].powf(w + 1.0) - times[k - 1].powf(w + 1.0)) / (w + 1.0);
        acc[0] += n_rp.powf(e0) * seg(w0);
        acc[1] += n_r.powf(e1) * seg(w1);
        rows.push(vec![acc[0].powf(1.0 / e0), acc[1].powf(1.0 / e1)]);
    }
    Ok(PathMonitor::from_norms(vec![e0, e1], times.to_vec(), rows))
}

pub fn fixed_point_clauses(params: &RandomDataParams, cfg: &MildConfig) -> Vec<StopClause<'static>> {
    let (p, c) = (params.p, cfg.scheme_constant);
    let m = cfg.ball_radius(p);
    let (a, b) = (params.self_map_power, params.contraction_power);
    vec![
        StopClause::new("self-map", 0.5 * m, move |s: &MonitorState| c * s.t.powf(a) * s.norms[0].powf(p)),
        StopClause::new("contraction", 0.25, move |s: &MonitorState| c * s.t.powf(b) * s.norms[1].powf(p - 1.0)),
    ]
}

/// `𝒯` for one datum.
pub fn random_stopping_time(u: &LatticeField, params: &RandomDataParams, cfg: &MildConfig) -> Result<StoppingTimeRecord> {
    let mon = free_flow_monitor(u, &cfg.monitor_mesh(), params)?;
    stopping_time(&mon, &fixed_point_clauses(params, cfg), cfg.horizon)
}

#[derive(Debug, Clone)]
pub struct Certificate {
    pub iterations: usize,
    pub residuals: Vec<f64>,
    pub ratios: Vec<f64>,
    pub contraction_ok: bool,
    pub ball_radius: f64,
    /// `sup_t ‖v(t)‖_{L^r} ≤ M`.
    pub self_map_ok: bool,
    pub sup_lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitialGuess {
    Zero,
    /// Constant-in-time field of `L^r` norm `M` along `u₀^ω`.
    BallBoundary,
}

#[derive(Debug, Clone)]
pub struct MildSolution {
    pub times: Vec<f64>,
    /// `v = u - ẑ` in physical space at each time.
    pub v: Vec<Vec<f64>>,
    pub stop: StoppingTimeRecord,
    pub certificate: Certificate,
    /// `sup_t ‖v(t)‖_{L^q}`.
    pub sup_lq: f64,
    /// Modulus of continuity of `u = ẑ + v` in `L^q`.
    pub continuity: ContinuityReport,
}

const ROUNDOFF_FLOOR: f64 = 1e-13;

pub fn mild_fixed_point(datum: &RandomizedDatum, params: &RandomDataParams, cfg: &MildConfig) -> Result<MildSolution> {
    mild_fixed_point_from(datum, params, cfg, InitialGuess::Zero)
}

/// Picard iteration of `Γ[v](t) = ∫₀ᵗ e^{(t-s)Δ} n(v + ẑ) ds` on `[0, 𝒯]`, discretized by
/// the exponential trapezoid on a uniform mesh.
pub fn mild_fixed_point_from(
    datum: &RandomizedDatum,
    params: &RandomDataParams,
    cfg: &MildConfig,
    guess: InitialGuess,
) -> Result<MildSolution> {
    if cfg.steps < 8 {
        return gate("fixed point needs at least 8 steps");
    }
    let u = &datum.result;
    let torus = u.torus.clone();
    let (p, r, q) = (params.p, params.r, params.q);
    let stop = random_stopping_time(u, params, cfg)?;
    let t_end = stop.value;
    let times: Vec<f64> = (0..=cfg.steps).map(|k| t_end * k as f64 / cfg.steps as f64).collect();
    let h = t_end / cfg.steps as f64;
    let z: Vec<Vec<f64>> = times.iter().map(|&t| u.heat(t).physical()).collect();
    let decay: Vec<f64> = torus.xi_sq().iter().map(|&x| (-x * h).exp()).collect();
    let m = cfg.ball_radius(p);
    let npts = torus.len();

    let mut v: Vec<Vec<f64>> = match guess {
        InitialGuess::Zero => vec![vec![0.0; npts]; times.len()],
        InitialGuess::BallBoundary => {
            let u0 = u.physical();
            let nr = torus.real_lp(&u0, r)?;
            let g = if nr > 0.0 { u0.iter().map(|x| x * m / nr).collect() } else { vec![0.0; npts] };
            vec![g; times.len()]
        }
    };
    let forcing = |vk: &[f64], zk: &[f64]| -> Vec<Complex64> {
        let vals: Vec<f64> = vk.iter().zip(zk).map(|(a, b)| {
            let x = a + b;
            x.abs().powf(p - 1.0) * x
        }).collect();
        torus.analyze(&vals)
    };
    let mut residuals = Vec::new();
    let mut ratios = Vec::new();
    let mut hot = 0;
    for it in 1..=cfg.picard_max_iter {
        let mut next = Vec::with_capacity(times.len());
        next.push(vec![0.0; npts]);
        let mut acc = vec![Complex64::default(); npts];
        let mut nk = forcing(&v[0], &z[0]);
        for k in 0..cfg.steps {
            for j in 0..npts {
                acc[j] = (acc[j] + nk[j] * (0.5 * h)) * decay[j];
            }
            nk = forcing(&v[k + 1], &z[k + 1]);
            for j in 0..npts {
                acc[j] += nk[j] * (0.5 * h);
            }
            next.push(torus.synthesize(&acc).into_iter().map(|c| c.re).collect());
        }
        let mut res = 0.0f64;
        for (a, b) in next.iter().zip(&v) {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            res = res.max(torus.real_lp(&diff, r)?);
        }
        if !res.is_finite() {
            return numerical(format!("Picard iterate {it} is not finite"));
        }
        if let Some(&prev) = residuals.last() {
            if prev > ROUNDOFF_FLOOR * m.max(1.0) {
                let ratio: f64 = res / prev;
                ratios.push(ratio);
                hot = if ratio > 0.9 { hot + 1 } else { 0 };
                if hot >= 3 {
                    return numerical(format!("Picard ratios above 0.9 for 3 iterates: {ratios:?}"));
                }
            }
        }
        residuals.push(res);
        v = next;
        if res < cfg.picard_tol && (it >= cfg.picard_min_iter || res <= ROUNDOFF_FLOOR * m.max(1.0)) {
            let mut sup_lr = 0.0f64;
            let mut sup_lq = 0.0f64;
            for vk in &v {
                sup_lr = sup_lr.max(torus.real_lp(vk, r)?);
                sup_lq = sup_lq.max(torus.real_lp(vk, q)?);
            }
            let continuity = continuity_from_increments(&times, |i, j| {
                let diff: Vec<f64> = (0..npts).map(|x| (z[j][x] + v[j][x]) - (z[i][x] + v[i][x])).collect();
                torus.real_lp(&diff, q)
            })?;
            let certificate = Certificate {
                iterations: it,
                contraction_ok: ratios.iter().all(|&x| x <= 0.6),
                residuals,
                ratios,
                ball_radius: m,
                self_map_ok: sup_lr <= m,
                sup_lr,
            };
            return Ok(MildSolution { times, v, stop, certificate, sup_lq, continuity });
        }
    }
    numerical(format!("Picard did not reach {} in {} iterations: {residuals:?}", cfg.picard_tol, cfg.picard_max_iter))
}

/// Smallest `C = 2^j` in `[2^lo, 2^hi]` for which every datum yields a certified fixed point.
pub fn calibrate_scheme_constant(
    data: &[RandomizedDatum],
    params: &RandomDataParams,
    cfg: &MildConfig,
    lo: i32,
    hi: i32,
) -> Result<f64> {
    for j in lo..=hi {
        let c = 2f64.powi(j);
        let trial = MildConfig { scheme_constant: c, ..cfg.clone() };
        let ok = data.iter().all(|d| {
            mild_fixed_point(d, params, &trial)
                .map(|s| s.certificate.contraction_ok && s.certificate.self_map_ok)
                .unwrap_or(false)
        });
        if ok {
            return Ok(c);
        }
    }
    numerical(format!("no scheme constant in [2^{lo}, 2^{hi}] certifies the calibration set"))
}

#[derive(Debug, Clone, Copy)]
pub struct SuccessFit {
    pub kappa: f64,
    pub slope: f64,
    pub intercept: f64,
    pub points: usize,
}

impl SuccessFit {
    /// `‖u₀‖²/C²`-like scale: `-1/slope` in `ln(1 - P̂) ≈ a - T^{-κ}/scale`.
    pub fn scale(&self) -> f64 {
        -1.0 / self.slope
    }
}

#[derive(Debug, Clone)]
pub struct SuccessCurve {
    pub t_list: Vec<f64>,
    /// Empirical `P(𝒯 ≥ T)`.
    pub p_emp: Vec<f64>,
    pub stops: Vec<f64>,
    pub kappa: f64,
    pub monotone: bool,
    /// Line through `ln(1 - P̂)` against `T^{-κ}` on the small-`T` side.
    pub fit: Option<SuccessFit>,
    /// Same with the exponent `2/p` of the Gaussian tail of `‖u₀^ω‖^p`.
    pub effective_fit: Option<SuccessFit>,
}

impl SuccessCurve {
    /// Least squares over `T` with `P̂ ≥ 1/2` and at least five failures.
    pub fn fit_with(&self, kappa: f64) -> Option<SuccessFit> {
        let n = self.stops.len() as f64;
        let pts: Vec<(f64, f64)> = self
            .t_list
            .iter()
            .zip(&self.p_emp)
            .filter(|(_, &pe)| pe >= 0.5 && (1.0 - pe) * n >= 4.5)
            .map(|(&t, &pe)| (t.powf(-kappa), (1.0 - pe).ln()))
            .collect();
        if pts.len() < 2 {
            return None;
        }
        let slope = crate::spectrum::fit_slope(&pts);
        let intercept = pts.iter().map(|p| p.1 - slope * p.0).sum::<f64>() / pts.len() as f64;
        Some(SuccessFit { kappa, slope, intercept, points: pts.len() })
    }
}

pub const MIN_SUCCESS_ENSEMBLE: usize = 100;

pub fn success_probability(
    u0: &LatticeField,
    bp: &BlockPartition,
    params: &RandomDataParams,
    cfg: &MildConfig,
    t_list: &[f64],
    ensemble: usize,
    seed: u64,
) -> Result<SuccessCurve> {
    if ensemble < MIN_SUCCESS_ENSEMBLE {
        return gate(format!("success curve needs an ensemble of at least {MIN_SUCCESS_ENSEMBLE}"));
    }
    if t_list.is_empty() || t_list.iter().any(|&t| !(t > 0.0 && t <= cfg.horizon)) {
        return gate("every T must lie in (0, horizon]");
    }
    let stops: Vec<f64> = (0..ensemble)
        .into_par_iter()
        .map(|i| {
            let mut rng = path_rng(seed, i as u64);
            let h = BlockCoefficients::sample(bp, &mut rng);
            let u = randomize_with(u0, bp, &h)?;
            Ok(random_stopping_time(&u, params, cfg)?.value)
        })
        .collect::<Result<_>>()?;
    let mut t_sorted = t_list.to_vec();
    t_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let p_emp: Vec<f64> =
        t_sorted.iter().map(|&t| stops.iter().filter(|&&s| s >= t).count() as f64 / ensemble as f64).collect();
    let monotone = p_emp.windows(2).all(|w| w[1] <= w[0]);
    let mut curve =
        SuccessCurve { t_list: t_sorted, p_emp, stops, kappa: params.kappa, monotone, fit: None, effective_fit: None };
    curve.fit = curve.fit_with(params.kappa);
    curve.effective_fit = curve.fit_with(2.0 / params.p);
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_band_limited(t: &Arc<Torus>, seed: u64, kmax: f64) -> LatticeField {
        let mut rng = path_rng(seed, 99);
        let vals: Vec<f64> = (0..t.len()).map(|_| rng.sample(StandardNormal)).collect();
        let f = LatticeField::from_physical(t.clone(), &vals).unwrap();
        f.radial_multiplier(|x| if x <= kmax * kmax { 1.0 } else { 0.0 })
    }

    #[test]
    fn fft_round_trip_and_parseval() {
        for d in 1..=3 {
            let t = Torus::new(d, 4.0, 8).unwrap();
            let f = random_band_limited(&t, d as u64, 2.5);
            let phys = f.physical();
            let back = LatticeField::from_physical(t.clone(), &phys).unwrap();
            let err = back.spectrum.iter().zip(&f.spectrum).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
            assert!(err < 1e-13);
            let l2 = t.real_lp(&phys, 2.0).unwrap();
            assert!((l2 - f.l2_norm()).abs() < 1e-10 * l2.max(1.0));
            assert!(f.imaginary_residue() < 1e-12 && f.conjugate_defect() < 1e-13);
        }
        // a single cosine mode
        let t = Torus::new(2, std::f64::consts::PI, 16).unwrap();
        let f = LatticeField::from_fn(t.clone(), |x| (2.0 * x[0] + 3.0 * x[1]).cos());
        let i = t.index_of_frequency(&[2, 3]).unwrap();
        assert!((f.spectrum[i].norm() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn partition_of_unity() {
        let t = Torus::new(3, 8.0, 16).unwrap();
        let bp = build_block_partition(t.clone(), 4).unwrap();
        let mut rng = path_rng(1, 1);
        for _ in 0..1000 {
            let xi: Vec<f64> = (0..3).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let mut s = 0.0;
            for b in 0..bp.n_blocks() {
                s += bp.psi(&bp.block(b), &xi);
            }
            assert!((s - 1.0).abs() < 1e-12);
            let k: Vec<i64> = (0..3).map(|_| rng.gen_range(-4..=4)).collect();
            let nk: Vec<i64> = k.iter().map(|v| -v).collect();
            let nxi: Vec<f64> = xi.iter().map(|v| -v).collect();
            assert!((bp.psi(&k, &xi) - bp.psi(&nk, &nxi)).abs() < 1e-12);
            // support inside k + [-1, 1]^d
            if xi.iter().zip(&k).any(|(x, &l)| (x - l as f64).abs() >= 1.0) {
                assert_eq!(bp.psi(&k, &xi), 0.0);
            }
        }
        assert_eq!(bp.psi(&[0, 0, 0], &[0.0, 0.0, 0.0]), 1.0);
        for idx in 0..t.len() {
            if t.xi(idx).iter().all(|x| x.abs() <= 3.0) {
                assert!((bp.coverage(idx) - 1.0).abs() < 1e-12);
            }
        }
        assert!(build_block_partition(t, 0).is_err());
    }

    #[test]
    fn projections() {
        let t = Torus::new(2, 6.0, 32).unwrap();
        let bp = build_block_partition(t.clone(), 8).unwrap();
        let f = random_band_limited(&t, 4, 4.0);
        let mut sum = LatticeField::zeros(t.clone());
        for b in 0..bp.n_blocks() {
            let pk = project_block(&f, &bp, &bp.block(b)).unwrap();
            assert!(pk.l2_norm() <= f.l2_norm() * (1.0 + 1e-12));
            sum = sum.axpy(1.0, &pk);
        }
        let err = sum.axpy(-1.0, &f).physical().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-10);
        // single node: P_k f = ψ_k(ξ*) f
        let idx = t.index_of_frequency(&[3, -2]).unwrap();
        let mut spec = vec![Complex64::default(); t.len()];
        spec[idx] = Complex64::new(1.0, 0.5);
        let g = LatticeField::from_spectrum(t.clone(), spec).unwrap();
        let pk = project_block(&g, &bp, &[1, -1]).unwrap();
        let want = bp.psi(&[1, -1], &t.xi(idx));
        assert!((pk.spectrum[idx] - g.spectrum[idx] * want).norm() < 1e-15);
        assert!(project_block(&g, &bp, &[9, 0]).is_err());
    }

    #[test]
    fn randomization_identities() {
        let t = Torus::new(2, 6.0, 32).unwrap();
        let bp = build_block_partition(t.clone(), 8).unwrap();
        for seed in 0..10 {
            let f = random_band_limited(&t, 100 + seed, 4.0);
            let ones = randomize_with(&f, &bp, &BlockCoefficients::ones(&bp)).unwrap();
            let err = ones.axpy(-1.0, &f).physical().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10);
            let dat = randomize(&f, &bp, seed).unwrap();
            assert!(dat.result.imaginary_residue() < 1e-12);
            let h = &dat.coefficients;
            assert_eq!(h.get(&bp, &[0, 0]).unwrap().im, 0.0);
            assert_eq!(h.get(&bp, &[2, -3]).unwrap(), h.get(&bp, &[-2, 3]).unwrap().conj());
            // heat flow commutes with the randomization
            let lhs = dat.result.heat(0.3);
            let mut rhs = LatticeField::zeros(t.clone());
            for b in 0..bp.n_blocks() {
                let pk = project_block(&f, &bp, &bp.block(b)).unwrap().heat(0.3);
                let hk = h.values[b];
                let spec = pk.spectrum.iter().map(|c| c * hk).collect();
                rhs = rhs.axpy(1.0, &LatticeField::from_spectrum(t.clone(), spec).unwrap());
            }
            let err = lhs.axpy(-1.0, &rhs).physical().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(err < 1e-10);
        }
        let zero = LatticeField::zeros(t.clone());
        assert_eq!(randomize(&zero, &bp, 3).unwrap().result.l2_norm(), 0.0);
        // mass beyond the block table is rejected
        let small = build_block_partition(t.clone(), 2).unwrap();
        assert!(randomize(&random_band_limited(&t, 5, 4.0), &small, 0).is_err());
    }

    #[test]
    fn modulation_norms() {
        let t = Torus::new(2, 6.0, 32).unwrap();
        let bp = build_block_partition(t.clone(), 8).unwrap();
        assert_eq!(modulation_norm(&LatticeField::zeros(t.clone()), &bp, 2.0, 2.0, 0.0).unwrap(), 0.0);
        let f = random_band_limited(&t, 8, 4.0);
        let a = modulation_norm(&f, &bp, 1.5, 1.5, 0.5).unwrap();
        let b = modulation_norm(&f.scaled(-2.5), &bp, 1.5, 1.5, 0.5).unwrap();
        assert!((b - 2.5 * a).abs() < 1e-12 * b);
        // M^{2,2} and L² are equivalent: Σψ_k² lies between 1/2^d and 1
        let m22 = modulation_norm(&f, &bp, 2.0, 2.0, 0.0).unwrap();
        let l2 = f.l2_norm();
        assert!(m22 <= l2 * (1.0 + 1e-12) && m22 >= l2 / 2.0);
        // spectrum inside the core of block 0
        let core = f.radial_multiplier(|x| if x <= 0.2 { 1.0 } else { 0.0 });
        let m = modulation_norm(&core, &bp, 3.0, 1.0, 0.0).unwrap();
        assert!((m - core.lp_norm(3.0).unwrap()).abs() < 1e-12 * m);
        assert!(modulation_norm(&f, &bp, 0.5, 2.0, 0.0).is_err());
    }

    #[test]
    fn gates() {
        let g = random_data_gate(3, 3.0, 1.5, false).unwrap();
        assert_eq!(g.case, RegularityCase::Negative);
        assert!((g.s0 - 0.5).abs() < 1e-15 && g.s0 < 2.0 / 3.0);
        assert!((g.r - 9.0).abs() < 1e-12);
        assert!(random_data_gate(3, 3.0, 1.3, false).is_err());
        assert!(random_data_gate(3, 1.7, 1.2, false).is_err());
        assert!(random_data_gate(1, 5.0, 1.5, false).is_err());
        assert!(random_data_gate(1, 5.0, 1.5, true).unwrap().low_dimensional);
        let g2 = random_data_gate(3, 3.0, 2.0, false).unwrap();
        assert_eq!(g2.case, RegularityCase::Lebesgue);
        assert!((g2.kappa - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_datum_fixed_point() {
        let t = Torus::new(3, 4.0, 8).unwrap();
        let bp = build_block_partition(t.clone(), 4).unwrap();
        let params = random_data_gate(3, 3.0, 2.0, false).unwrap();
        let cfg = MildConfig { steps: 8, monitor_points: 8, ..Default::default() };
        let dat = randomize(&LatticeField::zeros(t.clone()), &bp, 1).unwrap();
        let sol = mild_fixed_point(&dat, &params, &cfg).unwrap();
        assert_eq!(sol.stop.trigger, "horizon");
        assert_eq!(sol.stop.value, cfg.horizon);
        assert!(sol.v.iter().all(|v| v.iter().all(|x| *x == 0.0)));
    }

    #[test]
    fn quadratic_tail_fit() {
        // exact survival of a Rayleigh variable: P(λ) = exp(-λ²/2)
        let n = 4000;
        let survival: Vec<(f64, f64)> = (1..=n)
            .rev()
            .map(|i| {
                let p = i as f64 / n as f64;
                ((-2.0 * p.ln()).sqrt(), p)
            })
            .collect();
        let fit = fit_quadratic_tail(&survival, n).unwrap();
        assert!((fit.b - 0.5).abs() < 1e-9 && fit.a.abs() < 1e-9);
        assert!(fit.dominated && fit.extreme_excess < 1e-9);
        // survival that does not decay in λ² has no positive b
        let flat: Vec<(f64, f64)> =
            (1..=n).rev().map(|i| (2.0 - (i as f64 / n as f64).ln().abs().sqrt() * 1e-3, i as f64 / n as f64)).collect();
        assert!(!fit_quadratic_tail(&flat, n).unwrap().dominated);
        assert!(fit_quadratic_tail(&[(0.0, 1.0); 50], 50).is_none());
    }

    #[test]
    fn kappa_inequality() {
        let mut count = 0;
        for d in 3..=7 {
            for p in [1.5f64, 2.0, 3.0, 5.0] {
                let pmin = 0.5 + (0.25 + 4.0 / d as f64).sqrt();
                let p = p.max(pmin + 0.05);
                let (lhs, rhs) = kappa_exponents(d, p);
                assert!(lhs <= rhs + 1e-12, "d={d}, p={p}: {lhs} > {rhs}");
                count += 1;
            }
        }
        assert_eq!(count, 20);
    }

    #[test]
    fn success_fit_on_exact_curve() {
        let ts: Vec<f64> = (0..20).map(|i| 10f64.powf(-3.0 + 0.15 * i as f64)).collect();
        let p_emp: Vec<f64> = ts.iter().map(|t| 1.0 - 0.5 * (-0.7 * t.powf(-0.5) + 0.7).exp().min(1.0)).collect();
        let curve = SuccessCurve {
            t_list: ts,
            p_emp,
            stops: vec![0.0; 100_000],
            kappa: 0.5,
            monotone: true,
            fit: None,
            effective_fit: None,
        };
        let fit = curve.fit_with(0.5).unwrap();
        assert!((fit.slope + 0.7).abs() < 1e-9 && (fit.scale() - 1.0 / 0.7).abs() < 1e-8);
    }
}
