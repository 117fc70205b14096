use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::dataset::{Dataset, Oracle};
use crate::error::{Error, Result};
use crate::numcore::{seeded_rng, DetRng, RngExt};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DgpKind {
    /// `Y(a) = U + sin(w'X) + a·(v'X) + a` with correlated Gaussian `X`.
    SyntheticD1,
    /// Response-surface-B style: `Y(0) ~ N(exp((X+W)β), 1)`, `Y(1) ~ N(Xβ − ω, 1)`.
    IhdpB,
    /// `Y(a) ~ N(2a − 1, noise_scale²)`, independent of `X`.
    GaussianOracle,
    /// `Y ≡ constant` in both arms.
    ConstantOracle,
}

impl DgpKind {
    pub fn default_dim(self) -> usize {
        match self {
            DgpKind::SyntheticD1 => 30,
            DgpKind::IhdpB => IHDP_DIM,
            DgpKind::GaussianOracle | DgpKind::ConstantOracle => 5,
        }
    }

    pub fn default_noise(self) -> f64 {
        match self {
            DgpKind::SyntheticD1 | DgpKind::IhdpB => 1.0,
            DgpKind::GaussianOracle => 0.5,
            DgpKind::ConstantOracle => 0.0,
        }
    }
}

const IHDP_CONTINUOUS: usize = 6;
const IHDP_DIM: usize = 25;
const IHDP_OFFSET: f64 = 0.5;
const IHDP_TREATED_EFFECT: f64 = 4.0;
const IHDP_BETA_VALUES: [f64; 5] = [0.0, 0.1, 0.2, 0.3, 0.4];
const IHDP_BETA_PROBS: [f64; 5] = [0.6, 0.1, 0.1, 0.1, 0.1];
const LATENT_FACTORS: usize = 3;

/// Description of a generated dataset. Generation is a pure function of it.
///
/// `seed` drives unit-level draws; `structure_seed` fixes the coefficient
/// vectors and covariance, so different `seed`s sample the same population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DgpSpec {
    pub kind: DgpKind,
    pub n: usize,
    pub d: Option<usize>,
    pub seed: u64,
    pub structure_seed: u64,
    pub selection_strength: f64,
    pub noise_scale: Option<f64>,
    pub constant: f64,
}

impl Default for DgpSpec {
    fn default() -> Self {
        Self {
            kind: DgpKind::SyntheticD1,
            n: 5000,
            d: None,
            seed: 0,
            structure_seed: 20_240_601,
            selection_strength: 0.75,
            noise_scale: None,
            constant: 3.0,
        }
    }
}

impl DgpSpec {
    pub fn new(kind: DgpKind, n: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            seed,
            ..Self::default()
        }
    }

    pub fn dim(&self) -> usize {
        self.d.unwrap_or_else(|| self.kind.default_dim())
    }

    pub fn noise(&self) -> f64 {
        self.noise_scale.unwrap_or_else(|| self.kind.default_noise())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Parameter("n must be at least 1".into()));
        }
        if self.dim() == 0 {
            return Err(Error::Parameter("d must be at least 1".into()));
        }
        if self.kind == DgpKind::IhdpB && self.dim() != IHDP_DIM {
            return Err(Error::Parameter(format!(
                "ihdp_b has {IHDP_DIM} covariates, got d={}",
                self.dim()
            )));
        }
        if !self.selection_strength.is_finite() || !self.constant.is_finite() {
            return Err(Error::Parameter(
                "selection strength and constant must be finite".into(),
            ));
        }
        if !(self.noise().is_finite() && self.noise() >= 0.0) {
            return Err(Error::Parameter(format!("noise scale {} < 0", self.noise())));
        }
        Ok(())
    }
}

/// Dispatches on `spec.kind`.
pub fn generate(spec: &DgpSpec) -> Result<Dataset> {
    match spec.kind {
        DgpKind::SyntheticD1 => generate_synthetic(spec),
        DgpKind::IhdpB => generate_ihdp_b(spec),
        DgpKind::GaussianOracle => generate_gaussian_oracle(spec),
        DgpKind::ConstantOracle => generate_constant_oracle(spec),
    }
}

fn expect_kind(spec: &DgpSpec, kind: DgpKind) -> Result<()> {
    if spec.kind != kind {
        return Err(Error::Parameter(format!(
            "spec kind {:?} passed to the {kind:?} generator",
            spec.kind
        )));
    }
    spec.validate()
}

pub(crate) fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded factor-model covariance `ΛΛ' + diag(1 − rowsum(Λ²))`: a random
/// correlation matrix with unit diagonal.
struct FactorModel {
    d: usize,
    loadings: Vec<f64>,
    uniq: Vec<f64>,
}

impl FactorModel {
    fn new(d: usize, rng: &mut DetRng) -> Self {
        let mut loadings = Vec::with_capacity(d * LATENT_FACTORS);
        let mut uniq = Vec::with_capacity(d);
        for _ in 0..d {
            let row: Vec<f64> = (0..LATENT_FACTORS).map(|_| rng.random_range(-0.5..0.5)).collect();
            uniq.push((1.0 - row.iter().map(|l| l * l).sum::<f64>()).sqrt());
            loadings.extend(row);
        }
        Self { d, loadings, uniq }
    }

    fn draw(&self, rng: &mut DetRng, out: &mut Vec<f64>) {
        let f = rng.normals(LATENT_FACTORS);
        for j in 0..self.d {
            let l = &self.loadings[j * LATENT_FACTORS..(j + 1) * LATENT_FACTORS];
            out.push(dot(l, &f) + self.uniq[j] * rng.normal());
        }
    }

    /// `Var(c'X)`.
    fn variance(&self, c: &[f64]) -> f64 {
        let mut total = 0.0;
        for k in 0..LATENT_FACTORS {
            let s: f64 = (0..self.d).map(|j| c[j] * self.loadings[j * LATENT_FACTORS + k]).sum();
            total += s * s;
        }
        total + (0..self.d).map(|j| (c[j] * self.uniq[j]).powi(2)).sum::<f64>()
    }

    /// Random direction rescaled so that `Var(c'X) = 1`.
    fn unit_projection(&self, rng: &mut DetRng) -> Vec<f64> {
        let c = rng.normals(self.d);
        let s = self.variance(&c).sqrt();
        c.into_iter().map(|v| v / s).collect()
    }
}

fn assemble(x: Vec<f64>, d: usize, a: Vec<f64>, oracle: Oracle) -> Result<Dataset> {
    let y = a
        .iter()
        .enumerate()
        .map(|(i, &ai)| if ai == 1.0 { oracle.y1[i] } else { oracle.y0[i] })
        .collect();
    Dataset::new(x, d, a, y)?.with_oracle(oracle)
}

pub fn generate_synthetic(spec: &DgpSpec) -> Result<Dataset> {
    expect_kind(spec, DgpKind::SyntheticD1)?;
    let (n, d) = (spec.n, spec.dim());
    let mut srng = seeded_rng(spec.structure_seed);
    let model = FactorModel::new(d, &mut srng);
    let w = model.unit_projection(&mut srng);
    let v = model.unit_projection(&mut srng);
    let v_a = model.unit_projection(&mut srng);

    let mut rng = seeded_rng(spec.seed);
    let noise = spec.noise();
    let mut x = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut o = empty_oracle(n);
    for i in 0..n {
        model.draw(&mut rng, &mut x);
        let xi = &x[i * d..];
        let pi = logistic(spec.selection_strength * dot(&v_a, xi));
        let ai = if rng.uniform() < pi { 1.0 } else { 0.0 };
        let u = noise * rng.normal();
        let base = dot(&w, xi).sin();
        let effect = dot(&v, xi) + 1.0;
        push_unit(&mut o, base, base + effect, noise, noise, u, u, pi);
        a.push(ai);
    }
    assemble(x, d, a, o)
}

pub fn generate_ihdp_b(spec: &DgpSpec) -> Result<Dataset> {
    expect_kind(spec, DgpKind::IhdpB)?;
    let (n, d) = (spec.n, IHDP_DIM);
    let mut srng = seeded_rng(spec.structure_seed);
    let binary_p: Vec<f64> = (IHDP_CONTINUOUS..d).map(|_| srng.random_range(0.2..0.8)).collect();
    let beta: Vec<f64> = (0..d)
        .map(|_| {
            let u = srng.uniform();
            let mut acc = 0.0;
            for (v, p) in IHDP_BETA_VALUES.iter().zip(IHDP_BETA_PROBS) {
                acc += p;
                if u < acc {
                    return *v;
                }
            }
            IHDP_BETA_VALUES[IHDP_BETA_VALUES.len() - 1]
        })
        .collect();
    let v_a = srng.normals(d);
    let v_norm = dot(&v_a, &v_a).sqrt();

    let mut rng = seeded_rng(spec.seed);
    let mut x = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut pis = Vec::with_capacity(n);
    for _ in 0..n {
        let start = x.len();
        for _ in 0..IHDP_CONTINUOUS {
            x.push(rng.normal());
        }
        for p in &binary_p {
            x.push(if rng.uniform() < *p { 1.0 } else { 0.0 });
        }
        let xi = &x[start..];
        let pi = logistic(spec.selection_strength * dot(&v_a, xi) / v_norm);
        a.push(if rng.uniform() < pi { 1.0 } else { 0.0 });
        pis.push(pi);
    }

    let lin: Vec<f64> = (0..n).map(|i| dot(&x[i * d..(i + 1) * d], &beta)).collect();
    let shifted: Vec<f64> = lin
        .iter()
        .map(|l| (l + IHDP_OFFSET * beta.iter().sum::<f64>()).exp())
        .collect();
    // ω makes the mean effect on the treated equal IHDP_TREATED_EFFECT.
    let treated: Vec<usize> = (0..n).filter(|&i| a[i] == 1.0).collect();
    let omega = if treated.is_empty() {
        0.0
    } else {
        treated.iter().map(|&i| lin[i] - shifted[i]).sum::<f64>() / treated.len() as f64 - IHDP_TREATED_EFFECT
    };

    let noise = spec.noise();
    let mut o = empty_oracle(n);
    for i in 0..n {
        let (e0, e1) = (noise * rng.normal(), noise * rng.normal());
        push_unit(&mut o, shifted[i], lin[i] - omega, noise, noise, e0, e1, pis[i]);
    }
    assemble(x, d, a, o)
}

pub fn generate_gaussian_oracle(spec: &DgpSpec) -> Result<Dataset> {
    expect_kind(spec, DgpKind::GaussianOracle)?;
    let (n, d) = (spec.n, spec.dim());
    let mut rng = seeded_rng(spec.seed);
    let noise = spec.noise();
    let mut x = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut o = empty_oracle(n);
    for _ in 0..n {
        let start = x.len();
        x.extend(rng.normals(d));
        let pi = logistic(spec.selection_strength * x[start]);
        a.push(if rng.uniform() < pi { 1.0 } else { 0.0 });
        let u = noise * rng.normal();
        push_unit(&mut o, -1.0, 1.0, noise, noise, u, u, pi);
    }
    assemble(x, d, a, o)
}

pub fn generate_constant_oracle(spec: &DgpSpec) -> Result<Dataset> {
    expect_kind(spec, DgpKind::ConstantOracle)?;
    let (n, d) = (spec.n, spec.dim());
    let mut rng = seeded_rng(spec.seed);
    let c = spec.constant;
    let mut x = Vec::with_capacity(n * d);
    let mut a = Vec::with_capacity(n);
    let mut o = empty_oracle(n);
    for _ in 0..n {
        let start = x.len();
        x.extend(rng.normals(d));
        let pi = logistic(spec.selection_strength * x[start]);
        a.push(if rng.uniform() < pi { 1.0 } else { 0.0 });
        push_unit(&mut o, c, c, 0.0, 0.0, 0.0, 0.0, pi);
    }
    assemble(x, d, a, o)
}

fn empty_oracle(n: usize) -> Oracle {
    let v = || Vec::with_capacity(n);
    Oracle {
        y0: v(),
        y1: v(),
        mu0: v(),
        mu1: v(),
        sd0: v(),
        sd1: v(),
        true_pi: v(),
        true_cate: v(),
    }
}

#[allow(clippy::too_many_arguments)]
fn push_unit(o: &mut Oracle, mu0: f64, mu1: f64, sd0: f64, sd1: f64, e0: f64, e1: f64, pi: f64) {
    o.mu0.push(mu0);
    o.mu1.push(mu1);
    o.sd0.push(sd0);
    o.sd1.push(sd1);
    o.y0.push(mu0 + e0);
    o.y1.push(mu1 + e1);
    o.true_pi.push(pi);
    o.true_cate.push(mu1 - mu0);
}
