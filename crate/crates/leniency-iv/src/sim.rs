//! Synthetic leniency designs with fully enumerated potential treatments,
//! brute-force estimand oracles, and a Monte Carlo harness.
//!
//! The generator materializes the entire potential-treatment table (which
//! examiner would treat which case), so the estimand and the per-case
//! weights are computable exactly by enumeration rather than estimated.

use crate::data::{prune, Categorical, Covariate, Dataset};
use crate::design::{DesignContext, GKind, GMatrix};
use crate::error::{Error, Result};
use crate::estimate::{estimate, estimate_with, first_stage};
use crate::inference::{weak_iv_test, GridSpec};
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, Normal};

/// Treatment-effect model for generated populations.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectModel {
    Constant(f64),
    Heterogeneous {
        mean: f64,
        /// Loading on the second latent case dimension.
        spread: f64,
        /// Added to the effect of cases with negative average-complier
        /// weight; nonzero values make monotonicity violations detectable.
        defier_shift: f64,
    },
}

/// Error-scale model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    Homoskedastic,
    /// Error standard deviation proportional to 0.5 plus the case's own
    /// treatment probability.
    LeniencyScaled,
}

/// Generator configuration.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SimConfig {
    pub n: usize,
    /// Fixed-effect cells; each contributes examiners_per_cell - 1
    /// instrument columns after the reference drop.
    pub n_cells: usize,
    pub examiners_per_cell: usize,
    /// Half-width of the leniency range: grant rates span
    /// 0.5 +/- leniency_spread. Must stay below 0.5.
    pub leniency_spread: f64,
    /// Loading of the first-stage latent on the outcome error, in (-1, 1).
    pub endogeneity: f64,
    pub effect_model: EffectModel,
    /// Maximum criteria-rotation angle as a fraction of pi; 0 gives a
    /// single-threshold (fully monotone) first stage, larger values let
    /// extreme examiners weigh the second case dimension and create
    /// defiers. Must stay below 0.5.
    pub defier_fraction: f64,
    pub noise: NoiseModel,
    /// Independent standard-normal covariate columns named cov0, cov1, ...
    pub n_covariates: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_cells == 0 {
            return Err(Error::Config("n and n_cells must be positive".into()));
        }
        if self.n < self.n_cells * self.examiners_per_cell {
            return Err(Error::Config(format!(
                "n = {} cannot fill {} cells x {} examiners",
                self.n, self.n_cells, self.examiners_per_cell
            )));
        }
        if self.examiners_per_cell < 2 {
            return Err(Error::Config(
                "examiners_per_cell must be at least 2".into(),
            ));
        }
        if !(self.leniency_spread > 0.0 && self.leniency_spread < 0.5) {
            return Err(Error::Config(format!(
                "leniency_spread must lie in (0, 0.5), got {}",
                self.leniency_spread
            )));
        }
        if !(self.endogeneity > -1.0 && self.endogeneity < 1.0) {
            return Err(Error::Config(format!(
                "endogeneity must lie in (-1, 1), got {}",
                self.endogeneity
            )));
        }
        if !(0.0..0.5).contains(&self.defier_fraction) {
            return Err(Error::Config(format!(
                "defier_fraction must lie in [0, 0.5), got {}",
                self.defier_fraction
            )));
        }
        if let EffectModel::Heterogeneous {
            spread,
            defier_shift,
            ..
        } = self.effect_model
        {
            if spread < 0.0 {
                return Err(Error::Config("effect spread must be nonnegative".into()));
            }
            if defier_shift != 0.0 && self.defier_fraction == 0.0 {
                return Err(Error::Config(
                    "defier_shift requires defier_fraction > 0: a monotone first stage has no defiers to shift".into(),
                ));
            }
        }
        Ok(())
    }

    /// Parses a plain-text `key=value` configuration (one pair per line,
    /// `#` comments allowed).
    pub fn from_key_values(text: &str) -> Result<SimConfig> {
        let mut cfg = SimConfig {
            n: 1000,
            n_cells: 10,
            examiners_per_cell: 5,
            leniency_spread: 0.2,
            endogeneity: 0.5,
            effect_model: EffectModel::Constant(1.0),
            defier_fraction: 0.0,
            noise: NoiseModel::Homoskedastic,
            n_covariates: 0,
            seed: 0,
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| {
                Error::Config(format!("line {}: invalid {what} '{value}'", lineno + 1))
            };
            match key {
                "n" => cfg.n = value.parse().map_err(|_| bad("count"))?,
                "n_cells" => cfg.n_cells = value.parse().map_err(|_| bad("count"))?,
                "examiners_per_cell" => {
                    cfg.examiners_per_cell = value.parse().map_err(|_| bad("count"))?
                }
                "leniency_spread" => {
                    cfg.leniency_spread = value.parse().map_err(|_| bad("number"))?
                }
                "endogeneity" => cfg.endogeneity = value.parse().map_err(|_| bad("number"))?,
                "defier_fraction" => {
                    cfg.defier_fraction = value.parse().map_err(|_| bad("number"))?
                }
                "covariates" => cfg.n_covariates = value.parse().map_err(|_| bad("count"))?,
                "seed" => cfg.seed = value.parse().map_err(|_| bad("seed"))?,
                "noise" => {
                    cfg.noise = match value {
                        "homoskedastic" => NoiseModel::Homoskedastic,
                        "leniency_scaled" => NoiseModel::LeniencyScaled,
                        _ => return Err(bad("noise model")),
                    }
                }
                "effect" => {
                    cfg.effect_model = parse_effect(value)
                        .ok_or_else(|| bad("effect model"))?;
                }
                _ => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{key}'",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Inverse of [`SimConfig::from_key_values`].
    pub fn to_key_values(&self) -> String {
        let effect = match self.effect_model {
            EffectModel::Constant(b) => format!("constant:{b}"),
            EffectModel::Heterogeneous {
                mean,
                spread,
                defier_shift,
            } => format!("heterogeneous:{mean},{spread},{defier_shift}"),
        };
        let noise = match self.noise {
            NoiseModel::Homoskedastic => "homoskedastic",
            NoiseModel::LeniencyScaled => "leniency_scaled",
        };
        format!(
            "n={}\nn_cells={}\nexaminers_per_cell={}\nleniency_spread={}\nendogeneity={}\n\
             defier_fraction={}\neffect={}\nnoise={}\ncovariates={}\nseed={}\n",
            self.n,
            self.n_cells,
            self.examiners_per_cell,
            self.leniency_spread,
            self.endogeneity,
            self.defier_fraction,
            effect,
            noise,
            self.n_covariates,
            self.seed
        )
    }
}

fn parse_effect(value: &str) -> Option<EffectModel> {
    let (tag, rest) = value.split_once(':')?;
    match tag {
        "constant" => rest.trim().parse().ok().map(EffectModel::Constant),
        "heterogeneous" => {
            let parts: Vec<&str> = rest.split(',').map(str::trim).collect();
            if parts.len() != 3 {
                return None;
            }
            Some(EffectModel::Heterogeneous {
                mean: parts[0].parse().ok()?,
                spread: parts[1].parse().ok()?,
                defier_shift: parts[2].parse().ok()?,
            })
        }
        _ => None,
    }
}

/// A finite population with a complete potential-treatment table.
///
/// Assignment is uniform over the examiners of the case's own cell; all
/// oracle computations below treat the table itself as the population, so
/// leniencies are table means rather than generator parameters.
#[derive(Debug, Clone)]
pub struct Population {
    pub cell_of: Vec<usize>,
    pub n_cells: usize,
    /// Examiner count per cell; potential rows have this width.
    pub examiners_in_cell: Vec<usize>,
    /// potential[i][k]: would examiner k (local index in i's cell) treat i?
    pub potential: Vec<Vec<bool>>,
    /// Untreated outcome, including any cell intercept.
    pub y0: Vec<f64>,
    /// Individual treatment effect.
    pub beta: Vec<f64>,
}

impl Population {
    /// Builds a population from hand-specified parts and validates shape.
    pub fn from_parts(
        cell_of: Vec<usize>,
        potential: Vec<Vec<bool>>,
        y0: Vec<f64>,
        beta: Vec<f64>,
    ) -> Result<Population> {
        let n = cell_of.len();
        if n == 0 {
            return Err(Error::EmptyData("population has no cases".into()));
        }
        if potential.len() != n || y0.len() != n || beta.len() != n {
            return Err(Error::Dimension(
                "population component lengths disagree".into(),
            ));
        }
        let n_cells = cell_of.iter().copied().max().unwrap_or(0) + 1;
        let mut examiners_in_cell = vec![0usize; n_cells];
        for (i, &c) in cell_of.iter().enumerate() {
            let m = potential[i].len();
            if m < 2 {
                return Err(Error::Config(format!(
                    "case {i}: potential row needs at least 2 examiners"
                )));
            }
            if examiners_in_cell[c] == 0 {
                examiners_in_cell[c] = m;
            } else if examiners_in_cell[c] != m {
                return Err(Error::Dimension(format!(
                    "case {i}: potential row width {m} != cell width {}",
                    examiners_in_cell[c]
                )));
            }
        }
        if examiners_in_cell.contains(&0) {
            return Err(Error::Config("every cell needs at least one case".into()));
        }
        Ok(Population {
            cell_of,
            n_cells,
            examiners_in_cell,
            potential,
            y0,
            beta,
        })
    }

    pub fn n(&self) -> usize {
        self.cell_of.len()
    }

    /// Instrument count after one reference drop per cell.
    pub fn k_instruments(&self) -> usize {
        self.examiners_in_cell.iter().map(|m| m - 1).sum()
    }

    /// Table leniencies l(k, w): per cell, each examiner's treated share.
    pub fn leniency(&self) -> Vec<Vec<f64>> {
        let mut sums: Vec<Vec<f64>> = self
            .examiners_in_cell
            .iter()
            .map(|&m| vec![0.0; m])
            .collect();
        let mut counts = vec![0usize; self.n_cells];
        for (i, &c) in self.cell_of.iter().enumerate() {
            counts[c] += 1;
            for (k, &t) in self.potential[i].iter().enumerate() {
                if t {
                    sums[c][k] += 1.0;
                }
            }
        }
        for (c, row) in sums.iter_mut().enumerate() {
            for v in row.iter_mut() {
                *v /= counts[c] as f64;
            }
        }
        sums
    }

    /// Per-case average-complier weights by the pairwise sum
    /// sum_{k>j} p_j p_k (l_k - l_j)(x_i(k) - x_i(j)).
    pub fn lambda_pairwise(&self) -> Vec<f64> {
        let len = self.leniency();
        self.potential
            .iter()
            .zip(&self.cell_of)
            .map(|(row, &c)| {
                let m = row.len();
                let p = 1.0 / m as f64;
                let mut acc = 0.0;
                for k in 1..m {
                    for j in 0..k {
                        let compl = (row[k] as i8 - row[j] as i8) as f64;
                        acc += p * p * (len[c][k] - len[c][j]) * compl;
                    }
                }
                acc
            })
            .collect()
    }

    /// Per-case weights by the closed form
    /// P(x=1) P(x=0) [lbar(1) - lbar(0)].
    pub fn lambda_closed(&self) -> Vec<f64> {
        let len = self.leniency();
        self.potential
            .iter()
            .zip(&self.cell_of)
            .map(|(row, &c)| {
                let m = row.len() as f64;
                let treated = row.iter().filter(|&&t| t).count() as f64;
                if treated == 0.0 || treated == m {
                    return 0.0;
                }
                let l1: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| t)
                    .map(|(k, _)| len[c][k])
                    .sum::<f64>()
                    / treated;
                let l0: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|(_, &t)| !t)
                    .map(|(k, _)| len[c][k])
                    .sum::<f64>()
                    / (m - treated);
                (treated / m) * ((m - treated) / m) * (l1 - l0)
            })
            .collect()
    }

    /// Per-case weights by the covariance form cov(x_i, l(k(i), w_i)) over
    /// the assignment draw.
    pub fn lambda_cov(&self) -> Vec<f64> {
        let len = self.leniency();
        self.potential
            .iter()
            .zip(&self.cell_of)
            .map(|(row, &c)| {
                let m = row.len() as f64;
                let ex = row.iter().filter(|&&t| t).count() as f64 / m;
                let el: f64 = len[c].iter().sum::<f64>() / m;
                let exl: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(k, &t)| if t { len[c][k] } else { 0.0 })
                    .sum::<f64>()
                    / m;
                exl - ex * el
            })
            .collect()
    }

    /// The weights, with the three forms cross-checked to 1e-10.
    pub fn lambda(&self) -> Result<Vec<f64>> {
        let a = self.lambda_pairwise();
        let b = self.lambda_closed();
        let c = self.lambda_cov();
        for i in 0..a.len() {
            let tol = 1e-10 * (1.0 + a[i].abs());
            if (a[i] - b[i]).abs() > tol || (a[i] - c[i]).abs() > tol {
                return Err(Error::Diagnostic(format!(
                    "weight forms disagree at case {i}: {} vs {} vs {}",
                    a[i], b[i], c[i]
                )));
            }
        }
        Ok(a)
    }

    /// The estimand computed three ways: (direct enumeration ratio,
    /// pairwise weighted average, weight-form ratio).
    pub fn beta_star_forms(&self) -> Result<(f64, f64, f64)> {
        let len = self.leniency();
        let n = self.n() as f64;
        let cell_mean_len: Vec<f64> = len
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();

        // (a) direct: full enumeration over case x examiner of the
        // population IV ratio with demeaned leniency as the instrument.
        let (mut num_a, mut den_a) = (0.0, 0.0);
        for (i, &c) in self.cell_of.iter().enumerate() {
            let m = self.potential[i].len();
            let p = 1.0 / m as f64;
            for k in 0..m {
                let ld = len[c][k] - cell_mean_len[c];
                let x = self.potential[i][k] as u8 as f64;
                num_a += p * ld * (self.y0[i] + self.beta[i] * x);
                den_a += p * ld * x;
            }
        }

        // (b) pairwise: omega-weighted average of pairwise IV slopes.
        // Pairs with equal leniency carry zero weight and are skipped
        // before any division.
        let mut cell_count = vec![0usize; self.n_cells];
        for &c in &self.cell_of {
            cell_count[c] += 1;
        }
        let (mut num_b, mut den_b) = (0.0, 0.0);
        for c in 0..self.n_cells {
            let m = self.examiners_in_cell[c];
            let p = 1.0 / m as f64;
            let q = cell_count[c] as f64 / n;
            // Conditional outcome means E[y | k(i)=k, w=c].
            let mut ey = vec![0.0; m];
            for (i, &ci) in self.cell_of.iter().enumerate() {
                if ci == c {
                    for k in 0..m {
                        let x = self.potential[i][k] as u8 as f64;
                        ey[k] += self.y0[i] + self.beta[i] * x;
                    }
                }
            }
            for v in ey.iter_mut() {
                *v /= cell_count[c] as f64;
            }
            for k in 1..m {
                for j in 0..k {
                    let dl = len[c][k] - len[c][j];
                    if dl == 0.0 {
                        continue;
                    }
                    let omega = p * p * dl * dl;
                    num_b += q * omega * ((ey[k] - ey[j]) / dl);
                    den_b += q * omega;
                }
            }
        }

        // (c) weight form: E[lambda beta] / E[lambda].
        let lambda = self.lambda()?;
        let num_c: f64 = lambda.iter().zip(&self.beta).map(|(l, b)| l * b).sum::<f64>() / n;
        let den_c: f64 = lambda.iter().sum::<f64>() / n;

        let scale = (den_a / n).abs().max(den_b.abs()).max(den_c.abs());
        if scale <= 1e-14 {
            return Err(Error::Diagnostic(
                "estimand undefined: no leniency variation in the population".into(),
            ));
        }
        Ok((num_a / den_a, num_b / den_b, num_c / den_c))
    }

    /// The estimand, with the three forms cross-checked to 1e-9.
    pub fn beta_star(&self) -> Result<f64> {
        let (a, b, c) = self.beta_star_forms()?;
        let tol = 1e-9 * (1.0 + a.abs());
        if (a - b).abs() > tol || (a - c).abs() > tol {
            return Err(Error::Diagnostic(format!(
                "estimand forms disagree: {a} vs {b} vs {c}"
            )));
        }
        Ok(a)
    }

    /// Population complier mean of a per-case value v under the pooled
    /// weighting: sum_i lambda_i v_i / sum_i lambda_i.
    pub fn complier_mean(&self, v: &[f64]) -> Result<f64> {
        let lambda = self.lambda()?;
        let den: f64 = lambda.iter().sum();
        if den.abs() <= 1e-14 {
            return Err(Error::Diagnostic("no complier mass".into()));
        }
        Ok(lambda.iter().zip(v).map(|(l, x)| l * x).sum::<f64>() / den)
    }

    /// Population first-stage strength: (expected F, partial R^2,
    /// leniency sum of squares, average first-stage variance).
    pub fn first_stage_truth(&self) -> (f64, f64, f64, f64) {
        let len = self.leniency();
        let cell_mean_len: Vec<f64> = len
            .iter()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64)
            .collect();
        let mut ss = 0.0;
        let mut nu = 0.0;
        for &c in &self.cell_of {
            let m = self.examiners_in_cell[c];
            let p = 1.0 / m as f64;
            for k in 0..m {
                let ld = len[c][k] - cell_mean_len[c];
                ss += p * ld * ld;
                nu += p * len[c][k] * (1.0 - len[c][k]);
            }
        }
        let n = self.n() as f64;
        let nu_var = nu / n;
        let k = self.k_instruments() as f64;
        let expected_f = if nu_var > 0.0 {
            1.0 + ss / (k * nu_var)
        } else {
            f64::INFINITY
        };
        let r2 = if ss + n * nu_var > 0.0 {
            ss / (ss + n * nu_var)
        } else {
            0.0
        };
        (expected_f, r2, ss, nu_var)
    }
}

/// Everything the generator knows that an estimator does not.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub population: Population,
    /// Assigned examiner (local index within the case's cell).
    pub assigned: Vec<usize>,
    pub lambda: Vec<f64>,
    pub beta_star: f64,
    /// Population first-stage expected F under the homoskedastic identity.
    pub expected_f: f64,
    pub r_squared: f64,
    pub leniency_ss: f64,
    pub nu_var: f64,
    /// Share of cases with negative average-complier weight.
    pub avg_defier_share: f64,
    /// First latent case dimension (drives selection).
    pub latent1: Vec<f64>,
    /// Second latent case dimension (drives rotated criteria and, under the
    /// heterogeneous model, effect size).
    pub latent2: Vec<f64>,
}

/// Closed-form leniency spread hitting a target population expected F.
///
/// Solves K(E[F] - 1) = sum l~^2 / var(nu) for the grant-rate half-width,
/// using the design's deterministic leniency grid. Errors when the target
/// needs a spread of 0.5 or more (grant rates would leave (0, 1)).
pub fn calibrate_leniency_spread(
    n: usize,
    n_cells: usize,
    examiners_per_cell: usize,
    target_f: f64,
) -> Result<f64> {
    if examiners_per_cell < 2 || n_cells == 0 || n == 0 {
        return Err(Error::Config("invalid design counts".into()));
    }
    if !(target_f > 1.0) || !target_f.is_finite() {
        return Err(Error::Config(format!(
            "target expected F must exceed 1, got {target_f}"
        )));
    }
    let m = examiners_per_cell;
    let vt = (0..m)
        .map(|e| {
            let t = -1.0 + 2.0 * e as f64 / (m - 1) as f64;
            t * t
        })
        .sum::<f64>()
        / m as f64;
    let k = (n_cells * (m - 1)) as f64;
    let c = target_f - 1.0;
    let s2 = 0.25 * c * k / (vt * (n as f64 + c * k));
    let s = s2.sqrt();
    if !(s < 0.5) {
        return Err(Error::Config(format!(
            "target expected F = {target_f} needs leniency spread {s:.3} >= 0.5; \
             increase n or examiner counts"
        )));
    }
    Ok(s)
}

/// Draws one synthetic dataset and its truth.
///
/// Deterministic given the seed: the draw order is fixed (cell intercepts,
/// then per case latents / noise / assignment / covariates). Grant rates
/// are an equally spaced grid per cell; examiner criteria directions rotate
/// with the grid when defier_fraction > 0.
pub fn generate(cfg: &SimConfig) -> Result<(Dataset, SyntheticTruth)> {
    cfg.validate()?;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.n;
    let m = cfg.examiners_per_cell;

    let intercepts: Vec<f64> = (0..cfg.n_cells).map(|_| normal.sample(&mut rng)).collect();

    // Per-examiner grant rate and criteria angle on the within-cell grid.
    let grid: Vec<f64> = (0..m)
        .map(|e| -1.0 + 2.0 * e as f64 / (m - 1) as f64)
        .collect();
    let grant: Vec<f64> = grid.iter().map(|t| 0.5 + cfg.leniency_spread * t).collect();
    let cutoff: Vec<f64> = grant.iter().map(|g| normal.inverse_cdf(1.0 - g)).collect();
    let angle: Vec<f64> = grid
        .iter()
        .map(|t| std::f64::consts::PI * cfg.defier_fraction * t)
        .collect();

    // Near-equal contiguous cells.
    let base = n / cfg.n_cells;
    let extra = n % cfg.n_cells;
    let mut cell_of = Vec::with_capacity(n);
    for c in 0..cfg.n_cells {
        let size = base + usize::from(c < extra);
        cell_of.extend(std::iter::repeat(c).take(size));
    }

    let mut latent1 = Vec::with_capacity(n);
    let mut latent2 = Vec::with_capacity(n);
    let mut noise = Vec::with_capacity(n);
    let mut assigned = Vec::with_capacity(n);
    let mut covariates: Vec<Vec<f64>> = vec![Vec::with_capacity(n); cfg.n_covariates];
    let mut potential = Vec::with_capacity(n);
    for _ in 0..n {
        let u1: f64 = normal.sample(&mut rng);
        let u2: f64 = normal.sample(&mut rng);
        let eta: f64 = normal.sample(&mut rng);
        let k = rng.gen_range(0..m);
        latent1.push(u1);
        latent2.push(u2);
        noise.push(eta);
        assigned.push(k);
        for col in covariates.iter_mut() {
            col.push(normal.sample(&mut rng));
        }
        let row: Vec<bool> = (0..m)
            .map(|e| angle[e].cos() * u1 + angle[e].sin() * u2 >= cutoff[e])
            .collect();
        potential.push(row);
    }

    // Untreated outcomes: cell intercept plus an error built from the
    // selection latent (weight = endogeneity) and fresh noise.
    let a = cfg.endogeneity;
    let b = (1.0 - a * a).sqrt();
    let y0: Vec<f64> = (0..n)
        .map(|i| {
            let scale = match cfg.noise {
                NoiseModel::Homoskedastic => 1.0,
                NoiseModel::LeniencyScaled => {
                    let p = potential[i].iter().filter(|&&t| t).count() as f64 / m as f64;
                    0.5 + p
                }
            };
            intercepts[cell_of[i]] + scale * (a * latent1[i] + b * noise[i])
        })
        .collect();

    let mut beta: Vec<f64> = match cfg.effect_model {
        EffectModel::Constant(v) => vec![v; n],
        EffectModel::Heterogeneous { mean, spread, .. } => {
            (0..n).map(|i| mean + spread * latent2[i]).collect()
        }
    };

    let population = Population::from_parts(cell_of.clone(), potential, y0, beta.clone())?;
    let lambda = population.lambda()?;
    if let EffectModel::Heterogeneous { defier_shift, .. } = cfg.effect_model {
        if defier_shift != 0.0 {
            for i in 0..n {
                if lambda[i] < 0.0 {
                    beta[i] += defier_shift;
                }
            }
        }
    }
    let population = Population {
        beta: beta.clone(),
        ..population
    };

    let treatment: Vec<f64> = (0..n)
        .map(|i| population.potential[i][assigned[i]] as u8 as f64)
        .collect();
    let outcome: Vec<f64> = (0..n)
        .map(|i| population.y0[i] + beta[i] * treatment[i])
        .collect();

    let exam_labels: Vec<String> = (0..n)
        .map(|i| format!("e{:04}", cell_of[i] * m + assigned[i]))
        .collect();
    let cell_labels: Vec<String> = cell_of.iter().map(|c| format!("c{c:03}")).collect();
    let dataset = Dataset {
        outcome_name: "y".into(),
        treatment_name: "x".into(),
        outcome,
        treatment,
        examiner: Categorical::from_values("examiner", &exam_labels),
        fixed_effects: vec![Categorical::from_values("cell", &cell_labels)],
        covariates: covariates
            .into_iter()
            .enumerate()
            .map(|(j, values)| Covariate {
                name: format!("cov{j}"),
                values,
            })
            .collect(),
    };

    let beta_star = population.beta_star()?;
    let (expected_f, r_squared, leniency_ss, nu_var) = population.first_stage_truth();
    let avg_defier_share =
        lambda.iter().filter(|&&l| l < 0.0).count() as f64 / n as f64;
    let truth = SyntheticTruth {
        population,
        assigned,
        lambda,
        beta_star,
        expected_f,
        r_squared,
        leniency_ss,
        nu_var,
        avg_defier_share,
        latent1,
        latent2,
    };
    Ok((dataset, truth))
}

/// Derives an independent per-replication seed.
pub(crate) fn sub_seed(seed: u64, rep: u64, attempt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(rep.wrapping_add(attempt.wrapping_mul(0x9E3779B97F4A7C15))))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Monte Carlo study configuration.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonteCarloConfig {
    pub cfg: SimConfig,
    pub reps: usize,
    pub kinds: Vec<GKind>,
    /// When set, run the weak-instrument test at this null each
    /// replication and report its rejection rate at the 5% level.
    pub weak_iv_beta0: Option<f64>,
}

/// Per-estimator Monte Carlo summary.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KindSummary {
    #[serde(rename = "estimator")]
    pub kind: GKind,
    /// Replications where the estimate was defined.
    pub n_defined: usize,
    pub mean: f64,
    /// Mean of (estimate - replication estimand).
    pub bias: f64,
    pub sd: f64,
    /// Monte Carlo standard error of the mean: sd / sqrt(n_defined).
    pub mc_se: f64,
    /// Share of nominal 95% robust intervals covering the replication
    /// estimand (among replications with a defined standard error).
    pub coverage95: f64,
}

/// Aggregated Monte Carlo results.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MonteCarloSummary {
    pub reps: usize,
    /// Replication attempts that hit a degenerate design and were redrawn.
    pub retried: usize,
    pub mean_beta_star: f64,
    /// Mean population expected F across replications.
    pub mean_expected_f: f64,
    /// Mean realized first-stage F statistic.
    pub mean_sample_f: f64,
    pub mean_r_squared: f64,
    /// Predicted 2SLS-to-OLS bias ratio 1 / ((1 - R^2) E[F]).
    pub predicted_tsls_rel_bias: f64,
    /// Empirical 2SLS-to-OLS bias ratio, when both kinds were run.
    pub tsls_ols_bias_ratio: Option<f64>,
    pub summaries: Vec<KindSummary>,
    /// Rejection rate of the weak-instrument test, when requested.
    pub weak_iv_reject_rate: Option<f64>,
    /// Per-replication weak-instrument p-values, when requested.
    #[serde(skip)]
    pub weak_iv_p_values: Option<Vec<f64>>,
}

struct RepOutcome {
    beta_star: f64,
    expected_f: f64,
    sample_f: f64,
    r_squared: f64,
    per_kind: Vec<Option<(f64, Option<f64>)>>,
    weak_p: Option<f64>,
    retries: usize,
}

const MAX_REP_RETRIES: u64 = 8;

/// Runs the study. Deterministic given the seed: replications derive
/// independent sub-seeds and aggregation follows replication order, so
/// thread count never changes the result.
pub fn monte_carlo(mc: &MonteCarloConfig) -> Result<MonteCarloSummary> {
    mc.cfg.validate()?;
    if mc.reps < 2 {
        return Err(Error::Config("need at least 2 replications".into()));
    }
    if mc.kinds.is_empty() {
        return Err(Error::Config("no estimator kinds requested".into()));
    }
    let outcomes: Result<Vec<RepOutcome>> = (0..mc.reps)
        .into_par_iter()
        .map(|rep| run_rep(mc, rep as u64))
        .collect();
    let outcomes = outcomes?;

    let reps = outcomes.len() as f64;
    let retried = outcomes.iter().map(|o| o.retries).sum();
    let mean_beta_star = outcomes.iter().map(|o| o.beta_star).sum::<f64>() / reps;
    let mean_expected_f = outcomes.iter().map(|o| o.expected_f).sum::<f64>() / reps;
    let mean_sample_f = outcomes.iter().map(|o| o.sample_f).sum::<f64>() / reps;
    let mean_r_squared = outcomes.iter().map(|o| o.r_squared).sum::<f64>() / reps;
    let predicted_tsls_rel_bias = 1.0 / ((1.0 - mean_r_squared) * mean_expected_f);

    let mut summaries = Vec::with_capacity(mc.kinds.len());
    for (ki, &kind) in mc.kinds.iter().enumerate() {
        let defined: Vec<(f64, Option<f64>, f64)> = outcomes
            .iter()
            .filter_map(|o| o.per_kind[ki].map(|(b, se)| (b, se, o.beta_star)))
            .collect();
        let nd = defined.len();
        let (mean, bias, sd) = if nd > 1 {
            let mean = defined.iter().map(|d| d.0).sum::<f64>() / nd as f64;
            let bias = defined.iter().map(|d| d.0 - d.2).sum::<f64>() / nd as f64;
            let var = defined
                .iter()
                .map(|d| (d.0 - mean) * (d.0 - mean))
                .sum::<f64>()
                / (nd - 1) as f64;
            (mean, bias, var.sqrt())
        } else {
            (f64::NAN, f64::NAN, f64::NAN)
        };
        let with_se: Vec<&(f64, Option<f64>, f64)> =
            defined.iter().filter(|d| d.1.is_some()).collect();
        let coverage95 = if with_se.is_empty() {
            f64::NAN
        } else {
            with_se
                .iter()
                .filter(|(b, se, bs)| (b - bs).abs() <= 1.959963984540054 * se.unwrap())
                .count() as f64
                / with_se.len() as f64
        };
        summaries.push(KindSummary {
            kind,
            n_defined: nd,
            mean,
            bias,
            sd,
            mc_se: if nd > 1 { sd / (nd as f64).sqrt() } else { f64::NAN },
            coverage95,
        });
    }

    let bias_of = |k: GKind| {
        mc.kinds
            .iter()
            .position(|&kk| kk == k)
            .map(|i| summaries[i].bias)
    };
    let tsls_ols_bias_ratio = match (bias_of(GKind::Tsls), bias_of(GKind::Ols)) {
        (Some(t), Some(o)) if o.abs() > 1e-12 => Some(t / o),
        _ => None,
    };

    let (weak_iv_reject_rate, weak_iv_p_values) = if mc.weak_iv_beta0.is_some() {
        let ps: Vec<f64> = outcomes.iter().filter_map(|o| o.weak_p).collect();
        let rate = if ps.is_empty() {
            f64::NAN
        } else {
            ps.iter().filter(|&&p| p < 0.05).count() as f64 / ps.len() as f64
        };
        (Some(rate), Some(ps))
    } else {
        (None, None)
    };

    Ok(MonteCarloSummary {
        reps: mc.reps,
        retried,
        mean_beta_star,
        mean_expected_f,
        mean_sample_f,
        mean_r_squared,
        predicted_tsls_rel_bias,
        tsls_ols_bias_ratio,
        summaries,
        weak_iv_reject_rate,
        weak_iv_p_values,
    })
}

fn run_rep(mc: &MonteCarloConfig, rep: u64) -> Result<RepOutcome> {
    let mut last_err: Option<Error> = None;
    for attempt in 0..MAX_REP_RETRIES {
        let mut cfg = mc.cfg.clone();
        cfg.seed = sub_seed(mc.cfg.seed, rep, attempt);
        let (dataset, truth) = generate(&cfg)?;
        match attempt_rep(mc, &dataset, &truth) {
            Ok(mut out) => {
                out.retries = attempt as usize;
                return Ok(out);
            }
            Err(e) if is_degenerate(&e) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| {
        Error::DegenerateDesign("replication retries exhausted".into())
    }))
}

fn attempt_rep(mc: &MonteCarloConfig, dataset: &Dataset, truth: &SyntheticTruth) -> Result<RepOutcome> {
    let (pruned, _report) = prune(dataset)?;
    let ctx = DesignContext::build(&pruned)?;
    let y = &pruned.outcome;
    let x = &pruned.treatment;
    let ujive = GMatrix::new(&ctx, GKind::Ujive)?;

    let fs = first_stage(&ctx, x)?;
    let mut per_kind = Vec::with_capacity(mc.kinds.len());
    for &kind in &mc.kinds {
        let est = if kind == GKind::Ujive {
            Ok(estimate_with(&ujive, y, x)?)
        } else {
            estimate(&ctx, y, x, kind)
        };
        match est {
            Ok(e) => per_kind.push(e.beta.map(|b| (b, e.se_robust))),
            Err(err) => {
                if kind == GKind::Ujive {
                    return Err(err);
                }
                if is_degenerate(&err) || matches!(err, Error::FejivUnavailable(_)) {
                    per_kind.push(None);
                } else {
                    return Err(err);
                }
            }
        }
    }

    let weak_p = match mc.weak_iv_beta0 {
        Some(b0) => {
            let grid = GridSpec::new(b0, b0, 1)?;
            Some(weak_iv_test(&ujive, y, x, b0, Some(grid), 0.05)?.p)
        }
        None => None,
    };

    Ok(RepOutcome {
        beta_star: truth.beta_star,
        expected_f: truth.expected_f,
        sample_f: fs.f_stat,
        r_squared: truth.r_squared,
        per_kind,
        weak_p,
        retries: 0,
    })
}

fn is_degenerate(e: &Error) -> bool {
    matches!(
        e,
        Error::DegenerateDesign(_)
            | Error::DegenerateLeverage { .. }
            | Error::InsufficientDof(_)
            | Error::Diagnostic(_)
    )
}
