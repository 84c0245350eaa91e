//! Synthetic grouped mortality panels with a Lee–Carter-style latent structure.
//!
//! Bottom series are (prefecture, sex) pairs nested in regions. Latent log rates are
//! `a(z) + b(z) k_t + sex + prefecture`, then shocks multiply individual
//! (year, prefecture) cells. Deaths are Poisson draws around `rate * exposure`.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use thiserror::Error;

use crate::domain::{AgeGrid, CountPanel, DomainError, GroupedDataset, GroupingScheme, Refinement, SeriesKey};
use crate::seeds::task_rng;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Multiplies the latent rate of every cell of the listed prefectures in one year.
#[derive(Debug, Clone, PartialEq)]
pub struct Shock {
    /// Zero-based index into the simulated years.
    pub year_index: usize,
    pub prefectures: Vec<String>,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_years: usize,
    pub first_year: i32,
    pub grid: AgeGrid,
    /// Prefecture count of each region.
    pub regions: Vec<usize>,
    pub seed: u64,
    /// `a(z) = c0 + c1 u + c2 u^2` with `u = z / 100`.
    pub base_curve: [f64; 3],
    /// `b(z)` interpolates linearly from the first to the second value over `u`.
    pub loading: [f64; 2],
    pub k_drift: f64,
    pub k_volatility: f64,
    /// Log-rate gap between males and females, split evenly around zero.
    pub sex_effect: f64,
    pub prefecture_effect_scale: f64,
    /// Exposure of a unit-sized prefecture and sex at age zero.
    pub exposure_scale: f64,
    /// Exposure decays like `exp(-exposure_age_decay * z)`.
    pub exposure_age_decay: f64,
    /// Standard deviation of the yearly log-exposure disturbance of each
    /// (prefecture, sex), shared across ages.
    pub exposure_noise: f64,
    pub shocks: Vec<Shock>,
    /// Draw Poisson deaths; when off, deaths equal their expectation.
    pub poisson_noise: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_years: 30,
            first_year: 1985,
            grid: AgeGrid::regular(0, 100, 10).expect("static grid"),
            regions: vec![2, 2],
            seed: 42,
            base_curve: [-7.0, -1.0, 7.5],
            loading: [0.04, 0.01],
            k_drift: -1.0,
            k_volatility: 0.5,
            sex_effect: 0.4,
            prefecture_effect_scale: 0.1,
            exposure_scale: 20_000.0,
            exposure_age_decay: 0.03,
            exposure_noise: 0.01,
            shocks: Vec::new(),
            poisson_noise: true,
        }
    }
}

impl SimConfig {
    /// Eight regions holding 47 prefectures, the layout of the Japanese panel.
    pub fn japan_shape() -> Self {
        Self {
            regions: vec![1, 6, 7, 9, 7, 5, 4, 8],
            ..Self::default()
        }
    }

    pub fn n_prefectures(&self) -> usize {
        self.regions.iter().sum()
    }

    pub fn prefecture_names(&self) -> Vec<String> {
        (1..=self.n_prefectures()).map(|i| format!("P{i:02}")).collect()
    }

    pub fn region_of(&self) -> BTreeMap<String, String> {
        let names = self.prefecture_names();
        let mut out = BTreeMap::new();
        let mut next = 0;
        for (r, &count) in self.regions.iter().enumerate() {
            for name in &names[next..next + count] {
                out.insert(name.clone(), format!("R{}", r + 1));
            }
            next += count;
        }
        out
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: &str| Err(SimError::Config(m.into()));
        if self.n_years == 0 {
            return bad("n_years must be positive");
        }
        if self.regions.is_empty() || self.regions.contains(&0) {
            return bad("every region needs at least one prefecture");
        }
        if self.grid.ages().iter().any(|a| a.fract() != 0.0 || *a < 0.0) {
            return bad("ages must be non-negative integers");
        }
        let scales = [
            self.k_volatility,
            self.prefecture_effect_scale,
            self.exposure_age_decay,
            self.exposure_noise,
        ];
        if scales.iter().any(|s| !s.is_finite() || *s < 0.0) {
            return bad("scales must be finite and non-negative");
        }
        if !(self.exposure_scale.is_finite() && self.exposure_scale > 0.0) {
            return bad("exposure_scale must be positive");
        }
        let finite = self.base_curve.iter().chain(&self.loading).chain([&self.k_drift, &self.sex_effect]);
        if finite.into_iter().any(|v| !v.is_finite()) {
            return bad("curve parameters must be finite");
        }
        let names = self.prefecture_names();
        for s in &self.shocks {
            if s.year_index >= self.n_years {
                return bad("shock year lies outside the simulated span");
            }
            if !(s.multiplier.is_finite() && s.multiplier > 0.0) {
                return bad("shock multiplier must be positive");
            }
            if s.prefectures.iter().any(|p| !names.contains(p)) {
                return bad("shock names an unknown prefecture");
            }
        }
        Ok(())
    }

    /// Six-level scheme: total, sex, region, region x sex, prefecture, prefecture x sex.
    pub fn scheme(&self) -> Result<GroupingScheme, SimError> {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        Ok(GroupingScheme::new(
            s(&["sex", "region", "prefecture"]),
            s(&["prefecture", "sex"]),
            vec![
                vec![],
                s(&["sex"]),
                s(&["region"]),
                s(&["region", "sex"]),
                s(&["prefecture"]),
                s(&["prefecture", "sex"]),
            ],
            vec![Refinement {
                child: "prefecture".into(),
                parent: "region".into(),
                map: self.region_of(),
            }],
        )?)
    }

    fn base(&self, z: f64) -> f64 {
        let u = z / 100.0;
        let [c0, c1, c2] = self.base_curve;
        c0 + c1 * u + c2 * u * u
    }

    fn loading_at(&self, z: f64) -> f64 {
        let u = z / 100.0;
        self.loading[0] + (self.loading[1] - self.loading[0]) * u
    }
}

/// Generated panel plus the latent truth it was drawn from.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub dataset: GroupedDataset,
    /// Latent bottom-level rates, `years x ages`.
    pub latent: BTreeMap<SeriesKey, DMatrix<f64>>,
    pub period_index: Vec<f64>,
    pub base_curve: Vec<f64>,
    pub loading: Vec<f64>,
}

pub const SEXES: [&str; 2] = ["F", "M"];

const STREAM_PERIOD: u64 = 0;
const STREAM_EFFECTS: u64 = 1;
const STREAM_DEATHS: u64 = 1_000;

pub fn generate(config: &SimConfig) -> Result<Simulation, SimError> {
    config.validate()?;
    let ages = config.grid.ages();
    let (n, p) = (config.n_years, ages.len());

    let mut rng = task_rng(config.seed, STREAM_PERIOD);
    let eps = Normal::new(0.0, 1.0).expect("unit normal");
    let mut k = Vec::with_capacity(n);
    let mut level = 0.0;
    for t in 0..n {
        if t > 0 {
            level += config.k_drift + config.k_volatility * eps.sample(&mut rng);
        }
        k.push(level);
    }

    let base: Vec<f64> = ages.iter().map(|&z| config.base(z)).collect();
    let loading: Vec<f64> = ages.iter().map(|&z| config.loading_at(z)).collect();
    let region_of = config.region_of();
    let years: Vec<i32> = (0..n as i32).map(|t| config.first_year + t).collect();

    let mut rng = task_rng(config.seed, STREAM_EFFECTS);
    let mut bottom = BTreeMap::new();
    let mut latent = BTreeMap::new();
    for (i, (pref, _)) in region_of.iter().enumerate() {
        let effect = config.prefecture_effect_scale * eps.sample(&mut rng);
        let size: f64 = rng.random_range(0.5..2.0);
        let growth: f64 = rng.random_range(-0.01..0.01);
        for (j, sex) in SEXES.iter().enumerate() {
            let sex_term = if j == 0 { -0.5 } else { 0.5 } * config.sex_effect;
            let mut rate = DMatrix::from_fn(n, p, |t, z| (base[z] + loading[z] * k[t] + sex_term + effect).exp());
            for s in &config.shocks {
                if s.prefectures.iter().any(|x| x == pref) {
                    rate.row_mut(s.year_index).iter_mut().for_each(|r| *r *= s.multiplier);
                }
            }
            let wobble: Vec<f64> = (0..n).map(|_| (config.exposure_noise * eps.sample(&mut rng)).exp()).collect();
            let exposure = DMatrix::from_fn(n, p, |t, z| {
                config.exposure_scale
                    * size
                    * wobble[t]
                    * (-config.exposure_age_decay * ages[z]).exp()
                    * (1.0 + growth).powi(t as i32)
            });
            let mut deaths = rate.component_mul(&exposure);
            if config.poisson_noise {
                let mut drng = task_rng(config.seed, STREAM_DEATHS + (2 * i + j) as u64);
                for d in deaths.iter_mut() {
                    *d = Poisson::new(*d).map(|dist| dist.sample(&mut drng)).unwrap_or(0.0);
                }
            }
            let key = SeriesKey::from_pairs([("prefecture", pref.as_str()), ("sex", sex)]);
            latent.insert(key.clone(), rate);
            bottom.insert(key, CountPanel { deaths, exposure });
        }
    }
    let dataset = GroupedDataset::new(config.grid.clone(), config.scheme()?, years, bottom)?;
    Ok(Simulation {
        dataset,
        latent,
        period_index: k,
        base_curve: base,
        loading,
    })
}

/// Latent truth as `year,age,prefecture,sex,rate`.
pub fn write_latent<W: Write>(sim: &Simulation, mut out: W) -> Result<(), SimError> {
    writeln!(out, "year,age,prefecture,sex,rate")?;
    let ages = sim.dataset.grid().ages();
    for (key, rate) in &sim.latent {
        let pref = key.get("prefecture").unwrap_or_default();
        let sex = key.get("sex").unwrap_or_default();
        for (t, year) in sim.dataset.years().iter().enumerate() {
            for (z, age) in ages.iter().enumerate() {
                writeln!(out, "{year},{age},{pref},{sex},{:e}", rate[(t, z)])?;
            }
        }
    }
    Ok(())
}
