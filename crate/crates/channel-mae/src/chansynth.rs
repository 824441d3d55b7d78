//! Synthetic multipath MISO-OFDM channel generation.
//!
//! A transparent geometric ray-sum model stands in for measured scenes:
//! every sample draws a path set (gains, delays, angles, optional LoS ray)
//! from a seeded stream and renders it at both carriers over a half-wavelength
//! ULA, so the sub-6 GHz and mmWave views of one sample share geometry.
//! Scenario ids perturb the draw distributions, giving statistically distinct
//! populations for pretraining vs. downstream evaluation.

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;

use crate::complexmat::ComplexMatrix;
use crate::error::{Error, Result};
use crate::seeding::{self, mix2, mix3, rng_from};

/// Antenna/subcarrier geometry plus generation knobs.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemConfig {
    pub n_antennas: usize,
    pub n_subcarriers: usize,
    /// Subcarrier spacing in Hz.
    pub subcarrier_spacing: f64,
    /// Sub-6 GHz carrier, the model input band.
    pub carrier_low: f64,
    /// mmWave carrier used for beam labels.
    pub carrier_high: f64,
    pub max_paths: usize,
    /// Probability that a sample carries a line-of-sight ray.
    pub p_los: f64,
    /// Number of distinct scenario populations cycled over a dataset.
    pub n_scenarios: u32,
    /// First scenario id; shift to draw from unseen populations.
    pub scenario_base: u32,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            n_antennas: 32,
            n_subcarriers: 32,
            subcarrier_spacing: 30e3,
            carrier_low: 3.5e9,
            carrier_high: 28e9,
            max_paths: 20,
            p_los: 0.5,
            n_scenarios: 8,
            scenario_base: 0,
        }
    }
}

impl SystemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_antennas == 0 || self.n_subcarriers == 0 {
            return Err(Error::config("antenna and subcarrier counts must be at least 1"));
        }
        if self.max_paths == 0 || self.max_paths > 20 {
            return Err(Error::config(format!(
                "max_paths must lie in [1, 20], got {}",
                self.max_paths
            )));
        }
        if self.subcarrier_spacing <= 0.0 {
            return Err(Error::config("subcarrier spacing must be positive"));
        }
        if self.carrier_low <= 0.0 || self.carrier_high <= 0.0 {
            return Err(Error::config("carrier frequencies must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_los) {
            return Err(Error::config(format!("p_los must lie in [0, 1], got {}", self.p_los)));
        }
        if self.n_scenarios == 0 {
            return Err(Error::config("n_scenarios must be at least 1"));
        }
        Ok(())
    }
}

/// One propagation path.
#[derive(Clone, Debug, PartialEq)]
pub struct Path {
    /// Complex gain at the low carrier.
    pub gain: Complex64,
    /// Excess delay in seconds, nonnegative.
    pub delay: f64,
    /// Angle of departure in (-pi/2, pi/2).
    pub angle: f64,
    pub los: bool,
}

/// The drawn multipath geometry of one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub paths: Vec<Path>,
}

impl PathSet {
    pub fn has_los(&self) -> bool {
        self.paths.iter().any(|p| p.los)
    }
}

/// One dataset record: the same geometry rendered at both carriers.
#[derive(Clone, Debug)]
pub struct ChannelSample {
    pub h_low: ComplexMatrix,
    pub h_high: ComplexMatrix,
    pub los: bool,
    pub seed: u64,
    pub scenario_id: u32,
}

/// Scenario-dependent draw parameters, a pure function of the scenario id.
#[derive(Clone, Debug)]
struct ScenarioProfile {
    angle_center: f64,
    angle_halfwidth: f64,
    delay_scale: f64,
    /// Exponential power-delay-profile decay over the delay spread.
    decay_rate: f64,
    /// LoS power relative to the unit total non-LoS power.
    los_k_factor: f64,
}

fn scenario_profile(scenario_id: u32) -> ScenarioProfile {
    let mut rng = rng_from(mix2(seeding::SALT_SCENARIO, scenario_id as u64));
    ScenarioProfile {
        angle_center: rng.gen_range(-0.6..0.6),
        angle_halfwidth: rng.gen_range(0.25..0.9),
        delay_scale: rng.gen_range(0.4..1.0),
        decay_rate: rng.gen_range(2.0..6.0),
        los_k_factor: rng.gen_range(2.0..6.0),
    }
}

/// Draws the path set for one (seed, scenario) pair.
pub fn sample_paths(seed: u64, scenario_id: u32, config: &SystemConfig) -> PathSet {
    let profile = scenario_profile(scenario_id);
    let mut rng = rng_from(mix3(seed, seeding::SALT_PATHS, scenario_id as u64));

    let count = rng.gen_range(1..=config.max_paths);
    let has_los = rng.gen_bool(config.p_los);
    let spread = 0.25 / config.subcarrier_spacing * profile.delay_scale;

    let delays: Vec<f64> = (0..count).map(|_| rng.gen_range(0.0..spread)).collect();
    let angles: Vec<f64> = (0..count)
        .map(|_| profile.angle_center + rng.gen_range(-profile.angle_halfwidth..profile.angle_halfwidth))
        .collect();

    // The LoS ray, when present, is the earliest arrival.
    let los_idx = if has_los {
        let mut best = 0;
        for (i, d) in delays.iter().enumerate() {
            if *d < delays[best] {
                best = i;
            }
        }
        Some(best)
    } else {
        None
    };

    // Exponential power-delay profile over non-LoS paths, normalized to unit
    // total expected power; the LoS ray sits k_factor above that total.
    let weights: Vec<f64> = delays
        .iter()
        .map(|d| (-d * profile.decay_rate / spread).exp())
        .collect();
    let nlos_total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != los_idx)
        .map(|(_, w)| w)
        .sum();

    let mut paths = Vec::with_capacity(count);
    for i in 0..count {
        let is_los = Some(i) == los_idx;
        let gain = if is_los {
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            Complex64::from_polar(profile.los_k_factor.sqrt(), phase)
        } else {
            let power = if nlos_total > 0.0 { weights[i] / nlos_total } else { 0.0 };
            let sigma = (power / 2.0).sqrt();
            let re: f64 = rng.sample(rand_distr::StandardNormal);
            let im: f64 = rng.sample(rand_distr::StandardNormal);
            Complex64::new(sigma * re, sigma * im)
        };
        paths.push(Path { gain, delay: delays[i], angle: angles[i], los: is_los });
    }
    PathSet { paths }
}

/// Renders the frequency-domain response of `paths` at `carrier` over the
/// (antenna, subcarrier) grid:
///
/// `H[s,f] = sum_p g_p(carrier) * exp(-j*2*pi*(carrier + f*spacing)*tau_p)
///           * exp(j*pi*s*sin(theta_p))`
///
/// with gains scaled by `carrier_low / carrier` away from the low band.
pub fn render_channel(paths: &PathSet, carrier: f64, config: &SystemConfig) -> ComplexMatrix {
    let (n_s, n_f) = (config.n_antennas, config.n_subcarriers);
    let scale = config.carrier_low / carrier;
    let mut h = ComplexMatrix::zeros(n_s, n_f);

    let mut freq_phase = vec![Complex64::new(0.0, 0.0); n_f];
    let mut ant_phase = vec![Complex64::new(0.0, 0.0); n_s];
    for path in &paths.paths {
        let amp = path.gain * scale;
        for (f, slot) in freq_phase.iter_mut().enumerate() {
            let phi = -std::f64::consts::TAU * (carrier + f as f64 * config.subcarrier_spacing) * path.delay;
            *slot = Complex64::from_polar(1.0, phi);
        }
        let sin_theta = path.angle.sin();
        for (s, slot) in ant_phase.iter_mut().enumerate() {
            *slot = Complex64::from_polar(1.0, std::f64::consts::PI * s as f64 * sin_theta);
        }
        for s in 0..n_s {
            let base = amp * ant_phase[s];
            let row = &mut h.data_mut()[s * n_f..(s + 1) * n_f];
            for (slot, fp) in row.iter_mut().zip(&freq_phase) {
                *slot += base * fp;
            }
        }
    }
    h
}

/// Renders one record at both carriers from its own seed.
pub fn generate_sample(seed: u64, scenario_id: u32, config: &SystemConfig) -> ChannelSample {
    let paths = sample_paths(seed, scenario_id, config);
    ChannelSample {
        h_low: render_channel(&paths, config.carrier_low, config),
        h_high: render_channel(&paths, config.carrier_high, config),
        los: paths.has_los(),
        seed,
        scenario_id,
    }
}

/// Record seed for position `i` of a dataset generated from `seed`.
pub fn record_seed(seed: u64, i: u64) -> u64 {
    mix3(seed, seeding::SALT_RECORD, i)
}

/// Generates `count` records. Each record depends only on its own derived
/// seed, so any thread count produces identical output; `threads == 0` runs
/// serially.
pub fn generate_records(count: usize, config: &SystemConfig, seed: u64, threads: usize) -> Result<Vec<ChannelSample>> {
    config.validate()?;
    let make = |i: usize| {
        let scenario = config.scenario_base + (i as u32 % config.n_scenarios);
        generate_sample(record_seed(seed, i as u64), scenario, config)
    };
    if threads == 0 {
        Ok((0..count).map(make).collect())
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
        Ok(pool.install(|| (0..count).into_par_iter().map(make).collect()))
    }
}

/// Per-split record counts and the stored normalization constant.
#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub count: usize,
    pub normalization_std: f64,
    pub split_counts: Vec<usize>,
}

/// Generates `count` records and writes them as one dataset file.
///
/// `ratios[0]` is the training fraction; the normalization std stored in the
/// header is computed over that split so later consumers reproduce the same
/// scaling. Regenerating with identical arguments yields identical bytes.
pub fn generate_dataset(
    count: usize,
    ratios: &[f64],
    config: &SystemConfig,
    seed: u64,
    threads: usize,
    path: &std::path::Path,
) -> Result<DatasetSummary> {
    if count == 0 {
        return Err(Error::contract("dataset must contain at least one record".to_string()));
    }
    let records = generate_records(count, config, seed, threads)?;
    let seeds: Vec<u64> = records.iter().map(|r| r.seed).collect();
    let splits = crate::dataset::split_indices(&seeds, ratios)?;
    let normalization_std = crate::dataset::normalization_std(&records, &splits[0]);
    let ds = crate::dataset::Dataset {
        n_s: config.n_antennas,
        n_f: config.n_subcarriers,
        normalization_std,
        records,
    };
    crate::dataset::write(&ds, path)?;
    Ok(DatasetSummary {
        count,
        normalization_std,
        split_counts: splits.iter().map(|s| s.len()).collect(),
    })
}
