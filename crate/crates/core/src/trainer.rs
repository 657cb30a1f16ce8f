//! Variational Monte Carlo optimisation: sampling, local energies, the
//! log-derivative gradient estimator, Adam with step decay and clipping,
//! best-model selection and binned evaluation.

use std::collections::HashMap;
use std::io::Write;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Trainable, WaveAmplitude, WaveFunction};
use crate::error::{Error, Result};
use crate::exact::SectorBasis;
use crate::hamiltonian::{bits_to_config, config_to_bits, Hamiltonian, SpinConfig};
use crate::sampler::{Sampler, SamplerConfig, DEFAULT_BURNIN_SWEEPS};
use crate::tensor::{ParamGrads, Parameters};

pub const DECAY_FACTOR: f64 = 0.1;
pub const SMOOTHING_WINDOW: usize = 50;

/// Learning-rate decay events, each multiplying the rate by 0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DecaySchedule {
    /// Explicit, strictly increasing steps.
    Steps(Vec<usize>),
    /// A decay every `every` steps.
    Every { every: usize },
}

impl Default for DecaySchedule {
    fn default() -> Self {
        DecaySchedule::Steps(Vec::new())
    }
}

impl DecaySchedule {
    /// Number of decay events at or before `step`.
    pub fn events_before(&self, step: usize) -> usize {
        match self {
            DecaySchedule::Steps(s) => s.iter().filter(|&&d| d <= step).count(),
            DecaySchedule::Every { every } => step / every,
        }
    }

    pub fn first(&self) -> Option<usize> {
        match self {
            DecaySchedule::Steps(s) => s.first().copied(),
            DecaySchedule::Every { every } => Some(*every),
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            DecaySchedule::Steps(s) => {
                if s.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(Error::Config("decay steps must be strictly increasing".into()));
                }
                Ok(())
            }
            DecaySchedule::Every { every } if *every == 0 => {
                Err(Error::Config("decay interval must be positive".into()))
            }
            DecaySchedule::Every { .. } => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of Markov chains, one sample per chain per step.
    pub batch_size: usize,
    pub lr: f64,
    pub decay_steps: DecaySchedule,
    pub grad_clip: Option<f64>,
    pub clip_after_first_decay: bool,
    pub max_steps: usize,
    pub seed: u64,
    pub burn_in_sweeps: usize,
    /// Metropolis steps between samples; `None` means `N`.
    pub thinning: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 500,
            lr: 1e-3,
            decay_steps: DecaySchedule::default(),
            grad_clip: None,
            clip_after_first_decay: false,
            max_steps: 30000,
            seed: 0,
            burn_in_sweeps: DEFAULT_BURNIN_SWEEPS,
            thinning: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("grad_clip {c} must be positive")));
            }
        }
        if self.thinning == Some(0) {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        self.decay_steps.validate()
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.lr * DECAY_FACTOR.powi(self.decay_steps.events_before(step) as i32)
    }

    pub fn clip_at(&self, step: usize) -> Option<f64> {
        let active = !self.clip_after_first_decay
            || self.decay_steps.first().is_some_and(|d| step >= d);
        self.grad_clip.filter(|_| active)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub n_samples: usize,
    pub n_bins: usize,
    pub chains_per_bin: usize,
    pub burn_in_sweeps: usize,
    pub thinning: Option<usize>,
    /// Divide the bin spread by `sqrt(n_bins)`.
    pub standard_error: bool,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 200_000,
            n_bins: 100,
            chains_per_bin: 2,
            burn_in_sweeps: DEFAULT_BURNIN_SWEEPS,
            thinning: None,
            standard_error: false,
            seed: 1_000_003,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEstimate {
    pub energy_per_site: f64,
    pub error_bar: f64,
    pub energy_imag_per_site: f64,
    pub n_samples: usize,
    pub n_bins: usize,
    pub standard_error: bool,
    pub acceptance_rate: f64,
}

#[derive(Clone, Debug)]
pub struct LocalEnergyStats {
    pub e_loc: Vec<Complex64>,
    pub mean: Complex64,
    /// Population variance `mean |E_loc - mean|^2`.
    pub variance: f64,
}

impl LocalEnergyStats {
    pub fn from_values(e_loc: Vec<Complex64>) -> Result<Self> {
        if e_loc.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let n = e_loc.len() as f64;
        let mean = e_loc.iter().sum::<Complex64>() / n;
        let variance = e_loc.iter().map(|e| (e - mean).norm_sqr()).sum::<f64>() / n;
        Ok(Self { e_loc, mean, variance })
    }
}

/// Mean and variance of `E_loc` over `configs`.
pub fn estimate_energy(ham: &Hamiltonian, wf: &dyn WaveFunction, configs: &[&[i8]]) -> Result<LocalEnergyStats> {
    LocalEnergyStats::from_values(ham.local_energies(wf, configs)?)
}

/// Gradient of the surrogate `(2/B) sum_c [Re dE_c log_amp(c) + Im dE_c phase(c)]`
/// with `dE_c = E_loc(c) - mean` held fixed. Repeated configurations are
/// evaluated once with summed weights.
pub fn estimate_gradient(wf: &dyn Trainable, configs: &[&[i8]], e_loc: &[Complex64]) -> Result<ParamGrads> {
    if configs.is_empty() || configs.len() != e_loc.len() {
        return Err(Error::Shape {
            op: "estimate_gradient",
            lhs: vec![configs.len()],
            rhs: vec![e_loc.len()],
        });
    }
    let b = configs.len() as f64;
    let mean = e_loc.iter().sum::<Complex64>() / b;
    let mut index: HashMap<&[i8], usize> = HashMap::new();
    let mut unique: Vec<&[i8]> = Vec::new();
    let mut w_amp: Vec<f64> = Vec::new();
    let mut w_phase: Vec<f64> = Vec::new();
    for (&c, e) in configs.iter().zip(e_loc) {
        let d = (e - mean) * (2.0 / b);
        let k = *index.entry(c).or_insert_with(|| {
            unique.push(c);
            w_amp.push(0.0);
            w_phase.push(0.0);
            unique.len() - 1
        });
        w_amp[k] += d.re;
        w_phase[k] += d.im;
    }
    Ok(wf.backprop(&unique, &w_amp, &w_phase)?.1)
}

/// Scales `grads` to norm at most `max`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max: f64) -> f64 {
    let norm = grads.norm();
    if norm > max {
        grads.scale(max / norm);
    }
    norm
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &Parameters) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut Parameters, grads: &ParamGrads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads.get(id).data();
            let p = params.get_mut(id).data_mut();
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub energy_per_site: f64,
    pub e_loc_variance: f64,
    pub acceptance_rate: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct BestModel {
    pub params: Parameters,
    pub step: usize,
    /// Smoothed training energy per site.
    pub energy_per_site: f64,
}

/// Tracks the lowest windowed-mean energy among windows whose variance is
/// at or below the median window variance seen so far.
#[derive(Clone, Debug)]
pub struct StableMinimum {
    window: usize,
    recent: Vec<f64>,
    variances: Vec<f64>,
    pub best: Option<(usize, f64)>,
}

impl StableMinimum {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            recent: Vec::new(),
            variances: Vec::new(),
            best: None,
        }
    }

    /// Feeds one energy; returns true when `step` becomes the new best.
    pub fn push(&mut self, step: usize, energy: f64) -> bool {
        self.recent.push(energy);
        if self.recent.len() > self.window {
            self.recent.remove(0);
        }
        if self.recent.len() < self.window {
            return false;
        }
        let n = self.window as f64;
        let mean = self.recent.iter().sum::<f64>() / n;
        let var = self.recent.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
        self.variances.push(var);
        let mut scratch = self.variances.clone();
        let mid = (scratch.len() - 1) / 2;
        let (_, median, _) = scratch.select_nth_unstable_by(mid, f64::total_cmp);
        let stable = var <= *median;
        if stable && self.best.map_or(true, |(_, b)| mean < b) {
            self.best = Some((step, mean));
            return true;
        }
        false
    }
}

pub struct Trainer<W: Trainable> {
    pub wf: W,
    pub ham: Hamiltonian,
    pub config: TrainConfig,
    pub sampler: Sampler,
    pub adam: Adam,
    pub step: usize,
    pub best: Option<BestModel>,
    tracker: StableMinimum,
}

impl<W: Trainable> Trainer<W> {
    pub fn new(wf: W, ham: Hamiltonian, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if wf.n_sites() != ham.n_sites {
            return Err(Error::Config(format!(
                "ansatz has {} sites but the Hamiltonian has {}",
                wf.n_sites(),
                ham.n_sites
            )));
        }
        let sampler = Sampler::new(
            ham.n_sites,
            SamplerConfig {
                n_chains: config.batch_size,
                burnin_sweeps: config.burn_in_sweeps,
                thinning: config.thinning,
                seed: config.seed,
            },
        )?;
        let adam = Adam::new(wf.parameters());
        Ok(Self {
            wf,
            ham,
            config,
            sampler,
            adam,
            step: 0,
            best: None,
            tracker: StableMinimum::new(SMOOTHING_WINDOW),
        })
    }

    /// One optimisation step: sample, estimate, update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let n = self.ham.n_sites as f64;
        let version = self.wf.version();
        let batch = self.sampler.run(&self.wf, version, 1)?;
        let refs = batch.refs();
        let wf = &self.wf;
        let cache = &mut self.sampler.cache;
        let e_loc = self
            .ham
            .local_energies_with(&refs, &batch.amps, |cs| cache.eval(wf, version, cs))
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence { step },
                e => e,
            })?;
        let stats = LocalEnergyStats::from_values(e_loc)?;
        if !stats.mean.re.is_finite() {
            return Err(Error::Divergence { step });
        }
        let mut grads = estimate_gradient(&self.wf, &refs, &stats.e_loc)?;
        let grad_norm = match self.config.clip_at(step) {
            Some(c) => clip_grad_norm(&mut grads, c),
            None => grads.norm(),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Divergence { step });
        }
        let record = StepRecord {
            step,
            energy_per_site: stats.mean.re / n,
            e_loc_variance: stats.variance,
            acceptance_rate: batch.acceptance_rate,
            lr: self.config.lr_at(step),
            grad_norm,
        };
        // The model that produced this energy is the one before the update.
        if self.tracker.push(step, record.energy_per_site) {
            let (s, e) = self.tracker.best.unwrap();
            self.best = Some(BestModel {
                params: self.wf.parameters().clone(),
                step: s,
                energy_per_site: e,
            });
        }
        self.adam.step(self.wf.parameters_mut(), &grads, record.lr);
        self.step += 1;
        Ok(record)
    }

    /// Runs until `max_steps`, writing one JSON record per line to `log`.
    pub fn train(&mut self, log: &mut dyn Write) -> Result<()> {
        while self.step < self.config.max_steps {
            let rec = self.train_step()?;
            serde_json::to_writer(&mut *log, &rec)?;
            log.write_all(b"\n")?;
        }
        log.flush()?;
        Ok(())
    }

    /// Parameters of the best stable model, or the current ones if no
    /// window has completed yet.
    pub fn best_parameters(&self) -> &Parameters {
        self.best.as_ref().map_or(self.wf.parameters(), |b| &b.params)
    }
}

/// Binned energy estimate from fresh chains: bins group `chains_per_bin`
/// chains each, and the error bar is the standard deviation of bin means.
pub fn evaluate(ham: &Hamiltonian, wf: &dyn WaveFunction, version: u64, cfg: &EvalConfig) -> Result<EnergyEstimate> {
    if cfg.n_bins < 2 || cfg.chains_per_bin == 0 {
        return Err(Error::Config("evaluation needs at least 2 bins and 1 chain per bin".into()));
    }
    let per_bin = cfg.n_samples / cfg.n_bins;
    let per_chain = per_bin / cfg.chains_per_bin;
    if per_chain == 0 {
        return Err(Error::Config(format!(
            "{} samples are too few for {} bins of {} chains",
            cfg.n_samples, cfg.n_bins, cfg.chains_per_bin
        )));
    }
    let used = per_chain * cfg.chains_per_bin * cfg.n_bins;
    if used != cfg.n_samples {
        eprintln!(
            "warning: {} samples do not split evenly into {} bins of {} chains; using {used}",
            cfg.n_samples, cfg.n_bins, cfg.chains_per_bin
        );
    }
    let n_chains = cfg.n_bins * cfg.chains_per_bin;
    let mut sampler = Sampler::new(
        ham.n_sites,
        SamplerConfig {
            n_chains,
            burnin_sweeps: cfg.burn_in_sweeps,
            thinning: cfg.thinning,
            seed: cfg.seed,
        },
    )?;
    // Collect in slices to bound memory; chains continue between slices.
    let slice = per_chain.min(100);
    let mut sums = vec![Complex64::new(0.0, 0.0); n_chains];
    let (mut acc, mut prop) = (0.0, 0.0);
    let mut done = 0;
    while done < per_chain {
        let k = slice.min(per_chain - done);
        let batch = sampler.run(wf, version, k)?;
        let refs = batch.refs();
        let cache = &mut sampler.cache;
        let e_loc = ham.local_energies_with(&refs, &batch.amps, |cs| cache.eval(wf, version, cs))?;
        for (i, e) in e_loc.iter().enumerate() {
            sums[i / k] += e;
        }
        acc += batch.acceptance_rate * k as f64;
        prop += k as f64;
        done += k;
    }
    let n = ham.n_sites as f64;
    let bin_means: Vec<f64> = sums
        .chunks(cfg.chains_per_bin)
        .map(|c| c.iter().map(|z| z.re).sum::<f64>() / (per_chain * cfg.chains_per_bin) as f64 / n)
        .collect();
    let total: Complex64 = sums.iter().sum::<Complex64>() / (used as f64 * n);
    let mean = bin_means.iter().sum::<f64>() / bin_means.len() as f64;
    let var = bin_means.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (bin_means.len() - 1) as f64;
    let mut error_bar = var.sqrt();
    if cfg.standard_error {
        error_bar /= (cfg.n_bins as f64).sqrt();
    }
    Ok(EnergyEstimate {
        energy_per_site: total.re,
        error_bar,
        energy_imag_per_site: total.im,
        n_samples: used,
        n_bins: cfg.n_bins,
        standard_error: cfg.standard_error,
        acceptance_rate: acc / prop.max(1.0),
    })
}

/// Normalised `|psi|^2` over the sector basis, from amplitudes.
fn probabilities(amps: &[WaveAmplitude]) -> Vec<f64> {
    let max = amps.iter().map(|a| a.log_amp).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = amps.iter().map(|a| (2.0 * (a.log_amp - max)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Neighbour amplitudes read from the already evaluated sector.
fn sector_lookup(basis: &SectorBasis, amps: &[WaveAmplitude], configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
    configs
        .iter()
        .map(|c| {
            basis
                .index(config_to_bits(c))
                .map(|i| amps[i])
                .ok_or_else(|| Error::Config("configuration outside the Sz = 0 sector".into()))
        })
        .collect()
}

fn sector_configs(basis: &SectorBasis) -> Vec<SpinConfig> {
    basis.states.iter().map(|&b| bits_to_config(b, basis.n_sites)).collect()
}

/// Exact variational energy `<psi|H|psi> / <psi|psi>` by summing over the
/// whole sector.
pub fn full_enumeration_energy(ham: &Hamiltonian, wf: &dyn WaveFunction, basis: &SectorBasis) -> Result<Complex64> {
    let configs = sector_configs(basis);
    let refs: Vec<&[i8]> = configs.iter().map(Vec::as_slice).collect();
    let amps = wf.log_psi_batch(&refs)?;
    let e_loc = ham.local_energies_with(&refs, &amps, |cs| sector_lookup(basis, &amps, cs))?;
    let p = probabilities(&amps);
    Ok(p.iter().zip(&e_loc).map(|(p, e)| e * p).sum())
}

/// Exact energy and its gradient `2 Re <(E_loc - E) O*>` over the sector.
pub fn full_enumeration_gradient(
    ham: &Hamiltonian,
    wf: &dyn Trainable,
    basis: &SectorBasis,
) -> Result<(Complex64, ParamGrads)> {
    let configs = sector_configs(basis);
    let refs: Vec<&[i8]> = configs.iter().map(Vec::as_slice).collect();
    let amps = wf.log_psi_batch(&refs)?;
    let e_loc = ham.local_energies_with(&refs, &amps, |cs| sector_lookup(basis, &amps, cs))?;
    let p = probabilities(&amps);
    let energy: Complex64 = p.iter().zip(&e_loc).map(|(p, e)| e * p).sum();
    let w_amp: Vec<f64> = p.iter().zip(&e_loc).map(|(p, e)| 2.0 * p * (e - energy).re).collect();
    let w_phase: Vec<f64> = p.iter().zip(&e_loc).map(|(p, e)| 2.0 * p * (e - energy).im).collect();
    let (_, grads) = wf.backprop(&refs, &w_amp, &w_phase)?;
    Ok((energy, grads))
}
