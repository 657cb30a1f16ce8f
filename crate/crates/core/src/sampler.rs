//! Metropolis-Hastings sampling of `|psi|^2` in the zero-magnetisation
//! sector.
//!
//! All chains advance in lock-step so that proposals are evaluated as one
//! batch. Each chain owns its generator, so trajectories do not depend on
//! how the batch is split across threads.

use std::collections::HashMap;

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{WaveAmplitude, WaveFunction};
use crate::error::{Error, Result};
use crate::hamiltonian::SpinConfig;

pub const DEFAULT_BURNIN_SWEEPS: usize = 100;

/// Largest system whose configurations fit the cache key.
pub const MAX_CACHED_SITES: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub n_chains: usize,
    /// Burn-in length in sweeps of `N` steps.
    pub burnin_sweeps: usize,
    /// Steps between retained samples; `None` means `N`.
    pub thinning: Option<usize>,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_chains: 100,
            burnin_sweeps: DEFAULT_BURNIN_SWEEPS,
            thinning: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Chain {
    pub state: SpinConfig,
    pub rng: ChaCha8Rng,
    pub amp: WaveAmplitude,
    pub accepted: u64,
    pub proposed: u64,
    pub rejected_nonfinite: u64,
    up: Vec<usize>,
    down: Vec<usize>,
}

impl Chain {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut state: SpinConfig = (0..n).map(|i| if i < n / 2 { 1 } else { -1 }).collect();
        state.shuffle(&mut rng);
        let up = (0..n).filter(|&i| state[i] > 0).collect();
        let down = (0..n).filter(|&i| state[i] < 0).collect();
        Self {
            state,
            rng,
            amp: WaveAmplitude {
                log_amp: f64::NAN,
                phase: 0.0,
            },
            accepted: 0,
            proposed: 0,
            rejected_nonfinite: 0,
            up,
            down,
        }
    }

    /// Picks one up and one down site; returns their positions in the
    /// up/down lists.
    fn propose(&mut self) -> (usize, usize) {
        let a = self.rng.gen_range(0..self.up.len());
        let b = self.rng.gen_range(0..self.down.len());
        (a, b)
    }

    fn proposal_state(&self, (a, b): (usize, usize)) -> SpinConfig {
        let mut s = self.state.clone();
        s.swap(self.up[a], self.down[b]);
        s
    }

    fn accept(&mut self, (a, b): (usize, usize), amp: WaveAmplitude) {
        let (i, j) = (self.up[a], self.down[b]);
        self.state.swap(i, j);
        self.up[a] = j;
        self.down[b] = i;
        self.amp = amp;
        self.accepted += 1;
    }
}

/// `B` chains of `N` spins, each a random arrangement of `N/2` up spins;
/// chain `k` is seeded with `base_seed + k`.
pub fn init_chains(b: usize, n: usize, base_seed: u64) -> Result<Vec<Chain>> {
    if n == 0 || n % 2 != 0 {
        return Err(Error::Config(format!(
            "the zero-magnetisation sector needs an even number of sites, got {n}"
        )));
    }
    Ok((0..b)
        .map(|k| Chain::new(n, base_seed.wrapping_add(k as u64)))
        .collect())
}

fn pack(c: &[i8]) -> u128 {
    c.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .fold(0u128, |acc, (i, _)| acc | (1u128 << i))
}

/// Memo of amplitudes for one parameter version.
#[derive(Debug, Default)]
pub struct AmplitudeCache {
    version: Option<u64>,
    map: HashMap<u128, WaveAmplitude>,
    pub max_entries: usize,
    pub enabled: bool,
    pub hits: u64,
    pub misses: u64,
}

impl AmplitudeCache {
    pub fn new(enabled: bool) -> Self {
        Self {
            enabled,
            max_entries: 1 << 22,
            ..Self::default()
        }
    }

    pub fn clear(&mut self) {
        self.map.clear();
        self.version = None;
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Amplitudes of `configs` under parameter `version`; only uncached,
    /// distinct configurations reach the wave function.
    pub fn eval(
        &mut self,
        wf: &dyn WaveFunction,
        version: u64,
        configs: &[&[i8]],
    ) -> Result<Vec<WaveAmplitude>> {
        let usable = self.enabled && configs.first().map_or(true, |c| c.len() <= MAX_CACHED_SITES);
        if !usable {
            self.misses += configs.len() as u64;
            return wf.log_psi_batch(configs);
        }
        if self.version != Some(version) {
            self.map.clear();
            self.version = Some(version);
        }
        let keys: Vec<u128> = configs.iter().map(|c| pack(c)).collect();
        let mut todo: Vec<usize> = Vec::new();
        let mut pending: HashMap<u128, usize> = HashMap::new();
        for (i, k) in keys.iter().enumerate() {
            if !self.map.contains_key(k) && !pending.contains_key(k) {
                pending.insert(*k, todo.len());
                todo.push(i);
            }
        }
        self.misses += todo.len() as u64;
        self.hits += (configs.len() - todo.len()) as u64;
        let fresh = if todo.is_empty() {
            Vec::new()
        } else {
            let batch: Vec<&[i8]> = todo.iter().map(|&i| configs[i]).collect();
            wf.log_psi_batch(&batch)?
        };
        if self.map.len() + fresh.len() > self.max_entries {
            self.map.clear();
        }
        let out = keys
            .iter()
            .map(|k| match pending.get(k) {
                Some(&j) => fresh[j],
                None => self.map[k],
            })
            .collect();
        for (&i, a) in todo.iter().zip(fresh) {
            self.map.insert(keys[i], a);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct SampleBatch {
    /// Chain-major: sample `k` of chain `c` is at `c * per_chain + k`.
    pub configs: Vec<SpinConfig>,
    pub amps: Vec<WaveAmplitude>,
    pub n_chains: usize,
    pub per_chain: usize,
    pub acceptance_rate: f64,
    pub rejected_nonfinite: u64,
}

impl SampleBatch {
    pub fn refs(&self) -> Vec<&[i8]> {
        self.configs.iter().map(Vec::as_slice).collect()
    }

    pub fn mean_log_amp(&self) -> f64 {
        self.amps.iter().map(|a| a.log_amp).sum::<f64>() / self.amps.len().max(1) as f64
    }
}

#[derive(Debug)]
pub struct Sampler {
    pub chains: Vec<Chain>,
    pub n_sites: usize,
    pub config: SamplerConfig,
    pub cache: AmplitudeCache,
    burned_in: bool,
    amp_version: Option<u64>,
}

impl Sampler {
    pub fn new(n_sites: usize, config: SamplerConfig) -> Result<Self> {
        if config.n_chains == 0 {
            return Err(Error::Config("n_chains must be positive".into()));
        }
        if config.thinning == Some(0) {
            return Err(Error::Config("thinning must be at least 1".into()));
        }
        let chains = init_chains(config.n_chains, n_sites, config.seed)?;
        Ok(Self {
            chains,
            n_sites,
            config,
            cache: AmplitudeCache::new(true),
            burned_in: false,
            amp_version: None,
        })
    }

    pub fn thinning(&self) -> usize {
        self.config.thinning.unwrap_or(self.n_sites)
    }

    pub fn is_burned_in(&self) -> bool {
        self.burned_in
    }

    /// Forces the next [`Self::run`] to burn in again.
    pub fn reset_burnin(&mut self) {
        self.burned_in = false;
    }

    fn refresh(&mut self, wf: &dyn WaveFunction, version: u64) -> Result<()> {
        if self.amp_version == Some(version) {
            return Ok(());
        }
        let states: Vec<&[i8]> = self.chains.iter().map(|c| c.state.as_slice()).collect();
        let amps = self.cache.eval(wf, version, &states)?;
        for (c, a) in self.chains.iter_mut().zip(amps) {
            c.amp = a;
        }
        self.amp_version = Some(version);
        Ok(())
    }

    /// One proposal per chain.
    pub fn step(&mut self, wf: &dyn WaveFunction, version: u64) -> Result<()> {
        self.refresh(wf, version)?;
        let moves: Vec<(usize, usize)> = self.chains.iter_mut().map(Chain::propose).collect();
        let proposals: Vec<SpinConfig> = self
            .chains
            .iter()
            .zip(&moves)
            .map(|(c, &m)| c.proposal_state(m))
            .collect();
        let refs: Vec<&[i8]> = proposals.iter().map(Vec::as_slice).collect();
        let amps = self.cache.eval(wf, version, &refs)?;
        for ((chain, m), a) in self.chains.iter_mut().zip(moves).zip(amps) {
            chain.proposed += 1;
            let u: f64 = chain.rng.gen();
            if !a.is_finite() {
                chain.rejected_nonfinite += 1;
                continue;
            }
            let log_ratio = 2.0 * (a.log_amp - chain.amp.log_amp);
            if log_ratio >= 0.0 || u < log_ratio.exp() || chain.amp.log_amp.is_nan() {
                chain.accept(m, a);
            }
        }
        Ok(())
    }

    /// Burn-in (first call only), then `n_collect` retained samples per
    /// chain, one every `thinning` steps.
    pub fn run(&mut self, wf: &dyn WaveFunction, version: u64, n_collect: usize) -> Result<SampleBatch> {
        self.refresh(wf, version)?;
        if !self.burned_in {
            for _ in 0..self.config.burnin_sweeps * self.n_sites {
                self.step(wf, version)?;
            }
            self.burned_in = true;
        }
        let (acc0, prop0): (u64, u64) = self.counters();
        let bad0: u64 = self.chains.iter().map(|c| c.rejected_nonfinite).sum();
        let b = self.chains.len();
        let mut configs = vec![Vec::new(); b * n_collect];
        let mut amps = vec![WaveAmplitude::default(); b * n_collect];
        for k in 0..n_collect {
            for _ in 0..self.thinning() {
                self.step(wf, version)?;
            }
            for (ci, c) in self.chains.iter().enumerate() {
                configs[ci * n_collect + k] = c.state.clone();
                amps[ci * n_collect + k] = c.amp;
            }
        }
        let (acc1, prop1) = self.counters();
        let bad1: u64 = self.chains.iter().map(|c| c.rejected_nonfinite).sum();
        let proposed = prop1 - prop0;
        Ok(SampleBatch {
            configs,
            amps,
            n_chains: b,
            per_chain: n_collect,
            acceptance_rate: if proposed == 0 {
                0.0
            } else {
                (acc1 - acc0) as f64 / proposed as f64
            },
            rejected_nonfinite: bad1 - bad0,
        })
    }

    fn counters(&self) -> (u64, u64) {
        self.chains
            .iter()
            .fold((0, 0), |(a, p), c| (a + c.accepted, p + c.proposed))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::{AnsatzConfig, LcnAnsatz};
    use crate::hamiltonian::{bits_to_config, config_to_bits, spin_sum};
    use crate::lattice::{build_lattice, LatticeSpec};
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    struct Uniform(usize);

    impl WaveFunction for Uniform {
        fn n_sites(&self) -> usize {
            self.0
        }
        fn log_psi_batch(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
            Ok(vec![WaveAmplitude::default(); configs.len()])
        }
    }

    /// Amplitude zero (log -inf) whenever site 0 is up.
    struct Forbidden(usize);

    impl WaveFunction for Forbidden {
        fn n_sites(&self) -> usize {
            self.0
        }
        fn log_psi_batch(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
            Ok(configs
                .iter()
                .map(|c| WaveAmplitude {
                    log_amp: if c[0] > 0 { f64::NEG_INFINITY } else { 0.0 },
                    phase: 0.0,
                })
                .collect())
        }
    }

    #[test]
    fn init_chains_are_balanced_and_reproducible() {
        let a = init_chains(4, 16, 7).unwrap();
        assert!(a.iter().all(|c| spin_sum(&c.state) == 0));
        let b = init_chains(4, 16, 7).unwrap();
        assert_eq!(
            a.iter().map(|c| c.state.clone()).collect::<Vec<_>>(),
            b.iter().map(|c| c.state.clone()).collect::<Vec<_>>()
        );
        let big = init_chains(1000, 36, 1).unwrap();
        assert!(big.iter().all(|c| spin_sum(&c.state) == 0));
        assert!(matches!(init_chains(2, 7, 0), Err(Error::Config(_))));
    }

    #[test]
    fn uniform_ansatz_accepts_everything() {
        let mut s = Sampler::new(
            10,
            SamplerConfig {
                n_chains: 8,
                burnin_sweeps: 1,
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        let batch = s.run(&Uniform(10), 0, 5).unwrap();
        assert_eq!(batch.acceptance_rate, 1.0);
        assert!(batch.configs.iter().all(|c| spin_sum(c) == 0));
        assert_eq!(batch.configs.len(), 40);
    }

    #[test]
    fn zero_amplitude_proposals_are_rejected_and_flagged() {
        let mut s = Sampler::new(
            6,
            SamplerConfig {
                n_chains: 4,
                burnin_sweeps: 0,
                ..SamplerConfig::default()
            },
        )
        .unwrap();
        // Start every chain from an allowed state.
        for c in &mut s.chains {
            c.state = vec![-1, 1, 1, 1, -1, -1];
            c.up = vec![1, 2, 3];
            c.down = vec![0, 4, 5];
        }
        let batch = s.run(&Forbidden(6), 0, 50).unwrap();
        assert!(batch.configs.iter().all(|c| c[0] < 0));
        assert!(batch.rejected_nonfinite > 0);
        assert!(batch.acceptance_rate > 0.0 && batch.acceptance_rate < 1.0);
    }

    #[test]
    fn thinning_and_counters() {
        let mut s = Sampler::new(
            6,
            SamplerConfig {
                n_chains: 3,
                burnin_sweeps: 2,
                thinning: Some(4),
                seed: 2,
            },
        )
        .unwrap();
        let batch = s.run(&Uniform(6), 0, 5).unwrap();
        // 2 sweeps of 6 steps, then 5 * 4 steps.
        assert!(s.chains.iter().all(|c| c.proposed == 12 + 20));
        assert!(s.chains.iter().all(|c| c.accepted <= c.proposed));
        assert_eq!(batch.per_chain, 5);
        // A second run skips burn-in.
        s.run(&Uniform(6), 0, 1).unwrap();
        assert!(s.chains.iter().all(|c| c.proposed == 36));
    }

    #[test]
    fn distinct_seeds_give_distinct_trajectories() {
        let run = |seed| {
            let mut s = Sampler::new(
                20,
                SamplerConfig {
                    n_chains: 1,
                    burnin_sweeps: 0,
                    thinning: Some(1),
                    seed,
                },
            )
            .unwrap();
            s.run(&Uniform(20), 0, 3).unwrap().configs
        };
        assert_ne!(run(1), run(2));
        assert_eq!(run(1), run(1));
    }

    #[test]
    fn cache_deduplicates_and_tracks_version() {
        let net = Uniform(4);
        let mut cache = AmplitudeCache::new(true);
        let a: &[i8] = &[1, -1, 1, -1];
        let b: &[i8] = &[-1, 1, 1, -1];
        cache.eval(&net, 0, &[a, b, a]).unwrap();
        assert_eq!((cache.misses, cache.hits), (2, 1));
        cache.eval(&net, 0, &[b]).unwrap();
        assert_eq!(cache.hits, 2);
        cache.eval(&net, 1, &[b]).unwrap();
        assert_eq!(cache.misses, 3);
    }

    #[test]
    fn chi_square_against_exact_distribution() {
        let lat = build_lattice(&LatticeSpec::ring(6, 0.0)).unwrap();
        let net = LcnAnsatz::new(
            &lat,
            AnsatzConfig {
                channels: 4,
                se_reduction: 2,
                mlp_hidden: 8,
                n_layers: 1,
                seed: 17,
                ..AnsatzConfig::default()
            },
        )
        .unwrap();
        let sector: Vec<u64> = (0u64..64).filter(|b| b.count_ones() == 3).collect();
        let cfgs: Vec<SpinConfig> = sector.iter().map(|&b| bits_to_config(b, 6)).collect();
        let refs: Vec<&[i8]> = cfgs.iter().map(Vec::as_slice).collect();
        let amps = net.log_psi_batch(&refs).unwrap();
        let w: Vec<f64> = amps.iter().map(|a| (2.0 * a.log_amp).exp()).collect();
        let z: f64 = w.iter().sum();

        let mut s = Sampler::new(
            6,
            SamplerConfig {
                n_chains: 50,
                burnin_sweeps: 20,
                thinning: None,
                seed: 3,
            },
        )
        .unwrap();
        let batch = s.run(&net, 0, 1000).unwrap();
        let mut counts = vec![0.0; sector.len()];
        for c in &batch.configs {
            let k = sector.iter().position(|&b| b == config_to_bits(c)).unwrap();
            counts[k] += 1.0;
        }
        let n = batch.configs.len() as f64;
        let chi2: f64 = counts
            .iter()
            .zip(&w)
            .map(|(o, wi)| {
                let e = n * wi / z;
                (o - e) * (o - e) / e
            })
            .sum();
        let p = 1.0 - ChiSquared::new((sector.len() - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.001, "chi2 = {chi2}, p = {p}");
    }
}
