//! Spin-1/2 J1-J2 Heisenberg Hamiltonian in the `S^z` basis.
//!
//! Spins are stored as `+1` / `-1` (`S^z = v / 2`). Each bond `(i, j)` with
//! coupling `J` contributes `J v_i v_j / 4` on the diagonal and, when the two
//! spins are antiparallel, an exchange element `J / 2` to the configuration
//! with both spins flipped.

use num_complex::Complex64;

use crate::ansatz::{WaveAmplitude, WaveFunction};
use crate::error::{Error, Result};
use crate::lattice::Lattice;

pub type SpinConfig = Vec<i8>;

#[derive(Clone, Debug, PartialEq)]
pub struct ConnectedSet {
    pub diagonal: f64,
    pub neighbors: Vec<(SpinConfig, f64)>,
}

#[derive(Clone, Debug)]
pub struct Hamiltonian {
    pub n_sites: usize,
    /// `(i, j, J)` with `J1 = 1`.
    pub bonds: Vec<(usize, usize, f64)>,
}

pub fn spin_sum(c: &[i8]) -> i64 {
    c.iter().map(|&v| v as i64).sum()
}

/// Bit `i` set means spin `i` is up.
pub fn config_to_bits(c: &[i8]) -> u64 {
    c.iter()
        .enumerate()
        .filter(|(_, &v)| v > 0)
        .fold(0u64, |acc, (i, _)| acc | (1 << i))
}

pub fn bits_to_config(bits: u64, n: usize) -> SpinConfig {
    (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect()
}

impl Hamiltonian {
    pub fn new(lattice: &Lattice) -> Self {
        Self {
            n_sites: lattice.n_sites,
            bonds: lattice.weighted_bonds(),
        }
    }

    fn check(&self, c: &[i8]) -> Result<()> {
        if c.len() != self.n_sites || c.iter().any(|&v| v != 1 && v != -1) {
            return Err(Error::Shape {
                op: "spin_config",
                lhs: vec![c.len()],
                rhs: vec![self.n_sites],
            });
        }
        Ok(())
    }

    pub fn diagonal_energy(&self, c: &[i8]) -> f64 {
        self.bonds
            .iter()
            .map(|&(i, j, w)| w * (c[i] as f64) * (c[j] as f64) / 4.0)
            .sum()
    }

    pub fn connected_configs(&self, c: &[i8]) -> ConnectedSet {
        let mut neighbors = Vec::new();
        for &(i, j, w) in &self.bonds {
            if c[i] != c[j] && w != 0.0 {
                let mut d = c.to_vec();
                d[i] = -d[i];
                d[j] = -d[j];
                neighbors.push((d, w / 2.0));
            }
        }
        ConnectedSet {
            diagonal: self.diagonal_energy(c),
            neighbors,
        }
    }

    /// Bitmask form of [`Self::connected_configs`] for `N <= 64`.
    pub fn connected_bits(&self, state: u64) -> (f64, Vec<(u64, f64)>) {
        let mut diag = 0.0;
        let mut out = Vec::new();
        for &(i, j, w) in &self.bonds {
            let (a, b) = (state >> i & 1, state >> j & 1);
            if a == b {
                diag += w / 4.0;
            } else {
                diag -= w / 4.0;
                if w != 0.0 {
                    out.push((state ^ (1 << i) ^ (1 << j), w / 2.0));
                }
            }
        }
        (diag, out)
    }

    /// `E_loc(c) = sum_j H_cj psi(c_j) / psi(c)` for a batch, given the
    /// amplitudes of `configs` and an evaluator for neighbour amplitudes.
    pub fn local_energies_with<F>(
        &self,
        configs: &[&[i8]],
        own: &[WaveAmplitude],
        mut eval: F,
    ) -> Result<Vec<Complex64>>
    where
        F: FnMut(&[&[i8]]) -> Result<Vec<WaveAmplitude>>,
    {
        let mut sets = Vec::with_capacity(configs.len());
        for c in configs {
            self.check(c)?;
            sets.push(self.connected_configs(c));
        }
        let flat: Vec<&[i8]> = sets
            .iter()
            .flat_map(|s| s.neighbors.iter().map(|(d, _)| d.as_slice()))
            .collect();
        let amps = eval(&flat)?;
        let mut k = 0;
        let mut out = Vec::with_capacity(configs.len());
        for (b, set) in sets.iter().enumerate() {
            let base = own[b];
            let mut e = Complex64::new(set.diagonal, 0.0);
            for (d, h) in &set.neighbors {
                let a = amps[k];
                k += 1;
                if a.log_amp == f64::NEG_INFINITY && base.log_amp.is_finite() {
                    continue;
                }
                let term = *h * (a.log_psi() - base.log_psi()).exp();
                if !(term.re.is_finite() && term.im.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "psi ratio between {:?} and {:?} is not finite",
                        configs[b], d
                    )));
                }
                e += term;
            }
            out.push(e);
        }
        Ok(out)
    }

    pub fn local_energies(&self, wf: &dyn WaveFunction, configs: &[&[i8]]) -> Result<Vec<Complex64>> {
        let own = wf.log_psi_batch(configs)?;
        self.local_energies_with(configs, &own, |cs| wf.log_psi_batch(cs))
    }

    pub fn local_energy(&self, wf: &dyn WaveFunction, config: &[i8]) -> Result<Complex64> {
        Ok(self.local_energies(wf, &[config])?[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::{AnsatzConfig, LcnAnsatz};
    use crate::lattice::{build_lattice, LatticeSpec, LatticeType};
    use proptest::prelude::*;
    use rand::{seq::SliceRandom, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Uniform(usize);

    impl WaveFunction for Uniform {
        fn n_sites(&self) -> usize {
            self.0
        }
        fn log_psi_batch(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
            Ok(vec![WaveAmplitude::default(); configs.len()])
        }
    }

    /// Dense H from the pairwise rule: `<a|H|b>` over bonds, using only
    /// the XOR pattern of the two basis states.
    fn dense_pairwise(h: &Hamiltonian) -> Vec<Vec<f64>> {
        let n = h.n_sites;
        let dim = 1usize << n;
        let mut m = vec![vec![0.0; dim]; dim];
        for a in 0..dim {
            for b in 0..dim {
                let x = a ^ b;
                let mut v = 0.0;
                for &(i, j, w) in &h.bonds {
                    let same = (a >> i & 1) == (a >> j & 1);
                    if x == 0 {
                        v += if same { w / 4.0 } else { -w / 4.0 };
                    } else if x == (1 << i | 1 << j) && !same {
                        v += w / 2.0;
                    }
                }
                m[a][b] = v;
            }
        }
        m
    }

    fn random_sector_config(n: usize, rng: &mut ChaCha8Rng) -> SpinConfig {
        let mut c: SpinConfig = (0..n).map(|i| if i < n / 2 { 1 } else { -1 }).collect();
        c.shuffle(rng);
        c
    }

    #[test]
    fn diagonal_examples() {
        let lat = build_lattice(&LatticeSpec::new(LatticeType::Square, 6, 6, 0.0)).unwrap();
        let h = Hamiltonian::new(&lat);
        assert_eq!(h.diagonal_energy(&vec![1; 36]), 18.0);
        assert!(h.connected_configs(&vec![1; 36]).neighbors.is_empty());

        let two = Hamiltonian::new(&build_lattice(&LatticeSpec::two_site()).unwrap());
        assert_eq!(two.diagonal_energy(&[1, -1]), -0.25);
        let set = two.connected_configs(&[1, -1]);
        assert_eq!(set.neighbors, vec![(vec![-1, 1], 0.5)]);
        let e = two.local_energy(&Uniform(2), &[1, -1]).unwrap();
        assert_eq!(e, Complex64::new(0.25, 0.0));
    }

    #[test]
    fn rows_match_dense_pairwise_matrix() {
        let lat = build_lattice(&LatticeSpec::new(LatticeType::Square, 3, 3, 0.5)).unwrap();
        let h = Hamiltonian::new(&lat);
        let dense = dense_pairwise(&h);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..40 {
            let c: SpinConfig = (0..9).map(|_| if rand::Rng::gen_bool(&mut rng, 0.5) { 1 } else { -1 }).collect();
            let a = config_to_bits(&c) as usize;
            let set = h.connected_configs(&c);
            assert!((set.diagonal - dense[a][a]).abs() < 1e-12);
            let mut row: Vec<(usize, f64)> = set
                .neighbors
                .iter()
                .map(|(d, v)| (config_to_bits(d) as usize, *v))
                .collect();
            row.sort_by_key(|r| r.0);
            let expect: Vec<(usize, f64)> = (0..dense.len())
                .filter(|&b| b != a && dense[a][b] != 0.0)
                .map(|b| (b, dense[a][b]))
                .collect();
            assert_eq!(row, expect);
            let (diag, bits) = h.connected_bits(a as u64);
            assert_eq!(diag, set.diagonal);
            assert_eq!(bits.len(), set.neighbors.len());
        }
    }

    #[test]
    fn bond_multiset_is_translation_invariant() {
        for (t, n1, n2) in [
            (LatticeType::Square, 4, 4),
            (LatticeType::Triangular, 4, 4),
            (LatticeType::Honeycomb, 3, 3),
            (LatticeType::Kagome, 2, 2),
        ] {
            let lat = build_lattice(&LatticeSpec::new(t, n1, n2, 0.3)).unwrap();
            let h = Hamiltonian::new(&lat);
            let key = |b: &(usize, usize, f64)| (b.0.min(b.1), b.0.max(b.1), (b.2 * 1e9) as i64);
            let mut base: Vec<_> = h.bonds.iter().map(key).collect();
            base.sort();
            for tr in &lat.translations {
                let mut moved: Vec<_> = h.bonds.iter().map(|b| key(&(tr[b.0], tr[b.1], b.2))).collect();
                moved.sort();
                assert_eq!(moved, base);
            }
        }
    }

    #[test]
    fn local_energy_average_is_rayleigh_quotient() {
        let lat = build_lattice(&LatticeSpec::ring(8, 0.4)).unwrap();
        let h = Hamiltonian::new(&lat);
        let net = LcnAnsatz::new(
            &lat,
            AnsatzConfig {
                channels: 4,
                se_reduction: 2,
                mlp_hidden: 8,
                n_layers: 1,
                seed: 5,
                ..AnsatzConfig::default()
            },
        )
        .unwrap();
        let sector: Vec<SpinConfig> = (0u64..256)
            .filter(|b| b.count_ones() == 4)
            .map(|b| bits_to_config(b, 8))
            .collect();
        let refs: Vec<&[i8]> = sector.iter().map(Vec::as_slice).collect();
        let amps = net.log_psi_batch(&refs).unwrap();
        let eloc = h.local_energies(&net, &refs).unwrap();
        let psi: Vec<Complex64> = amps.iter().map(|a| a.log_psi().exp()).collect();
        let (mut num, mut den) = (Complex64::new(0.0, 0.0), 0.0);
        for (p, e) in psi.iter().zip(&eloc) {
            num += p.norm_sqr() * e;
            den += p.norm_sqr();
        }
        let dense = dense_pairwise(&h);
        let mut quad = Complex64::new(0.0, 0.0);
        for (a, ca) in sector.iter().enumerate() {
            for (b, cb) in sector.iter().enumerate() {
                let v = dense[config_to_bits(ca) as usize][config_to_bits(cb) as usize];
                quad += psi[a].conj() * v * psi[b];
            }
        }
        let lhs = num / den;
        let rhs = quad / den;
        assert!((lhs - rhs).norm() < 1e-10, "{lhs} vs {rhs}");
        assert!(rhs.im.abs() < 1e-10);
    }

    #[test]
    fn non_finite_ratio_is_reported() {
        let two = Hamiltonian::new(&build_lattice(&LatticeSpec::two_site()).unwrap());
        let own = [WaveAmplitude::default()];
        let err = two
            .local_energies_with(&[&[1, -1]], &own, |cs| {
                Ok(vec![
                    WaveAmplitude {
                        log_amp: f64::NAN,
                        phase: 0.0
                    };
                    cs.len()
                ])
            })
            .unwrap_err();
        assert!(err.to_string().contains("[1, -1]"));
        // A vanishing neighbour amplitude is fine.
        let e = two
            .local_energies_with(&[&[1, -1]], &own, |cs| {
                Ok(vec![
                    WaveAmplitude {
                        log_amp: f64::NEG_INFINITY,
                        phase: 0.0
                    };
                    cs.len()
                ])
            })
            .unwrap();
        assert_eq!(e[0], Complex64::new(-0.25, 0.0));
    }

    proptest! {
        #[test]
        fn hermitian_and_sz_conserving(seed in 0u64..10_000) {
            let lat = build_lattice(&LatticeSpec::new(LatticeType::Kagome, 2, 2, 0.7)).unwrap();
            let h = Hamiltonian::new(&lat);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_sector_config(12, &mut rng);
            let set = h.connected_configs(&c);
            prop_assert!(set.neighbors.len() <= h.bonds.len());
            for (d, v) in &set.neighbors {
                prop_assert_eq!(spin_sum(d), spin_sum(&c));
                prop_assert_eq!(c.iter().zip(d).filter(|(a, b)| a != b).count(), 2);
                let back = h.connected_configs(d);
                let rev: Vec<f64> = back.neighbors.iter().filter(|(e, _)| *e == c).map(|(_, w)| *w).collect();
                prop_assert_eq!(rev, vec![*v]);
            }
        }

        #[test]
        fn bits_round_trip(bits in 0u64..(1 << 20)) {
            prop_assert_eq!(config_to_bits(&bits_to_config(bits, 20)), bits);
        }
    }
}
