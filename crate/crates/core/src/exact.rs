//! Exact diagonalisation in the `S^z = 0` sector.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{Trainable, WaveAmplitude, WaveFunction};
use crate::error::{Error, Result};
use crate::hamiltonian::{config_to_bits, Hamiltonian};
use crate::tensor::{ParamGrads, ParamId, Parameters, Tensor};

pub const DEFAULT_SECTOR_CAP: usize = 20;
pub const DENSE_MAX_SITES: usize = 12;
pub const FULL_SPACE_MAX_SITES: usize = 10;
pub const LANCZOS_TOL: f64 = 1e-10;
pub const LANCZOS_MAX_ITER: usize = 2000;
/// Krylov vectors kept before a restart from the current Ritz vector.
const LANCZOS_RESTART: usize = 200;
/// Amplitudes below this fraction of the largest are treated as zero.
pub const LOOKUP_ZERO_REL: f64 = 1e-10;

/// All configurations with `N/2` up spins, as bitmasks in ascending order
/// (site 0 is the least significant bit).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectorBasis {
    pub n_sites: usize,
    pub states: Vec<u64>,
}

impl SectorBasis {
    pub fn new(n_sites: usize) -> Result<Self> {
        Self::with_cap(n_sites, DEFAULT_SECTOR_CAP)
    }

    pub fn with_cap(n_sites: usize, cap: usize) -> Result<Self> {
        if n_sites == 0 || n_sites % 2 != 0 {
            return Err(Error::Config(format!(
                "the zero-magnetisation sector needs an even number of sites, got {n_sites}"
            )));
        }
        if n_sites > cap || n_sites > 62 {
            return Err(Error::Unsupported(format!(
                "{n_sites} sites exceeds the exact-diagonalisation cap of {cap}"
            )));
        }
        let k = n_sites / 2;
        let mut states = Vec::new();
        let mut v: u64 = (1 << k) - 1;
        let end = 1u64 << n_sites;
        while v < end {
            states.push(v);
            // Next bit pattern with the same popcount.
            let t = v | (v - 1);
            v = (t + 1) | (((!t & (t + 1)) - 1) >> (v.trailing_zeros() + 1));
        }
        Ok(Self { n_sites, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn index(&self, bits: u64) -> Option<usize> {
        self.states.binary_search(&bits).ok()
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub dim: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl SparseMatrix {
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (r, yr) in y.iter_mut().enumerate() {
            let mut s = 0.0;
            for k in self.indptr[r]..self.indptr[r + 1] {
                s += self.data[k] * x[self.indices[k]];
            }
            *yr = s;
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let row = &self.indices[self.indptr[r]..self.indptr[r + 1]];
        match row.binary_search(&c) {
            Ok(k) => self.data[self.indptr[r] + k],
            Err(_) => 0.0,
        }
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.dim, self.dim);
        for r in 0..self.dim {
            for k in self.indptr[r]..self.indptr[r + 1] {
                m[(r, self.indices[k])] += self.data[k];
            }
        }
        m
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.dim).all(|r| {
            (self.indptr[r]..self.indptr[r + 1]).all(|k| self.get(self.indices[k], r) == self.data[k])
        })
    }
}

pub fn build_sparse(ham: &Hamiltonian, basis: &SectorBasis) -> Result<SparseMatrix> {
    if ham.n_sites != basis.n_sites {
        return Err(Error::Shape {
            op: "build_sparse",
            lhs: vec![ham.n_sites],
            rhs: vec![basis.n_sites],
        });
    }
    let mut indptr = vec![0];
    let mut indices = Vec::new();
    let mut data = Vec::new();
    for &s in &basis.states {
        let (diag, nbrs) = ham.connected_bits(s);
        let mut row: Vec<(usize, f64)> = Vec::with_capacity(nbrs.len() + 1);
        row.push((basis.index(s).unwrap(), diag));
        for (t, v) in nbrs {
            let j = basis
                .index(t)
                .ok_or_else(|| Error::Internal("exchange left the sector".into()))?;
            row.push((j, v));
        }
        row.sort_by_key(|e| e.0);
        // Merge coinciding targets (distinct bonds never coincide, but be safe).
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(row.len());
        for (j, v) in row {
            match merged.last_mut() {
                Some(last) if last.0 == j => last.1 += v,
                _ => merged.push((j, v)),
            }
        }
        for (j, v) in merged {
            if v != 0.0 {
                indices.push(j);
                data.push(v);
            }
        }
        indptr.push(indices.len());
    }
    Ok(SparseMatrix {
        dim: basis.len(),
        indptr,
        indices,
        data,
    })
}

#[derive(Clone, Debug)]
pub struct ExactState {
    pub energy: f64,
    /// Unit-norm, over the sector basis.
    pub amplitudes: Vec<f64>,
    pub basis: SectorBasis,
}

impl ExactState {
    pub fn energy_per_site(&self) -> f64 {
        self.energy / self.basis.n_sites as f64
    }

    /// `|| H v - E v ||`.
    pub fn residual(&self, h: &SparseMatrix) -> f64 {
        let mut hv = vec![0.0; h.dim];
        h.matvec(&self.amplitudes, &mut hv);
        hv.iter()
            .zip(&self.amplitudes)
            .map(|(a, b)| (a - self.energy * b).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GroundStateReport {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "J2")]
    pub j2: f64,
    #[serde(rename = "E0")]
    pub e0: f64,
    #[serde(rename = "E0_per_site")]
    pub e0_per_site: f64,
    pub method: String,
    pub sector_dim: usize,
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

/// Fixes the overall sign so the largest-magnitude entry is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0.0f64;
    for &x in v.iter() {
        if x.abs() > best.abs() + 1e-12 {
            best = x;
        }
    }
    if best < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

pub fn ground_state_dense(h: &SparseMatrix, basis: &SectorBasis) -> Result<ExactState> {
    if basis.n_sites > DENSE_MAX_SITES {
        return Err(Error::Unsupported(format!(
            "dense diagonalisation is limited to {DENSE_MAX_SITES} sites"
        )));
    }
    let eig = SymmetricEigen::new(h.to_dense());
    let (k, &e) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .ok_or_else(|| Error::Internal("empty matrix".into()))?;
    let mut v: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
    normalize(&mut v);
    fix_sign(&mut v);
    Ok(ExactState {
        energy: e,
        amplitudes: v,
        basis: basis.clone(),
    })
}

/// Lanczos with full reorthogonalisation, restarted from the Ritz vector
/// every few hundred iterations.
pub fn ground_state_lanczos(
    h: &SparseMatrix,
    basis: &SectorBasis,
    max_iter: usize,
    tol: f64,
) -> Result<ExactState> {
    let dim = h.dim;
    if dim == 1 {
        return Ok(ExactState {
            energy: h.get(0, 0),
            amplitudes: vec![1.0],
            basis: basis.clone(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let start: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let (mut state, ok) = lanczos_from(h, basis, start, max_iter, tol);
    if !ok {
        return Err(Error::NoConvergence(format!(
            "Lanczos did not reach residual {tol:e} in {max_iter} iterations"
        )));
    }
    // Polish towards machine precision so amplitude ratios stay accurate.
    let before = state.residual(h);
    let target = 1e-13 * state.energy.abs().max(1.0);
    if before > target {
        let (p, _) = lanczos_from(h, basis, state.amplitudes.clone(), 400, target);
        if p.residual(h) < before {
            state = p;
        }
    }
    Ok(state)
}

/// Restarted Lanczos from `start`; the flag reports whether `tol` was met.
fn lanczos_from(
    h: &SparseMatrix,
    basis: &SectorBasis,
    mut start: Vec<f64>,
    max_iter: usize,
    tol: f64,
) -> (ExactState, bool) {
    let dim = h.dim;
    normalize(&mut start);
    let mut total = 0;
    let mut w = vec![0.0; dim];
    loop {
        let mut q: Vec<Vec<f64>> = vec![start.clone()];
        let mut alpha: Vec<f64> = Vec::new();
        let mut beta: Vec<f64> = Vec::new();
        let m_max = LANCZOS_RESTART.min(dim);
        let mut ritz: Option<(f64, Vec<f64>)> = None;
        for j in 0..m_max {
            total += 1;
            h.matvec(&q[j], &mut w);
            let a: f64 = w.iter().zip(&q[j]).map(|(x, y)| x * y).sum();
            alpha.push(a);
            // Full reorthogonalisation (twice for stability).
            for _ in 0..2 {
                for qi in &q {
                    let c: f64 = w.iter().zip(qi).map(|(x, y)| x * y).sum();
                    w.iter_mut().zip(qi).for_each(|(x, y)| *x -= c * y);
                }
            }
            let b = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            let m = alpha.len();
            let check = b < 1e-12 || j + 1 == m_max || m % 10 == 0 || total >= max_iter;
            if check {
                let mut t = DMatrix::<f64>::zeros(m, m);
                for i in 0..m {
                    t[(i, i)] = alpha[i];
                    if i + 1 < m {
                        t[(i, i + 1)] = beta[i];
                        t[(i + 1, i)] = beta[i];
                    }
                }
                let eig = SymmetricEigen::new(t);
                let (k, &theta) = eig
                    .eigenvalues
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap();
                let y = eig.eigenvectors.column(k);
                let mut v = vec![0.0; dim];
                for (i, qi) in q.iter().enumerate() {
                    v.iter_mut().zip(qi).for_each(|(x, z)| *x += y[i] * z);
                }
                normalize(&mut v);
                let mut hv = vec![0.0; dim];
                h.matvec(&v, &mut hv);
                let energy: f64 = hv.iter().zip(&v).map(|(a, b)| a * b).sum();
                let res = hv
                    .iter()
                    .zip(&v)
                    .map(|(a, b)| (a - energy * b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let _ = theta;
                if res < tol || total >= max_iter {
                    fix_sign(&mut v);
                    let state = ExactState {
                        energy,
                        amplitudes: v,
                        basis: basis.clone(),
                    };
                    return (state, res < tol);
                }
                ritz = Some((energy, v));
            }
            if b < 1e-12 {
                break;
            }
            beta.push(b);
            q.push(w.iter().map(|x| x / b).collect());
        }
        start = ritz.map(|r| r.1).unwrap_or(start);
    }
}

/// Lowest eigenpair of the sector Hamiltonian. Lanczos always runs; for
/// `N <= 12` the dense eigenvector is returned after checking agreement.
pub fn ground_state(ham: &Hamiltonian) -> Result<(ExactState, String)> {
    let basis = SectorBasis::new(ham.n_sites)?;
    let h = build_sparse(ham, &basis)?;
    let lanczos = ground_state_lanczos(&h, &basis, LANCZOS_MAX_ITER, LANCZOS_TOL)?;
    if ham.n_sites <= DENSE_MAX_SITES {
        let dense = ground_state_dense(&h, &basis)?;
        if (dense.energy - lanczos.energy).abs() > 1e-8 {
            return Err(Error::Internal(format!(
                "dense ({}) and Lanczos ({}) ground energies disagree",
                dense.energy, lanczos.energy
            )));
        }
        return Ok((dense, "dense".into()));
    }
    Ok((lanczos, "lanczos".into()))
}

/// Ground energy over the full `2^N` space by dense diagonalisation.
pub fn full_space_ground_energy(ham: &Hamiltonian) -> Result<f64> {
    let n = ham.n_sites;
    if n > FULL_SPACE_MAX_SITES {
        return Err(Error::Unsupported(format!(
            "full-space diagonalisation is limited to {FULL_SPACE_MAX_SITES} sites"
        )));
    }
    let dim = 1usize << n;
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    for s in 0..dim {
        let (diag, nbrs) = ham.connected_bits(s as u64);
        m[(s, s)] += diag;
        for (t, v) in nbrs {
            m[(t as usize, s)] += v;
        }
    }
    let eig = SymmetricEigen::new(m);
    Ok(eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min))
}

/// `|<psi0|psi>|` with `psi` normalised over the sector.
pub fn overlap(exact: &ExactState, wf: &dyn WaveFunction) -> Result<f64> {
    let n = exact.basis.n_sites;
    if wf.n_sites() != n {
        return Err(Error::Shape {
            op: "overlap",
            lhs: vec![wf.n_sites()],
            rhs: vec![n],
        });
    }
    let configs: Vec<Vec<i8>> = exact
        .basis
        .states
        .iter()
        .map(|&b| crate::hamiltonian::bits_to_config(b, n))
        .collect();
    let refs: Vec<&[i8]> = configs.iter().map(Vec::as_slice).collect();
    let amps = wf.log_psi_batch(&refs)?;
    let max = amps
        .iter()
        .map(|a| a.log_amp)
        .filter(|x| !x.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("wave function vanishes on the whole sector".into()));
    }
    let mut dot_re = 0.0;
    let mut dot_im = 0.0;
    let mut norm = 0.0;
    for (a, &c0) in amps.iter().zip(&exact.amplitudes) {
        if a.log_amp.is_nan() || a.phase.is_nan() {
            return Err(Error::NonFinite("NaN amplitude in overlap".into()));
        }
        let m = (a.log_amp - max).exp();
        if m == 0.0 {
            continue;
        }
        dot_re += c0 * m * a.phase.cos();
        dot_im += c0 * m * a.phase.sin();
        norm += m * m;
    }
    Ok(((dot_re * dot_re + dot_im * dot_im).sqrt() / norm.sqrt()).min(1.0))
}

/// The exact ground state as a wave function, with trainable offsets and
/// per-site fields that vanish at initialisation:
/// `ln psi(c) = ln psi0(c) + (a + sum_i f_i v_i) + i (b + sum_i g_i v_i)`.
#[derive(Clone, Debug)]
pub struct LookupAnsatz {
    basis: SectorBasis,
    log_amp: Vec<f64>,
    phase: Vec<f64>,
    params: Parameters,
    offset: ParamId,
    field: ParamId,
    version: u64,
}

impl LookupAnsatz {
    pub fn new(exact: &ExactState) -> Self {
        let max = exact.amplitudes.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        let (log_amp, phase) = exact
            .amplitudes
            .iter()
            .map(|&x| {
                if x.abs() <= LOOKUP_ZERO_REL * max {
                    (f64::NEG_INFINITY, 0.0)
                } else {
                    (x.abs().ln(), if x < 0.0 { std::f64::consts::PI } else { 0.0 })
                }
            })
            .unzip();
        let n = exact.basis.n_sites;
        let mut params = Parameters::new();
        let offset = params.insert("offset", Tensor::zeros(&[2])).unwrap();
        let field = params.insert("field", Tensor::zeros(&[n, 2])).unwrap();
        Self {
            basis: exact.basis.clone(),
            log_amp,
            phase,
            params,
            offset,
            field,
            version: 0,
        }
    }

    fn lookup(&self, c: &[i8]) -> Result<usize> {
        if c.len() != self.basis.n_sites {
            return Err(Error::Shape {
                op: "lookup",
                lhs: vec![c.len()],
                rhs: vec![self.basis.n_sites],
            });
        }
        self.basis
            .index(config_to_bits(c))
            .ok_or_else(|| Error::Config(format!("configuration {c:?} is outside the Sz = 0 sector")))
    }

    fn eval_one(&self, c: &[i8]) -> Result<WaveAmplitude> {
        let k = self.lookup(c)?;
        let off = self.params.get(self.offset).data();
        let f = self.params.get(self.field).data();
        let mut la = self.log_amp[k] + off[0];
        let mut ph = self.phase[k] + off[1];
        for (i, &v) in c.iter().enumerate() {
            la += f[2 * i] * v as f64;
            ph += f[2 * i + 1] * v as f64;
        }
        Ok(WaveAmplitude { log_amp: la, phase: ph })
    }
}

impl WaveFunction for LookupAnsatz {
    fn n_sites(&self) -> usize {
        self.basis.n_sites
    }

    fn log_psi_batch(&self, configs: &[&[i8]]) -> Result<Vec<WaveAmplitude>> {
        configs.iter().map(|c| self.eval_one(c)).collect()
    }
}

impl Trainable for LookupAnsatz {
    fn parameters(&self) -> &Parameters {
        &self.params
    }

    fn parameters_mut(&mut self) -> &mut Parameters {
        self.version += 1;
        &mut self.params
    }

    fn version(&self) -> u64 {
        self.version
    }

    fn backprop(
        &self,
        configs: &[&[i8]],
        w_amp: &[f64],
        w_phase: &[f64],
    ) -> Result<(Vec<WaveAmplitude>, ParamGrads)> {
        let amps = self.log_psi_batch(configs)?;
        let mut grads = self.params.zeros_like();
        let n = self.basis.n_sites;
        let mut go = [0.0; 2];
        let mut gf = vec![0.0; 2 * n];
        for ((c, a), p) in configs.iter().zip(w_amp).zip(w_phase) {
            go[0] += a;
            go[1] += p;
            for (i, &v) in c.iter().enumerate() {
                gf[2 * i] += a * v as f64;
                gf[2 * i + 1] += p * v as f64;
            }
        }
        grads.values[self.offset.0] = Tensor::new(vec![2], go.to_vec())?;
        grads.values[self.field.0] = Tensor::new(vec![n, 2], gf)?;
        Ok((amps, grads))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::bits_to_config;
    use crate::lattice::{build_lattice, LatticeSpec, LatticeType};
    use rand::seq::SliceRandom;

    fn ham(spec: LatticeSpec) -> Hamiltonian {
        Hamiltonian::new(&build_lattice(&spec).unwrap())
    }

    #[test]
    fn sector_sizes_and_order() {
        assert_eq!(SectorBasis::new(2).unwrap().len(), 2);
        assert_eq!(SectorBasis::new(4).unwrap().len(), 6);
        let b = SectorBasis::new(12).unwrap();
        assert_eq!(b.len(), 924);
        assert!(b.states.windows(2).all(|w| w[0] < w[1]));
        assert!(b.states.iter().all(|s| s.count_ones() == 6));
        for (i, &s) in b.states.iter().enumerate() {
            assert_eq!(b.index(s), Some(i));
        }
        assert!(SectorBasis::new(5).is_err());
        assert!(matches!(SectorBasis::new(22), Err(Error::Unsupported(_))));
    }

    #[test]
    fn two_site_matrix_and_singlet() {
        let h = ham(LatticeSpec::two_site());
        let basis = SectorBasis::new(2).unwrap();
        let m = build_sparse(&h, &basis).unwrap();
        assert_eq!(m.to_dense(), DMatrix::from_row_slice(2, 2, &[-0.25, 0.5, 0.5, -0.25]));
        let gs = ground_state_lanczos(&m, &basis, 100, 1e-10).unwrap();
        assert!((gs.energy + 0.75).abs() < 1e-14);
        let r = 1.0 / 2f64.sqrt();
        assert!((gs.amplitudes[0].abs() - r).abs() < 1e-12);
        assert!((gs.amplitudes[0] + gs.amplitudes[1]).abs() < 1e-12);
    }

    #[test]
    fn dense_and_lanczos_agree_and_matrix_is_symmetric() {
        for spec in [
            LatticeSpec::new(LatticeType::Kagome, 2, 2, 0.0),
            LatticeSpec::new(LatticeType::Square, 3, 4, 0.5),
            LatticeSpec::ring(10, 0.3),
        ] {
            let h = ham(spec);
            let basis = SectorBasis::new(h.n_sites).unwrap();
            let m = build_sparse(&h, &basis).unwrap();
            assert!(m.is_symmetric());
            for r in 0..m.dim {
                assert!(m.indptr[r + 1] - m.indptr[r] <= 1 + h.bonds.len());
            }
            let d = ground_state_dense(&m, &basis).unwrap();
            let l = ground_state_lanczos(&m, &basis, LANCZOS_MAX_ITER, LANCZOS_TOL).unwrap();
            assert!((d.energy - l.energy).abs() < 1e-8);
            assert!(l.residual(&m) < 1e-9);
            let dot: f64 = d.amplitudes.iter().zip(&l.amplitudes).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sector_contains_full_space_ground_state() {
        for spec in [
            LatticeSpec::ring(8, 0.0),
            LatticeSpec::ring(10, 0.5),
            LatticeSpec::two_site(),
        ] {
            let h = ham(spec);
            let (gs, _) = ground_state(&h).unwrap();
            let full = full_space_ground_energy(&h).unwrap();
            assert!((gs.energy - full).abs() < 1e-10);
        }
    }

    #[test]
    fn lookup_overlap_and_zero_variance() {
        let h = ham(LatticeSpec::new(LatticeType::Kagome, 2, 2, 0.0));
        let (gs, _) = ground_state(&h).unwrap();
        let look = LookupAnsatz::new(&gs);
        assert!((overlap(&gs, &look).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut cs = Vec::new();
        while cs.len() < 100 {
            let b = *gs.basis.states.choose(&mut rng).unwrap();
            if look.eval_one(&bits_to_config(b, 12)).unwrap().log_amp.is_finite() {
                cs.push(bits_to_config(b, 12));
            }
        }
        let refs: Vec<&[i8]> = cs.iter().map(Vec::as_slice).collect();
        for e in h.local_energies(&look, &refs).unwrap() {
            assert!((e.re - gs.energy).abs() < 1e-9 && e.im.abs() < 1e-9);
        }

        // Flip the sign on half of the support.
        let mut flipped = gs.clone();
        for (k, a) in flipped.amplitudes.iter_mut().enumerate() {
            if k % 2 == 0 {
                *a = -*a;
            }
        }
        let ov = overlap(&gs, &LookupAnsatz::new(&flipped)).unwrap();
        assert!(ov < 1.0 - 1e-6);
        assert!(look.log_psi(&[1; 12]).is_err());
    }

    #[test]
    fn lookup_gradient_matches_finite_differences() {
        let h = ham(LatticeSpec::ring(6, 0.0));
        let (gs, _) = ground_state(&h).unwrap();
        let mut look = LookupAnsatz::new(&gs);
        let cs: Vec<Vec<i8>> = gs.basis.states.iter().take(5).map(|&b| bits_to_config(b, 6)).collect();
        let refs: Vec<&[i8]> = cs.iter().map(Vec::as_slice).collect();
        let wa = [0.3, -1.0, 0.5, 0.2, 0.9];
        let wp = [1.0, 0.1, -0.4, 0.0, 0.7];
        let (_, g) = look.backprop(&refs, &wa, &wp).unwrap();
        let obj = |l: &LookupAnsatz| -> f64 {
            l.log_psi_batch(&refs)
                .unwrap()
                .iter()
                .enumerate()
                .map(|(i, a)| wa[i] * a.log_amp + wp[i] * a.phase)
                .sum()
        };
        let ids: Vec<ParamId> = look.parameters().ids().collect();
        for id in ids {
            for i in 0..look.parameters().get(id).numel() {
                look.parameters_mut().get_mut(id).data_mut()[i] += 1e-6;
                let up = obj(&look);
                look.parameters_mut().get_mut(id).data_mut()[i] -= 2e-6;
                let dn = obj(&look);
                look.parameters_mut().get_mut(id).data_mut()[i] += 1e-6;
                assert!(((up - dn) / 2e-6 - g.get(id).data()[i]).abs() < 1e-6);
            }
        }
    }
}
