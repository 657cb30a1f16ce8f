//! Lattice convolution on the grid embedding of an augmented lattice.
//!
//! Features live on the flattened grid as `[B, P, C]` with `P = H * W`.
//! A regular 3x3 convolution reads a padded `(H+2) x (W+2)` frame; the
//! special kernels read site neighbourhoods directly through a
//! [`StencilPlan`].

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{StencilPlan, Var};
use crate::error::{Error, Result};
use crate::lattice::{CellKind, GridEmbedding, LatticeType};
use crate::tensor::Tensor;

pub const KERNEL_SIZE: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PaddingMode {
    #[default]
    Periodic,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KernelMode {
    #[default]
    Regular,
    Special,
    /// Honeycomb only: self, nearest and second-nearest neighbours.
    SpecialTwoHop,
}

#[derive(Clone, Debug)]
pub struct ConvPlan {
    pub embedding: Arc<GridEmbedding>,
    pub padding: PaddingMode,
    pub kernel: KernelMode,
    pad_src: Arc<Vec<Option<usize>>>,
    keep: Arc<Vec<f64>>,
    keep_bool: Arc<Vec<bool>>,
    site_src: Arc<Vec<Option<usize>>>,
    stencil: Option<Arc<StencilPlan>>,
}

/// Fine-grid offset read by slot `(m, n)` of a 3x3 kernel, as `(dc, dr)`.
pub fn slot_offset(m: usize, n: usize) -> [i64; 2] {
    [1 - n as i64, 1 - m as i64]
}

impl ConvPlan {
    pub fn new(
        embedding: Arc<GridEmbedding>,
        lattice_type: LatticeType,
        padding: PaddingMode,
        kernel: KernelMode,
    ) -> Result<Self> {
        let pad_src = embedding.pad_sources(padding == PaddingMode::Periodic);
        let keep = embedding.keep_mask();
        let keep_bool = keep.iter().map(|&k| k != 0.0).collect();
        let n = embedding.n_cells();
        let mut site_src = vec![None; n];
        for (s, &c) in embedding.site_cell.iter().enumerate() {
            site_src[c] = Some(s);
        }
        let stencil = match kernel {
            KernelMode::Regular => None,
            _ => Some(Arc::new(special_stencil(&embedding, lattice_type, padding, kernel)?)),
        };
        Ok(Self {
            embedding,
            padding,
            kernel,
            pad_src: Arc::new(pad_src),
            keep: Arc::new(keep),
            keep_bool: Arc::new(keep_bool),
            site_src: Arc::new(site_src),
            stencil,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.embedding.n_cells()
    }

    pub fn n_sites(&self) -> usize {
        self.embedding.n_sites()
    }

    pub fn mask_enabled(&self) -> bool {
        self.embedding.mask_enabled
    }

    /// Weight tensor shape for a `cin -> cout` convolution.
    pub fn kernel_shape(&self, cin: usize, cout: usize) -> Vec<usize> {
        match &self.stencil {
            None => vec![KERNEL_SIZE, KERNEL_SIZE, cout, cin],
            Some(p) => vec![p.n_banks, p.n_slots, cout, cin],
        }
    }

    /// Number of kernel taps that read a site (fan-in per input channel).
    pub fn fan_in_taps(&self) -> usize {
        match &self.stencil {
            None => KERNEL_SIZE * KERNEL_SIZE,
            Some(p) => p
                .bank
                .iter()
                .position(Option::is_some)
                .map_or(p.n_slots, |q| {
                    p.src[q * p.n_slots..(q + 1) * p.n_slots].iter().flatten().count()
                }),
        }
    }

    pub fn stencil(&self) -> Option<&Arc<StencilPlan>> {
        self.stencil.as_ref()
    }

    /// `false` at alignment cells, for attention masks.
    pub fn keep_positions(&self) -> Arc<Vec<bool>> {
        self.keep_bool.clone()
    }

    /// Per-site features `[B, N, C]` onto the grid `[B, P, C]`; every
    /// non-Original cell is zero.
    pub fn scatter(&self, features: &Tensor) -> Result<Tensor> {
        let sh = features.shape();
        if sh.len() != 3 || sh[1] != self.n_sites() {
            return Err(Error::Shape {
                op: "scatter",
                lhs: sh.to_vec(),
                rhs: vec![self.n_sites()],
            });
        }
        let (b, n, c) = (sh[0], sh[1], sh[2]);
        let p = self.n_cells();
        let mut out = vec![0.0; b * p * c];
        for bi in 0..b {
            for (s, &cell) in self.embedding.site_cell.iter().enumerate() {
                let from = (bi * n + s) * c;
                let to = (bi * p + cell) * c;
                out[to..to + c].copy_from_slice(&features.data()[from..from + c]);
            }
        }
        Tensor::new(vec![b, p, c], out)
    }

    /// Spin configurations `[B][N]` onto a one-channel grid `[B, P, 1]`.
    pub fn scatter_spins(&self, spins: &[&[i8]]) -> Result<Tensor> {
        let n = self.n_sites();
        let mut data = Vec::with_capacity(spins.len() * n);
        for s in spins {
            if s.len() != n {
                return Err(Error::Shape {
                    op: "scatter_spins",
                    lhs: vec![s.len()],
                    rhs: vec![n],
                });
            }
            data.extend(s.iter().map(|&v| v as f64));
        }
        self.scatter(&Tensor::new(vec![spins.len(), n, 1], data)?)
    }

    /// Grid `[B, P, C]` back to per-site features `[B, N, C]`.
    pub fn gather(&self, grid: &Tensor) -> Result<Tensor> {
        let sh = grid.shape();
        if sh.len() != 3 || sh[1] != self.n_cells() {
            return Err(Error::Shape {
                op: "gather",
                lhs: sh.to_vec(),
                rhs: vec![self.n_cells()],
            });
        }
        let (b, p, c) = (sh[0], sh[1], sh[2]);
        let n = self.n_sites();
        let mut out = vec![0.0; b * n * c];
        for bi in 0..b {
            for (s, &cell) in self.embedding.site_cell.iter().enumerate() {
                let from = (bi * p + cell) * c;
                let to = (bi * n + s) * c;
                out[to..to + c].copy_from_slice(&grid.data()[from..from + c]);
            }
        }
        Tensor::new(vec![b, n, c], out)
    }

    /// Differentiable grid-to-site gather.
    pub fn gather_var<'g>(&self, grid: &Var<'g>) -> Result<Var<'g>> {
        let src: Vec<Option<usize>> = self.embedding.site_cell.iter().map(|&c| Some(c)).collect();
        grid.gather(1, Arc::new(src))
    }

    /// Differentiable site-to-grid scatter.
    pub fn scatter_var<'g>(&self, sites: &Var<'g>) -> Result<Var<'g>> {
        sites.gather(1, self.site_src.clone())
    }

    /// `[B, P, C]` to the padded frame `[B, H+2, W+2, C]`.
    pub fn periodic_pad<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[1] != self.n_cells() {
            return Err(Error::Shape {
                op: "periodic_pad",
                lhs: sh,
                rhs: vec![self.n_cells()],
            });
        }
        let (ph, pw) = self.embedding.padded_dims();
        x.gather(1, self.pad_src.clone())?.reshape(&[sh[0], ph, pw, sh[2]])
    }

    /// Zeroes alignment cells when the mask is enabled.
    pub fn mask<'g>(&self, x: &Var<'g>) -> Result<Var<'g>> {
        if self.mask_enabled() && self.keep.iter().any(|&k| k == 0.0) {
            x.mask_mul(1, self.keep.clone())
        } else {
            Ok(*x)
        }
    }

    /// `[B, P, Cin]` -> `[B, P, Cout]`.
    pub fn lattice_conv<'g>(&self, x: &Var<'g>, w: &Var<'g>) -> Result<Var<'g>> {
        let sh = x.shape();
        let cin = *sh.last().unwrap_or(&0);
        let ws = w.shape();
        if ws.len() != 4 || ws[3] != cin || ws != self.kernel_shape(cin, ws[2]) {
            return Err(Error::Shape {
                op: "lattice_conv",
                lhs: sh,
                rhs: ws,
            });
        }
        match &self.stencil {
            None => {
                let y = self.periodic_pad(x)?.conv2d_valid(w)?;
                let y = y.reshape(&[sh[0], self.n_cells(), ws[2]])?;
                self.mask(&y)
            }
            Some(plan) => x.stencil_conv(w, plan.clone()),
        }
    }
}

/// Distinct positive distances between fine-grid offsets, ascending.
fn offset_distance(lattice_type: LatticeType, d: [i64; 2]) -> f64 {
    let (c, r) = (d[0] as f64, d[1] as f64);
    if lattice_type == LatticeType::Square {
        (c * c + r * r).sqrt()
    } else {
        let x = c + 0.5 * r;
        let y = r * 3f64.sqrt() / 2.0;
        (x * x + y * y).sqrt()
    }
}

fn honeycomb_offsets(two_hop: bool) -> Vec<[i64; 2]> {
    // Offsets from a residue-1 site to real sites, by distance shell.
    let mut cands: Vec<([i64; 2], f64)> = Vec::new();
    for dr in -2i64..=2 {
        for dc in -2i64..=2 {
            if (dc - dr).rem_euclid(3) == 2 {
                continue;
            }
            let d = offset_distance(LatticeType::Honeycomb, [dc, dr]);
            cands.push(([dc, dr], d));
        }
    }
    let mut shells: Vec<f64> = cands.iter().map(|c| c.1).filter(|&d| d > 1e-9).collect();
    shells.sort_by(|a, b| a.partial_cmp(b).unwrap());
    shells.dedup_by(|a, b| (*a - *b).abs() < 1e-9);
    let limit = if two_hop { shells[1] } else { shells[0] };
    let mut out: Vec<[i64; 2]> = cands
        .into_iter()
        .filter(|c| c.1 <= limit + 1e-9)
        .map(|c| c.0)
        .collect();
    out.sort_by_key(|o| (offset_distance(LatticeType::Honeycomb, *o) * 1e6) as i64);
    out
}

fn kagome_offsets(sub: usize) -> Vec<[i64; 2]> {
    let base: [[i64; 2]; 3] = [[0, 0], [1, 0], [0, 1]];
    let x = base[sub];
    let mut out = vec![[0, 0]];
    for d in [[1, 0], [-1, 0], [0, 1], [0, -1], [1, -1], [-1, 1]] {
        let y = [x[0] + d[0], x[1] + d[1]];
        if !(y[0].rem_euclid(2) == 1 && y[1].rem_euclid(2) == 1) {
            out.push(d);
        }
    }
    out
}

fn special_stencil(
    emb: &GridEmbedding,
    lattice_type: LatticeType,
    padding: PaddingMode,
    kernel: KernelMode,
) -> Result<StencilPlan> {
    if kernel == KernelMode::SpecialTwoHop && lattice_type != LatticeType::Honeycomb {
        return Err(Error::Unsupported(format!(
            "two-hop special kernel is defined for honeycomb only, not {}",
            lattice_type.name()
        )));
    }
    let p = emb.n_cells();
    let resolve = |x: [i64; 2]| -> Option<usize> {
        match padding {
            PaddingMode::Periodic => emb.locate(x).map(|(c, _)| c),
            PaddingMode::Zero => emb.cell_at(x),
        }
    };
    // Per-bank offset lists (slot order), plus a per-site chooser.
    let (n_banks, n_slots, offsets_for): (usize, usize, Box<dyn Fn([i64; 2]) -> (usize, Vec<Option<[i64; 2]>>)>) =
        match lattice_type {
            LatticeType::Triangular => {
                let offs: Vec<Option<[i64; 2]>> = (0..9)
                    .map(|k| {
                        let o = slot_offset(k / 3, k % 3);
                        // (1, 1) and (-1, -1) are second neighbours.
                        (o[0] != o[1] || o == [0, 0]).then_some(o)
                    })
                    .collect();
                (1, 9, Box::new(move |_| (0, offs.clone())))
            }
            LatticeType::Honeycomb => {
                let offs = honeycomb_offsets(kernel == KernelMode::SpecialTwoHop);
                let n = offs.len();
                (
                    1,
                    n,
                    Box::new(move |x: [i64; 2]| {
                        let flip = (x[0] - x[1]).rem_euclid(3) == 2;
                        let v = offs
                            .iter()
                            .map(|o| Some(if flip { [-o[0], -o[1]] } else { *o }))
                            .collect();
                        (0, v)
                    }),
                )
            }
            LatticeType::Kagome => {
                let tables: Vec<Vec<[i64; 2]>> = (0..3).map(kagome_offsets).collect();
                (
                    3,
                    5,
                    Box::new(move |x: [i64; 2]| {
                        let sub = match (x[0].rem_euclid(2), x[1].rem_euclid(2)) {
                            (0, 0) => 0,
                            (1, 0) => 1,
                            _ => 2,
                        };
                        (sub, tables[sub].iter().map(|o| Some(*o)).collect())
                    }),
                )
            }
            other => {
                return Err(Error::Unsupported(format!(
                    "special kernel is not defined for {} lattices",
                    other.name()
                )))
            }
        };
    let mut bank = vec![None; p];
    let mut src = vec![None; p * n_slots];
    for (cell, kind) in emb.cell_kind.iter().enumerate() {
        if !matches!(kind, CellKind::Original(_)) {
            continue;
        }
        let x = emb.fine_coord(cell);
        let (b, offs) = offsets_for(x);
        bank[cell] = Some(b);
        for (k, o) in offs.iter().enumerate() {
            if let Some(o) = o {
                let y = [x[0] + o[0], x[1] + o[1]];
                let s = resolve(y);
                if let Some(s) = s {
                    if !matches!(emb.cell_kind[s], CellKind::Original(_)) {
                        return Err(Error::Internal(format!(
                            "special kernel tap {o:?} from {x:?} lands off the lattice"
                        )));
                    }
                }
                src[cell * n_slots + k] = s;
            }
        }
    }
    Ok(StencilPlan {
        n_inputs: p,
        n_slots,
        n_banks,
        bank,
        src,
    })
}
