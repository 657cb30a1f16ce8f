//! Periodic lattices, their augmentation with virtual vertices, and the
//! embedding of the augmented torus into a rectangular grid.
//!
//! Every named lattice lives on a fine integer grid `(c, r)` whose Cartesian
//! position is `c * b1 + r * b2`. Square lattices use `b1 = (1, 0)`,
//! `b2 = (0, 1)`; the other three use the triangular basis `b1 = (1, 0)`,
//! `b2 = (1/2, sqrt(3)/2)`. Honeycomb and kagome sites are a subset of the
//! triangular grid; the missing points are the hexagon centres, which become
//! virtual vertices.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DIST_TOL: f64 = 1e-8;
const IMAGE_RANGE: i64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatticeType {
    Square,
    Triangular,
    Honeycomb,
    Kagome,
    Custom,
}

impl LatticeType {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "square" => Ok(Self::Square),
            "triangular" => Ok(Self::Triangular),
            "honeycomb" => Ok(Self::Honeycomb),
            "kagome" => Ok(Self::Kagome),
            "custom" => Ok(Self::Custom),
            other => Err(Error::Lattice(format!("unknown lattice type '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Square => "square",
            Self::Triangular => "triangular",
            Self::Honeycomb => "honeycomb",
            Self::Kagome => "kagome",
            Self::Custom => "custom",
        }
    }
}

/// Explicit bond lists for small hand-built systems.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CustomBonds {
    pub n_sites: usize,
    pub j1: Vec<(usize, usize)>,
    #[serde(default)]
    pub j2: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatticeSpec {
    pub lattice_type: LatticeType,
    pub n1: usize,
    pub n2: usize,
    pub j2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_bonds: Option<CustomBonds>,
}

impl LatticeSpec {
    pub fn new(lattice_type: LatticeType, n1: usize, n2: usize, j2: f64) -> Self {
        Self {
            lattice_type,
            n1,
            n2,
            j2,
            custom_bonds: None,
        }
    }

    pub fn custom(bonds: CustomBonds, j2: f64) -> Self {
        Self {
            lattice_type: LatticeType::Custom,
            n1: bonds.n_sites,
            n2: 1,
            j2,
            custom_bonds: Some(bonds),
        }
    }

    /// Open chain of two spins coupled by one J1 bond.
    pub fn two_site() -> Self {
        Self::custom(
            CustomBonds {
                n_sites: 2,
                j1: vec![(0, 1)],
                j2: vec![],
            },
            0.0,
        )
    }

    /// Periodic ring of `n` spins with J1 between neighbours and J2 between
    /// next-nearest neighbours.
    pub fn ring(n: usize, j2: f64) -> Self {
        let j1 = (0..n).map(|i| (i, (i + 1) % n)).collect();
        let j2_bonds = if n > 4 {
            (0..n).map(|i| (i, (i + 2) % n)).collect()
        } else {
            vec![]
        };
        Self::custom(
            CustomBonds {
                n_sites: n,
                j1,
                j2: j2_bonds,
            },
            j2,
        )
    }
}

/// A finite periodic lattice with its J1/J2 bond sets.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lattice {
    pub lattice_type: LatticeType,
    pub n1: usize,
    pub n2: usize,
    pub j2: f64,
    pub n_sites: usize,
    pub positions: Vec<[f64; 2]>,
    pub j1_bonds: Vec<(usize, usize)>,
    pub j2_bonds: Vec<(usize, usize)>,
    pub translations: [Vec<usize>; 2],
    /// Fine-grid coordinates `(c, r)` of every site; empty for custom lattices.
    pub grid_coords: Vec<[i64; 2]>,
    /// Torus periods in fine-grid coordinates.
    pub torus: [[i64; 2]; 2],
}

struct Geometry {
    triangular_basis: bool,
    bravais: [[i64; 2]; 2],
    real: &'static [[i64; 2]],
    virt: &'static [[i64; 2]],
}

fn geometry(t: LatticeType) -> Option<Geometry> {
    match t {
        LatticeType::Square => Some(Geometry {
            triangular_basis: false,
            bravais: [[1, 0], [0, 1]],
            real: &[[0, 0]],
            virt: &[],
        }),
        LatticeType::Triangular => Some(Geometry {
            triangular_basis: true,
            bravais: [[1, 0], [0, 1]],
            real: &[[0, 0]],
            virt: &[],
        }),
        // Virtual sublattice is (c - r) = 0 mod 3; A has residue 1, B residue 2.
        LatticeType::Honeycomb => Some(Geometry {
            triangular_basis: true,
            bravais: [[1, 1], [-1, 2]],
            real: &[[1, 0], [0, 1]],
            virt: &[[0, 0]],
        }),
        // Kagome is the triangular grid minus the points with both c and r odd.
        LatticeType::Kagome => Some(Geometry {
            triangular_basis: true,
            bravais: [[2, 0], [0, 2]],
            real: &[[0, 0], [1, 0], [0, 1]],
            virt: &[[1, 1]],
        }),
        LatticeType::Custom => None,
    }
}

fn to_cartesian(triangular: bool, x: [i64; 2]) -> [f64; 2] {
    let (c, r) = (x[0] as f64, x[1] as f64);
    if triangular {
        [c + 0.5 * r, r * 3f64.sqrt() / 2.0]
    } else {
        [c, r]
    }
}

fn norm(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

fn normalize_bond(i: usize, j: usize) -> (usize, usize) {
    if i < j {
        (i, j)
    } else {
        (j, i)
    }
}

/// First two neighbour distances of the infinite lattice.
fn neighbour_shells(g: &Geometry) -> (f64, f64) {
    let mut dists: Vec<f64> = Vec::new();
    for a in g.real {
        for p in -3i64..=3 {
            for q in -3i64..=3 {
                for b in g.real {
                    let x = [
                        p * g.bravais[0][0] + q * g.bravais[1][0] + b[0] - a[0],
                        p * g.bravais[0][1] + q * g.bravais[1][1] + b[1] - a[1],
                    ];
                    let d = norm(to_cartesian(g.triangular_basis, x));
                    if d > DIST_TOL {
                        dists.push(d);
                    }
                }
            }
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    dists.dedup_by(|a, b| (*a - *b).abs() < DIST_TOL);
    (dists[0], dists[1])
}

pub fn build_lattice(spec: &LatticeSpec) -> Result<Lattice> {
    if !spec.j2.is_finite() {
        return Err(Error::Lattice(format!("j2 must be finite, got {}", spec.j2)));
    }
    match spec.lattice_type {
        LatticeType::Custom => build_custom(spec),
        t => build_named(t, spec),
    }
}

fn build_custom(spec: &LatticeSpec) -> Result<Lattice> {
    let bonds = spec
        .custom_bonds
        .as_ref()
        .ok_or_else(|| Error::Lattice("custom lattice requires explicit bonds".into()))?;
    let n = bonds.n_sites;
    if n == 0 {
        return Err(Error::Lattice("custom lattice needs at least one site".into()));
    }
    let clean = |list: &[(usize, usize)], label: &str| -> Result<Vec<(usize, usize)>> {
        let mut set = BTreeSet::new();
        for &(i, j) in list {
            if i >= n || j >= n {
                return Err(Error::Lattice(format!("{label} bond ({i},{j}) out of range")));
            }
            if i == j {
                return Err(Error::Lattice(format!("{label} bond ({i},{j}) is a self-loop")));
            }
            if !set.insert(normalize_bond(i, j)) {
                return Err(Error::Lattice(format!("duplicate {label} bond ({i},{j})")));
            }
        }
        Ok(set.into_iter().collect())
    };
    let j1_bonds = clean(&bonds.j1, "J1")?;
    let j2_bonds = clean(&bonds.j2, "J2")?;
    if j1_bonds.iter().any(|b| j2_bonds.contains(b)) {
        return Err(Error::Lattice("a pair cannot carry both J1 and J2".into()));
    }
    let identity: Vec<usize> = (0..n).collect();
    Ok(Lattice {
        lattice_type: LatticeType::Custom,
        n1: n,
        n2: 1,
        j2: spec.j2,
        n_sites: n,
        positions: (0..n).map(|i| [i as f64, 0.0]).collect(),
        j1_bonds,
        j2_bonds,
        translations: [identity.clone(), identity],
        grid_coords: Vec::new(),
        torus: [[0, 0], [0, 0]],
    })
}

fn build_named(t: LatticeType, spec: &LatticeSpec) -> Result<Lattice> {
    let g = geometry(t).expect("named lattice");
    let (n1, n2) = (spec.n1, spec.n2);
    if n1 < 2 || n2 < 2 {
        return Err(Error::Lattice(format!(
            "{} torus {n1}x{n2} is too small (need at least 2x2 cells)",
            t.name()
        )));
    }
    let nb = g.real.len();
    let n_sites = n1 * n2 * nb;
    let torus = [
        [g.bravais[0][0] * n1 as i64, g.bravais[0][1] * n1 as i64],
        [g.bravais[1][0] * n2 as i64, g.bravais[1][1] * n2 as i64],
    ];

    let mut grid_coords = Vec::with_capacity(n_sites);
    for q in 0..n2 as i64 {
        for p in 0..n1 as i64 {
            for b in g.real {
                grid_coords.push([
                    p * g.bravais[0][0] + q * g.bravais[1][0] + b[0],
                    p * g.bravais[0][1] + q * g.bravais[1][1] + b[1],
                ]);
            }
        }
    }
    let positions: Vec<[f64; 2]> = grid_coords
        .iter()
        .map(|&x| to_cartesian(g.triangular_basis, x))
        .collect();

    let (d1, d2) = neighbour_shells(&g);
    let image = |k1: i64, k2: i64| -> [i64; 2] {
        [
            k1 * torus[0][0] + k2 * torus[1][0],
            k1 * torus[0][1] + k2 * torus[1][1],
        ]
    };
    let j2_in_use = spec.j2 != 0.0;
    let mut degenerate_j1 = false;
    let mut degenerate_j2 = false;

    for k1 in -IMAGE_RANGE..=IMAGE_RANGE {
        for k2 in -IMAGE_RANGE..=IMAGE_RANGE {
            if k1 == 0 && k2 == 0 {
                continue;
            }
            let d = norm(to_cartesian(g.triangular_basis, image(k1, k2)));
            degenerate_j1 |= (d - d1).abs() < DIST_TOL;
            degenerate_j2 |= (d - d2).abs() < DIST_TOL;
        }
    }

    let mut j1_bonds = Vec::new();
    let mut j2_bonds = Vec::new();
    for i in 0..n_sites {
        for j in (i + 1)..n_sites {
            let mut hits1 = 0;
            let mut hits2 = 0;
            for k1 in -IMAGE_RANGE..=IMAGE_RANGE {
                for k2 in -IMAGE_RANGE..=IMAGE_RANGE {
                    let s = image(k1, k2);
                    let x = [
                        grid_coords[j][0] - grid_coords[i][0] + s[0],
                        grid_coords[j][1] - grid_coords[i][1] + s[1],
                    ];
                    let d = norm(to_cartesian(g.triangular_basis, x));
                    if (d - d1).abs() < DIST_TOL {
                        hits1 += 1;
                    } else if (d - d2).abs() < DIST_TOL {
                        hits2 += 1;
                    }
                }
            }
            if hits1 > 1 || (hits1 > 0 && hits2 > 0) {
                degenerate_j1 = true;
            }
            if hits2 > 1 || (hits1 > 0 && hits2 > 0) {
                degenerate_j2 = true;
            }
            if hits1 > 0 {
                j1_bonds.push((i, j));
            } else if hits2 > 0 {
                j2_bonds.push((i, j));
            }
        }
    }
    if degenerate_j1 || (j2_in_use && degenerate_j2) {
        return Err(Error::Lattice(format!(
            "{} torus {n1}x{n2} is too small: periodic images create duplicate or self bonds",
            t.name()
        )));
    }

    for (label, bonds) in [("J1", &j1_bonds), ("J2", &j2_bonds)] {
        if label == "J2" && !j2_in_use && degenerate_j2 {
            continue;
        }
        let mut degree = vec![0usize; n_sites];
        for &(i, j) in bonds.iter() {
            degree[i] += 1;
            degree[j] += 1;
        }
        if degree.iter().any(|&d| d != degree[0]) {
            return Err(Error::Internal(format!(
                "{label} degrees are not uniform on {} {n1}x{n2}",
                t.name()
            )));
        }
    }

    let index = |p: usize, q: usize, b: usize| (q * n1 + p) * nb + b;
    let mut t1 = vec![0; n_sites];
    let mut t2 = vec![0; n_sites];
    for q in 0..n2 {
        for p in 0..n1 {
            for b in 0..nb {
                t1[index(p, q, b)] = index((p + 1) % n1, q, b);
                t2[index(p, q, b)] = index(p, (q + 1) % n2, b);
            }
        }
    }

    Ok(Lattice {
        lattice_type: t,
        n1,
        n2,
        j2: spec.j2,
        n_sites,
        positions,
        j1_bonds,
        j2_bonds,
        translations: [t1, t2],
        grid_coords,
        torus,
    })
}

impl Lattice {
    /// Minimum-image Euclidean distance between two sites.
    pub fn pbc_distance(&self, i: usize, j: usize) -> f64 {
        if self.lattice_type == LatticeType::Custom {
            return (self.positions[i][0] - self.positions[j][0]).abs();
        }
        let tri = self.lattice_type != LatticeType::Square;
        let mut best = f64::INFINITY;
        for k1 in -IMAGE_RANGE..=IMAGE_RANGE {
            for k2 in -IMAGE_RANGE..=IMAGE_RANGE {
                let x = [
                    self.grid_coords[j][0] - self.grid_coords[i][0]
                        + k1 * self.torus[0][0]
                        + k2 * self.torus[1][0],
                    self.grid_coords[j][1] - self.grid_coords[i][1]
                        + k1 * self.torus[0][1]
                        + k2 * self.torus[1][1],
                ];
                best = best.min(norm(to_cartesian(tri, x)));
            }
        }
        best
    }

    /// All interacting bonds with their couplings; J2 bonds are omitted when
    /// `j2 == 0`.
    pub fn weighted_bonds(&self) -> Vec<(usize, usize, f64)> {
        let mut out: Vec<(usize, usize, f64)> =
            self.j1_bonds.iter().map(|&(i, j)| (i, j, 1.0)).collect();
        if self.j2 != 0.0 {
            out.extend(self.j2_bonds.iter().map(|&(i, j)| (i, j, self.j2)));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lattice completed to a full square or triangular torus by inserting
/// virtual vertices at hexagon centres.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AugmentedLattice {
    pub base: Lattice,
    pub n_virtual: usize,
    /// Fine-grid coordinates: the `N` real sites first, then the virtual ones.
    pub tri_coords: Vec<[i64; 2]>,
}

impl AugmentedLattice {
    pub fn n_total(&self) -> usize {
        self.tri_coords.len()
    }
}

pub fn augment(lat: &Lattice) -> Result<AugmentedLattice> {
    let g = geometry(lat.lattice_type).ok_or_else(|| {
        Error::Unsupported("custom lattices have no augmented embedding".into())
    })?;
    let mut tri_coords = lat.grid_coords.clone();
    for q in 0..lat.n2 as i64 {
        for p in 0..lat.n1 as i64 {
            for v in g.virt {
                tri_coords.push([
                    p * g.bravais[0][0] + q * g.bravais[1][0] + v[0],
                    p * g.bravais[0][1] + q * g.bravais[1][1] + v[1],
                ]);
            }
        }
    }
    Ok(AugmentedLattice {
        base: lat.clone(),
        n_virtual: tri_coords.len() - lat.n_sites,
        tri_coords,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "id")]
pub enum CellKind {
    Original(usize),
    Virtual(usize),
    AlignPad,
}

/// A halo cell (outside the occupied region) and the interior cell that
/// holds its periodic image, if that image may be copied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WrapEntry {
    /// Grid row, `-1..=H`.
    pub row: i64,
    /// Grid column, `-1..=W`.
    pub col: i64,
    /// Source cell index (`row * W + col`) or `None` for a zero fill.
    pub source: Option<usize>,
    /// Torus translation `(k1, k2)` such that the halo cell minus
    /// `k1 * L1 + k2 * L2` is the source cell.
    pub shift: [i64; 2],
}

/// Rectangular grid holding an augmented lattice, with the tables that drive
/// periodic padding.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GridEmbedding {
    pub height: usize,
    pub width: usize,
    pub cell_kind: Vec<CellKind>,
    /// One-cell-wide ring around the `H x W` grid.
    pub wrap_table: Vec<WrapEntry>,
    /// Interior alignment cells; periodic padding fills these as well.
    pub align_table: Vec<WrapEntry>,
    pub pad_virtual: bool,
    pub mask_enabled: bool,
    pub site_cell: Vec<usize>,
    pub virtual_cell: Vec<usize>,
    /// Fine-grid coordinate of grid cell `(0, 0)`.
    pub origin: [i64; 2],
    pub torus: [[i64; 2]; 2],
}

impl GridEmbedding {
    pub fn n_cells(&self) -> usize {
        self.height * self.width
    }

    pub fn padded_dims(&self) -> (usize, usize) {
        (self.height + 2, self.width + 2)
    }

    pub fn n_sites(&self) -> usize {
        self.site_cell.len()
    }

    pub fn count_align_pad(&self) -> usize {
        self.cell_kind
            .iter()
            .filter(|k| matches!(k, CellKind::AlignPad))
            .count()
    }

    /// 1 for Original and Virtual cells, 0 for alignment padding.
    pub fn keep_mask(&self) -> Vec<f64> {
        self.cell_kind
            .iter()
            .map(|k| if matches!(k, CellKind::AlignPad) { 0.0 } else { 1.0 })
            .collect()
    }

    /// Single-row embedding for custom lattices: no geometry, so the ring is
    /// zero-filled.
    pub fn chain(n_sites: usize) -> Self {
        let width = n_sites;
        let mut wrap_table = Vec::new();
        for row in -1..=1i64 {
            for col in -1..=width as i64 {
                if row == 0 && col >= 0 && col < width as i64 {
                    continue;
                }
                wrap_table.push(WrapEntry {
                    row,
                    col,
                    source: None,
                    shift: [0, 0],
                });
            }
        }
        Self {
            height: 1,
            width,
            cell_kind: (0..n_sites).map(CellKind::Original).collect(),
            wrap_table,
            align_table: Vec::new(),
            pad_virtual: false,
            mask_enabled: true,
            site_cell: (0..n_sites).collect(),
            virtual_cell: Vec::new(),
            origin: [0, 0],
            torus: [[0, 0], [0, 0]],
        }
    }

    /// Embedding for any lattice: the augmented grid for named types, a chain
    /// for custom ones.
    pub fn for_lattice(lat: &Lattice, pad_virtual: bool, mask_enabled: bool) -> Result<Self> {
        if lat.lattice_type == LatticeType::Custom {
            let mut e = Self::chain(lat.n_sites);
            e.mask_enabled = mask_enabled;
            return Ok(e);
        }
        grid_embed(&augment(lat)?, pad_virtual, mask_enabled)
    }

    pub fn cell_index(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    /// Grid cell holding the torus point `x` (fine coordinates), together with
    /// the torus shift that was applied.
    pub fn locate(&self, x: [i64; 2]) -> Option<(usize, [i64; 2])> {
        if self.torus == [[0, 0], [0, 0]] {
            return self.cell_at(x).map(|c| (c, [0, 0]));
        }
        for k1 in -3i64..=3 {
            for k2 in -3i64..=3 {
                let y = [
                    x[0] - k1 * self.torus[0][0] - k2 * self.torus[1][0],
                    x[1] - k1 * self.torus[0][1] - k2 * self.torus[1][1],
                ];
                if let Some(c) = self.cell_at(y) {
                    return Some((c, [k1, k2]));
                }
            }
        }
        None
    }

    /// Non-alignment cell at fine coordinate `x` without wrapping.
    pub fn cell_at(&self, x: [i64; 2]) -> Option<usize> {
        let col = x[0] - self.origin[0];
        let row = x[1] - self.origin[1];
        if row < 0 || col < 0 || row >= self.height as i64 || col >= self.width as i64 {
            return None;
        }
        let idx = self.cell_index(row as usize, col as usize);
        match self.cell_kind[idx] {
            CellKind::AlignPad => None,
            _ => Some(idx),
        }
    }

    /// Fine coordinate of a grid cell.
    pub fn fine_coord(&self, cell: usize) -> [i64; 2] {
        [
            (cell % self.width) as i64 + self.origin[0],
            (cell / self.width) as i64 + self.origin[1],
        ]
    }

    /// For every cell of the padded `(H+2) x (W+2)` frame, the grid cell it
    /// copies from, or `None` for zero. Occupied interior cells copy
    /// themselves.
    pub fn pad_sources(&self, periodic: bool) -> Vec<Option<usize>> {
        let (ph, pw) = self.padded_dims();
        let mut out = vec![None; ph * pw];
        for (cell, kind) in self.cell_kind.iter().enumerate() {
            if !matches!(kind, CellKind::AlignPad) {
                let (r, c) = (cell / self.width, cell % self.width);
                out[(r + 1) * pw + c + 1] = Some(cell);
            }
        }
        if periodic {
            for e in self.wrap_table.iter().chain(self.align_table.iter()) {
                let idx = (e.row + 1) as usize * pw + (e.col + 1) as usize;
                out[idx] = e.source;
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn grid_embed(
    aug: &AugmentedLattice,
    pad_virtual: bool,
    mask_enabled: bool,
) -> Result<GridEmbedding> {
    let n = aug.base.n_sites;
    let cmin = aug.tri_coords.iter().map(|x| x[0]).min().unwrap();
    let cmax = aug.tri_coords.iter().map(|x| x[0]).max().unwrap();
    let rmin = aug.tri_coords.iter().map(|x| x[1]).min().unwrap();
    let rmax = aug.tri_coords.iter().map(|x| x[1]).max().unwrap();
    let width = (cmax - cmin + 1) as usize;
    let height = (rmax - rmin + 1) as usize;

    let mut cell_kind = vec![CellKind::AlignPad; width * height];
    let mut site_cell = Vec::with_capacity(n);
    let mut virtual_cell = Vec::with_capacity(aug.n_virtual);
    for (k, x) in aug.tri_coords.iter().enumerate() {
        let idx = (x[1] - rmin) as usize * width + (x[0] - cmin) as usize;
        if !matches!(cell_kind[idx], CellKind::AlignPad) {
            return Err(Error::Internal(format!("two sites share grid cell {x:?}")));
        }
        if k < n {
            cell_kind[idx] = CellKind::Original(k);
            site_cell.push(idx);
        } else {
            cell_kind[idx] = CellKind::Virtual(k - n);
            virtual_cell.push(idx);
        }
    }

    let mut emb = GridEmbedding {
        height,
        width,
        cell_kind,
        wrap_table: Vec::new(),
        align_table: Vec::new(),
        pad_virtual,
        mask_enabled,
        site_cell,
        virtual_cell,
        origin: [cmin, rmin],
        torus: aug.base.torus,
    };

    let mut wrap_table = Vec::new();
    let mut align_table = Vec::new();
    for row in -1..=height as i64 {
        for col in -1..=width as i64 {
            let ring = row < 0 || col < 0 || row >= height as i64 || col >= width as i64;
            if !ring {
                let idx = emb.cell_index(row as usize, col as usize);
                if !matches!(emb.cell_kind[idx], CellKind::AlignPad) {
                    continue;
                }
            }
            let x = [col + cmin, row + rmin];
            let (src, shift) = emb.locate(x).ok_or_else(|| {
                Error::Internal(format!("torus point {x:?} has no representative"))
            })?;
            let eligible = match emb.cell_kind[src] {
                CellKind::Original(_) => true,
                CellKind::Virtual(_) => pad_virtual,
                CellKind::AlignPad => false,
            };
            let entry = WrapEntry {
                row,
                col,
                source: eligible.then_some(src),
                shift,
            };
            if ring {
                wrap_table.push(entry);
            } else {
                align_table.push(entry);
            }
        }
    }
    emb.wrap_table = wrap_table;
    emb.align_table = align_table;
    Ok(emb)
}
