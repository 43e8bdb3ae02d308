//! Uniform space-time lattice and the discrete differential operators
//! restricted to an embedded domain.
//!
//! Axis 0 is always time and spans exactly [0, 1]; axes 1..=n are spatial.
//! All fields are stored node-centered (collocated) in C order, slowest
//! axis first. The discrete divergence is constructed as the exact negative
//! adjoint of the masked gradient under the node-volume inner product, so
//! summation by parts holds to machine precision for any mask.

use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Minimum chunk length before a kernel is worth splitting across threads.
const PAR_MIN_LEN: usize = 1 << 14;

/// Uniform lattice over [0,1] x spatial box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    /// Per-axis node counts, axis 0 = time.
    shape: Vec<usize>,
    /// Per-axis step sizes; spacing[0] = 1/(shape[0]-1).
    spacing: Vec<f64>,
    /// Coordinates of the first spatial sample (axes 1..=n).
    spatial_origin: Vec<f64>,
}

impl SpaceTimeGrid {
    /// Build a grid with `nt` time samples (t=0 and t=1 included exactly)
    /// and the given spatial sampling.
    pub fn new(nt: usize, spatial_shape: &[usize], spatial_origin: &[f64], spatial_spacing: &[f64]) -> Result<Self> {
        if nt < 2 {
            return Err(Error::Config(format!("need at least 2 time samples, got {nt}")));
        }
        let n = spatial_shape.len();
        if n == 0 || spatial_origin.len() != n || spatial_spacing.len() != n {
            return Err(Error::Config(
                "spatial shape, origin and spacing must have equal nonzero length".into(),
            ));
        }
        if spatial_shape.iter().any(|&m| m < 2) {
            return Err(Error::Config("every spatial axis needs at least 2 samples".into()));
        }
        if spatial_spacing.iter().any(|&h| !(h > 0.0)) {
            return Err(Error::Config("spacings must be strictly positive".into()));
        }
        let mut shape = Vec::with_capacity(n + 1);
        shape.push(nt);
        shape.extend_from_slice(spatial_shape);
        let mut spacing = Vec::with_capacity(n + 1);
        spacing.push(1.0 / (nt - 1) as f64);
        spacing.extend_from_slice(spatial_spacing);
        Ok(Self {
            shape,
            spacing,
            spatial_origin: spatial_origin.to_vec(),
        })
    }

    /// Square grid over [0,1] x [0,L1] x ... with `nt` x `nx` samples, n = 1.
    pub fn line(nt: usize, nx: usize, x0: f64, x1: f64) -> Result<Self> {
        Self::new(nt, &[nx], &[x0], &[(x1 - x0) / (nx - 1) as f64])
    }

    /// n = 2 grid over a rectangle.
    pub fn plane(nt: usize, nx: usize, ny: usize, min: [f64; 2], max: [f64; 2]) -> Result<Self> {
        Self::new(
            nt,
            &[nx, ny],
            &min,
            &[
                (max[0] - min[0]) / (nx - 1) as f64,
                (max[1] - min[1]) / (ny - 1) as f64,
            ],
        )
    }

    pub fn spatial_dims(&self) -> usize {
        self.shape.len() - 1
    }

    /// Number of vector components = n + 1.
    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    pub fn spatial_origin(&self) -> &[f64] {
        &self.spatial_origin
    }

    pub fn num_nodes(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn num_spatial_nodes(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Node volume element.
    pub fn cell_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    /// Spatial volume element (no dt factor).
    pub fn spatial_cell_volume(&self) -> f64 {
        self.spacing[1..].iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(0.0, f64::max)
    }

    /// C-order strides (axis 0 slowest).
    pub fn strides(&self) -> Vec<usize> {
        let d = self.dims();
        let mut s = vec![1usize; d];
        for a in (0..d - 1).rev() {
            s[a] = s[a + 1] * self.shape[a + 1];
        }
        s
    }

    /// Decode a flat index into per-axis coordinates.
    pub fn coords_of(&self, mut idx: usize) -> Vec<usize> {
        let strides = self.strides();
        let mut c = vec![0usize; self.dims()];
        for a in 0..self.dims() {
            c[a] = idx / strides[a];
            idx %= strides[a];
        }
        c
    }

    pub fn index_of(&self, coords: &[usize]) -> usize {
        let strides = self.strides();
        coords.iter().zip(&strides).map(|(c, s)| c * s).sum()
    }

    /// Physical position of a node (t, x1, .., xn).
    pub fn position(&self, coords: &[usize]) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.dims());
        p.push(coords[0] as f64 * self.spacing[0]);
        for a in 1..self.dims() {
            p.push(self.spatial_origin[a - 1] + coords[a] as f64 * self.spacing[a]);
        }
        p
    }

    pub fn time_of_slice(&self, k: usize) -> f64 {
        k as f64 * self.spacing[0]
    }

    /// Flat index range of one time slice.
    pub fn slice_range(&self, k: usize) -> std::ops::Range<usize> {
        let m = self.num_spatial_nodes();
        k * m..(k + 1) * m
    }

    /// Nearest time-slice index for t in [0,1].
    pub fn slice_of_time(&self, t: f64) -> usize {
        let k = (t / self.spacing[0]).round() as isize;
        k.clamp(0, self.shape[0] as isize - 1) as usize
    }
}

/// One scalar sample per lattice node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarLattice {
    pub grid: SpaceTimeGrid,
    pub values: Vec<f64>,
}

impl ScalarLattice {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.num_nodes()],
        }
    }

    pub fn constant(grid: &SpaceTimeGrid, c: f64) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![c; grid.num_nodes()],
        }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, mut f: impl FnMut(&[f64]) -> f64) -> Self {
        let mut values = vec![0.0; grid.num_nodes()];
        let mut coords = vec![0usize; grid.dims()];
        for v in values.iter_mut() {
            *v = f(&grid.position(&coords));
            advance(&mut coords, grid.shape());
        }
        Self {
            grid: grid.clone(),
            values,
        }
    }
}

/// One (n+1)-vector per lattice node, stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorLattice {
    pub grid: SpaceTimeGrid,
    /// Component c occupies values[c*num_nodes .. (c+1)*num_nodes].
    pub values: Vec<f64>,
}

impl VectorLattice {
    pub fn zeros(grid: &SpaceTimeGrid) -> Self {
        Self {
            grid: grid.clone(),
            values: vec![0.0; grid.num_nodes() * grid.dims()],
        }
    }

    pub fn from_fn(grid: &SpaceTimeGrid, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Self {
        let mut out = Self::zeros(grid);
        let n = grid.num_nodes();
        let mut coords = vec![0usize; grid.dims()];
        for i in 0..n {
            let v = f(&grid.position(&coords));
            for c in 0..grid.dims() {
                out.values[c * n + i] = v[c];
            }
            advance(&mut coords, grid.shape());
        }
        out
    }

    pub fn component(&self, c: usize) -> &[f64] {
        let n = self.grid.num_nodes();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn component_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.num_nodes();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// All components at one node.
    pub fn at(&self, i: usize) -> Vec<f64> {
        let n = self.grid.num_nodes();
        (0..self.grid.dims()).map(|c| self.values[c * n + i]).collect()
    }
}

/// Odometer increment of a coordinate tuple in C order.
pub(crate) fn advance(coords: &mut [usize], shape: &[usize]) {
    for a in (0..coords.len()).rev() {
        coords[a] += 1;
        if coords[a] < shape[a] {
            return;
        }
        coords[a] = 0;
    }
}

/// Per-axis neighbor-availability bits: bit 2a = minus neighbor inside,
/// bit 2a+1 = plus neighbor inside.
pub type NbrBits = u8;

/// Classifies lattice nodes against the embedded domain and records which
/// stencil neighbors are available. Nodes outside the domain are the
/// explicit "undefined" sentinel: no operator ever writes or reads them.
#[derive(Debug, Clone)]
pub struct InteriorMask {
    pub grid: SpaceTimeGrid,
    /// True where the node belongs to the domain.
    pub inside: Vec<bool>,
    /// Stencil bits: which axis neighbors the gradient actually uses.
    /// May be narrowed by boundary closures.
    pub nbr: Vec<NbrBits>,
    /// Adjacency bits: which axis neighbors exist inside the domain.
    /// Pure geometry; never modified after construction.
    pub adj: Vec<NbrBits>,
}

impl InteriorMask {
    /// Build from a per-node predicate.
    pub fn from_inside(grid: &SpaceTimeGrid, inside: Vec<bool>) -> Self {
        assert_eq!(inside.len(), grid.num_nodes());
        let strides = grid.strides();
        let shape = grid.shape().to_vec();
        let d = grid.dims();
        let mut nbr = vec![0u8; inside.len()];
        let mut coords = vec![0usize; d];
        for i in 0..inside.len() {
            if inside[i] {
                let mut bits = 0u8;
                for a in 0..d {
                    if coords[a] > 0 && inside[i - strides[a]] {
                        bits |= 1 << (2 * a);
                    }
                    if coords[a] + 1 < shape[a] && inside[i + strides[a]] {
                        bits |= 1 << (2 * a + 1);
                    }
                }
                nbr[i] = bits;
            }
            advance(&mut coords, &shape);
        }
        Self {
            grid: grid.clone(),
            inside,
            adj: nbr.clone(),
            nbr,
        }
    }

    /// Full-grid mask (every node inside).
    pub fn full(grid: &SpaceTimeGrid) -> Self {
        Self::from_inside(grid, vec![true; grid.num_nodes()])
    }

    pub fn is_inside(&self, i: usize) -> bool {
        self.inside[i]
    }

    /// Inside with full central stencils along every axis.
    pub fn is_full_stencil(&self, i: usize) -> bool {
        if !self.inside[i] {
            return false;
        }
        let d = self.grid.dims();
        self.nbr[i] == full_bits(d)
    }

    /// Inside, full stencil, and every axis neighbor also has a full
    /// stencil. This is the "deep interior" where both the gradient and
    /// its adjoint reduce to plain central differences.
    pub fn is_deep(&self, i: usize) -> bool {
        if !self.is_full_stencil(i) {
            return false;
        }
        let strides = self.grid.strides();
        let d = self.grid.dims();
        (0..d).all(|a| {
            self.is_full_stencil(i - strides[a]) && self.is_full_stencil(i + strides[a])
        })
    }

    pub fn count_inside(&self) -> usize {
        self.inside.iter().filter(|&&b| b).count()
    }

    /// Clear the time-axis neighbor bits of the given nodes, so the
    /// gradient's temporal component vanishes there and the adjoint stops
    /// gathering through them. Used by the elliptic solver to close the
    /// temporal faces with prescribed flux data.
    pub fn close_time_axis(&mut self, nodes: impl Iterator<Item = usize>) {
        for i in nodes {
            self.nbr[i] &= !0b11;
        }
    }

    /// Check that another lattice lives on the same grid.
    pub fn check_grid(&self, other: &SpaceTimeGrid) -> Result<()> {
        if &self.grid != other {
            return Err(Error::Config("grid mismatch between lattice and mask".into()));
        }
        Ok(())
    }
}

pub(crate) fn full_bits(dims: usize) -> u8 {
    let mut b = 0u8;
    for a in 0..dims {
        b |= 0b11 << (2 * a);
    }
    b
}

/// Raw gradient kernel: one component at a time into `out`.
/// Central differences where both axis neighbors are inside, one-sided
/// first-order where only one is, zero where the node is isolated along
/// the axis. Outside nodes stay zero and are flagged by the mask.
pub(crate) fn gradient_component_into(f: &[f64], mask: &InteriorMask, axis: usize, out: &mut [f64]) {
    let stride = mask.grid.strides()[axis];
    let h = mask.grid.spacing()[axis];
    let inv_h = 1.0 / h;
    let inv_2h = 0.5 / h;
    let minus_bit = 1u8 << (2 * axis);
    let plus_bit = 1u8 << (2 * axis + 1);
    let nbr = &mask.nbr;
    let inside = &mask.inside;

    let work = |offset: usize, chunk: &mut [f64]| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let i = offset + k;
            if !inside[i] {
                *o = 0.0;
                continue;
            }
            let b = nbr[i];
            let has_m = b & minus_bit != 0;
            let has_p = b & plus_bit != 0;
            *o = match (has_m, has_p) {
                (true, true) => (f[i + stride] - f[i - stride]) * inv_2h,
                (false, true) => (f[i + stride] - f[i]) * inv_h,
                (true, false) => (f[i] - f[i - stride]) * inv_h,
                (false, false) => 0.0,
            };
        }
    };

    if out.len() >= PAR_MIN_LEN {
        out.par_chunks_mut(PAR_MIN_LEN)
            .enumerate()
            .for_each(|(ci, chunk)| work(ci * PAR_MIN_LEN, chunk));
    } else {
        work(0, out);
    }
}

/// Raw adjoint-divergence kernel, the exact negative transpose of
/// `gradient_component_into` under the uniform node-volume inner product.
/// Interior rows reduce to central differences; rows adjacent to the
/// domain boundary additionally carry the discrete surface flux.
pub(crate) fn divergence_into(w: &VectorLattice, mask: &InteriorMask, out: &mut [f64]) {
    let d = mask.grid.dims();
    let n = mask.grid.num_nodes();
    let strides = mask.grid.strides();
    let spacing = mask.grid.spacing().to_vec();
    let nbr = &mask.nbr;
    let adj = &mask.adj;
    let inside = &mask.inside;
    let values = &w.values;

    let work = |offset: usize, chunk: &mut [f64]| {
        for (k, o) in chunk.iter_mut().enumerate() {
            let j = offset + k;
            if !inside[j] {
                *o = 0.0;
                continue;
            }
            let mut acc = 0.0;
            for a in 0..d {
                let stride = strides[a];
                let inv_h = 1.0 / spacing[a];
                let inv_2h = 0.5 * inv_h;
                let minus_bit = 1u8 << (2 * a);
                let plus_bit = 1u8 << (2 * a + 1);
                let wa = &values[a * n..(a + 1) * n];
                // Row existence comes from the adjacency bits; the stencil
                // coefficients of a row come from its own (possibly
                // closed) stencil bits. Keeping these separate is what
                // makes this the exact transpose of the gradient.
                let aj = adj[j];
                let bj = nbr[j];

                // Row j-stride places a coefficient on node j when its
                // stencil reaches up to j.
                if aj & minus_bit != 0 {
                    let i = j - stride;
                    let bi = nbr[i];
                    let c_plus = if bi & minus_bit != 0 && bi & plus_bit != 0 {
                        inv_2h
                    } else if bi & plus_bit != 0 {
                        inv_h
                    } else {
                        0.0
                    };
                    acc += c_plus * wa[i];
                }
                // Row j's own coefficient on itself (one-sided rows only).
                {
                    let has_m = bj & minus_bit != 0;
                    let has_p = bj & plus_bit != 0;
                    let c_self = match (has_m, has_p) {
                        (true, true) | (false, false) => 0.0,
                        (false, true) => -inv_h,
                        (true, false) => inv_h,
                    };
                    if c_self != 0.0 {
                        acc += c_self * wa[j];
                    }
                }
                // Row j+stride places a coefficient on node j when its
                // stencil reaches down to j.
                if aj & plus_bit != 0 {
                    let i = j + stride;
                    let bi = nbr[i];
                    let c_minus = if bi & minus_bit != 0 && bi & plus_bit != 0 {
                        -inv_2h
                    } else if bi & minus_bit != 0 {
                        -inv_h
                    } else {
                        0.0
                    };
                    acc += c_minus * wa[i];
                }
            }
            *o = -acc;
        }
    };

    if out.len() >= PAR_MIN_LEN {
        out.par_chunks_mut(PAR_MIN_LEN)
            .enumerate()
            .for_each(|(ci, chunk)| work(ci * PAR_MIN_LEN, chunk));
    } else {
        work(0, out);
    }
}

/// Masked spatio-temporal gradient.
pub fn gradient(f: &ScalarLattice, mask: &InteriorMask) -> Result<VectorLattice> {
    mask.check_grid(&f.grid)?;
    let mut out = VectorLattice::zeros(&f.grid);
    let n = f.grid.num_nodes();
    for a in 0..f.grid.dims() {
        gradient_component_into(&f.values, mask, a, &mut out.values[a * n..(a + 1) * n]);
    }
    Ok(out)
}

/// Masked divergence, the negative adjoint of [`gradient`].
pub fn divergence(w: &VectorLattice, mask: &InteriorMask) -> Result<ScalarLattice> {
    mask.check_grid(&w.grid)?;
    let mut out = ScalarLattice::zeros(&w.grid);
    divergence_into(w, mask, &mut out.values);
    Ok(out)
}

/// First-order upwind approximation of w . grad(f), stencil biased against
/// the sign of each component of w. Falls back to the available one-sided
/// difference when the upwind neighbor is outside the domain.
pub fn upwind_directional(f: &ScalarLattice, w: &VectorLattice, mask: &InteriorMask) -> Result<ScalarLattice> {
    mask.check_grid(&f.grid)?;
    mask.check_grid(&w.grid)?;
    let d = f.grid.dims();
    let n = f.grid.num_nodes();
    let strides = f.grid.strides();
    let spacing = f.grid.spacing();
    let mut out = ScalarLattice::zeros(&f.grid);
    for i in 0..n {
        if !mask.inside[i] {
            continue;
        }
        let b = mask.nbr[i];
        let mut acc = 0.0;
        for a in 0..d {
            let wa = w.values[a * n + i];
            if wa == 0.0 {
                continue;
            }
            if !wa.is_finite() {
                return Err(Error::Data(format!("undefined advecting field at node {i}")));
            }
            let stride = strides[a];
            let inv_h = 1.0 / spacing[a];
            let has_m = b & (1 << (2 * a)) != 0;
            let has_p = b & (1 << (2 * a + 1)) != 0;
            let diff = if wa > 0.0 {
                if has_m {
                    (f.values[i] - f.values[i - stride]) * inv_h
                } else if has_p {
                    (f.values[i + stride] - f.values[i]) * inv_h
                } else {
                    0.0
                }
            } else if has_p {
                (f.values[i + stride] - f.values[i]) * inv_h
            } else if has_m {
                (f.values[i] - f.values[i - stride]) * inv_h
            } else {
                0.0
            };
            acc += wa * diff;
        }
        out.values[i] = acc;
    }
    Ok(out)
}

/// Masked inner product of two scalar lattices with the cell-volume weight.
pub fn dot_scalar(a: &[f64], b: &[f64], mask: &InteriorMask) -> f64 {
    let dv = mask.grid.cell_volume();
    let mut acc = 0.0;
    for i in 0..a.len() {
        if mask.inside[i] {
            acc += a[i] * b[i];
        }
    }
    acc * dv
}

/// Masked inner product of two vector lattices.
pub fn dot_vector(a: &VectorLattice, b: &VectorLattice, mask: &InteriorMask) -> f64 {
    let n = mask.grid.num_nodes();
    let dv = mask.grid.cell_volume();
    let mut acc = 0.0;
    for c in 0..mask.grid.dims() {
        let ac = &a.values[c * n..(c + 1) * n];
        let bc = &b.values[c * n..(c + 1) * n];
        for i in 0..n {
            if mask.inside[i] {
                acc += ac[i] * bc[i];
            }
        }
    }
    acc * dv
}

/// Max-norm over inside nodes.
pub fn norm_inf_masked(a: &[f64], mask: &InteriorMask) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.len() {
        if mask.inside[i] {
            m = m.max(a[i].abs());
        }
    }
    m
}

/// Max-norm over deep-interior nodes only (where all stencils are central).
pub fn norm_inf_deep(a: &[f64], mask: &InteriorMask) -> f64 {
    let mut m = 0.0f64;
    for i in 0..a.len() {
        if mask.is_deep(i) {
            m = m.max(a[i].abs());
        }
    }
    m
}
