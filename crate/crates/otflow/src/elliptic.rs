//! Elliptic solves on the level-set-embedded domain.
//!
//! Two distinct solver paths live here.
//!
//! The projection path drives the optimizer: the Helmholtz split
//! V = grad(phi) + V_perp is computed as a least-squares problem
//! min |V - G phi|^2 in the masked volume inner product, where G is the
//! masked gradient with the temporal-face closure (the time component of
//! G phi on the faces is prescribed data, per the face Neumann
//! conditions). The normal equations G^T G phi = G^T V are symmetric
//! positive semidefinite by construction because the divergence is the
//! exact negative adjoint of G, and conjugate gradients applies. The
//! natural boundary conditions of the least squares are exactly the
//! Neumann conditions on the swept boundary; fixing phi on the lateral
//! boundary ring instead realizes the Dirichlet mode. Post-projection
//! divergence, orthogonality and face-flux identities then hold to solver
//! tolerance rather than truncation order.
//!
//! The general path, [`solve_poisson`], is a vertex-centered finite-volume
//! discretization with ghost closure of the level-set boundary (interface
//! located by linear interpolation of psi), used for standalone Poisson
//! problems and verification.

use crate::error::{Error, Result};
use crate::fields::FluxSpec;
use crate::grid::{
    advance, divergence_into, gradient_component_into, InteriorMask, ScalarLattice, SpaceTimeGrid,
    VectorLattice,
};
use crate::support::LevelSetSupport;

/// Default relative tolerance of the elliptic solves.
pub const TOL_ELLIPTIC: f64 = 1e-8;

/// Boundary data for one Poisson solve: Neumann data on the two temporal
/// faces and either Neumann or Dirichlet data on the swept-out boundary.
#[derive(Debug, Clone)]
pub struct BoundarySpec {
    /// Outward normal derivative data on the t=0 face (spatial samples).
    pub face0: Vec<f64>,
    /// Outward normal derivative data on the t=1 face (spatial samples).
    pub face1: Vec<f64>,
    pub lateral: LateralBc,
}

#[derive(Debug, Clone)]
pub enum LateralBc {
    /// Outward normal derivative on the swept boundary (space-time samples
    /// read near the interface).
    Neumann(ScalarLattice),
    /// Prescribed trace on the swept boundary (space-time samples read
    /// near the interface).
    Dirichlet(ScalarLattice),
}

impl BoundarySpec {
    pub fn homogeneous_neumann(grid: &SpaceTimeGrid) -> Self {
        let m = grid.num_spatial_nodes();
        Self {
            face0: vec![0.0; m],
            face1: vec![0.0; m],
            lateral: LateralBc::Neumann(ScalarLattice::zeros(grid)),
        }
    }

    fn check(&self, grid: &SpaceTimeGrid) -> Result<()> {
        let m = grid.num_spatial_nodes();
        if self.face0.len() != m || self.face1.len() != m {
            return Err(Error::Config("face data sample count mismatch".into()));
        }
        let lat = match &self.lateral {
            LateralBc::Neumann(l) | LateralBc::Dirichlet(l) => l,
        };
        if &lat.grid != grid {
            return Err(Error::Config("lateral data grid mismatch".into()));
        }
        Ok(())
    }
}

/// Result of one elliptic solve.
#[derive(Debug, Clone)]
pub struct EllipticSolution {
    pub phi: ScalarLattice,
    /// Final residual relative to the source norm.
    pub residual_norm: f64,
    pub iterations: usize,
    /// Relative defect removed from an incompatible all-Neumann source.
    pub compatibility_defect: f64,
}

/// Lateral boundary handling of the Helmholtz projection.
pub enum LateralMode<'a> {
    /// Zero-flux gradient: the support stays fixed.
    Neumann,
    /// phi fixed on the lateral boundary ring (data = -alpha), letting the
    /// projected update carry flux across the boundary.
    Dirichlet(&'a ScalarLattice),
}

/// Plain CG on an SPD (or semidefinite, with deflation) operator.
/// `active` masks the unknowns; inactive entries stay zero throughout.
struct Cg {
    r: Vec<f64>,
    p: Vec<f64>,
    ap: Vec<f64>,
    z: Vec<f64>,
}

impl Cg {
    fn new(n: usize) -> Self {
        Self {
            r: vec![0.0; n],
            p: vec![0.0; n],
            ap: vec![0.0; n],
            z: vec![0.0; n],
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn solve(
        &mut self,
        mut apply: impl FnMut(&[f64], &mut [f64]),
        b: &[f64],
        x: &mut [f64],
        active: &[bool],
        diag: Option<&[f64]>,
        tol_rel: f64,
        max_iters: usize,
        // Index groups spanning the operator null space; the group means
        // are removed from iterates and residuals. Empty = nonsingular.
        deflate_groups: &[Vec<usize>],
    ) -> (f64, usize) {
        let n = b.len();
        let dot = |a: &[f64], c: &[f64]| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                if active[i] {
                    acc += a[i] * c[i];
                }
            }
            acc
        };
        let deflate_constants = !deflate_groups.is_empty();
        let remove_mean = |v: &mut [f64]| {
            for group in deflate_groups {
                if group.is_empty() {
                    continue;
                }
                let mut s = 0.0;
                for &i in group {
                    s += v[i];
                }
                let mean = s / group.len() as f64;
                for &i in group {
                    v[i] -= mean;
                }
            }
        };

        for i in 0..n {
            if !active[i] {
                x[i] = 0.0;
            }
        }
        if deflate_constants {
            remove_mean(x);
        }

        let bnorm = dot(b, b).sqrt().max(1e-300);
        apply(x, &mut self.ap);
        for i in 0..n {
            self.r[i] = if active[i] { b[i] - self.ap[i] } else { 0.0 };
        }
        if deflate_constants {
            remove_mean(&mut self.r);
        }
        let precond = |z: &mut [f64], r: &[f64]| match diag {
            Some(d) => {
                for i in 0..n {
                    z[i] = if active[i] && d[i] > 0.0 { r[i] / d[i] } else { r[i] };
                }
            }
            None => z.copy_from_slice(r),
        };
        precond(&mut self.z, &self.r);
        self.p.copy_from_slice(&self.z);
        let mut rz = dot(&self.r, &self.z);
        let mut res = dot(&self.r, &self.r).sqrt();
        let mut iters = 0;

        while res / bnorm > tol_rel && iters < max_iters {
            apply(&self.p, &mut self.ap);
            let pap = dot(&self.p, &self.ap);
            if pap <= 0.0 {
                break;
            }
            let alpha = rz / pap;
            for i in 0..n {
                if active[i] {
                    x[i] += alpha * self.p[i];
                    self.r[i] -= alpha * self.ap[i];
                }
            }
            if deflate_constants && iters % 32 == 31 {
                remove_mean(&mut self.r);
                remove_mean(x);
            }
            precond(&mut self.z, &self.r);
            let rz_new = dot(&self.r, &self.z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                if active[i] {
                    self.p[i] = self.z[i] + beta * self.p[i];
                }
            }
            res = dot(&self.r, &self.r).sqrt();
            iters += 1;
        }
        (res / bnorm, iters)
    }
}

/// Masks and node sets derived from one support, shared by the projection
/// and initialization solves. Rebuild whenever the support moves.
pub struct SupportOperators {
    pub grid: SpaceTimeGrid,
    /// Plain interior mask of {psi < 0}.
    pub mask: InteriorMask,
    /// Interior mask with the temporal-face time stencils closed.
    pub proj_mask: InteriorMask,
    pub face0_nodes: Vec<usize>,
    pub face1_nodes: Vec<usize>,
    /// Inside nodes strictly between the faces that touch the outside.
    pub lateral_ring: Vec<usize>,
    /// Jacobi diagonal of the face-closed normal equations.
    diag: Vec<f64>,
    /// Null-space deflation group of the singular Neumann-mode operator
    /// (constants over the inside nodes).
    deflate: Vec<Vec<usize>>,
}

impl SupportOperators {
    pub fn build(support: &LevelSetSupport) -> Self {
        let grid = support.grid().clone();
        let mask = support.interior_mask();
        let (face0_nodes, face1_nodes) = support.face_nodes();
        let mut proj_mask = mask.clone();
        proj_mask.close_time_axis(face0_nodes.iter().chain(face1_nodes.iter()).cloned());

        let m = grid.num_spatial_nodes();
        let nt = grid.shape()[0];
        let d = grid.dims();
        let full = crate::grid::full_bits(d);
        let mut lateral_ring = Vec::new();
        for i in m..(nt - 1) * m {
            if mask.inside[i] && mask.nbr[i] != full {
                lateral_ring.push(i);
            }
        }
        let diag = normal_eq_diag(&proj_mask);
        let all: Vec<usize> = (0..grid.num_nodes()).filter(|&i| proj_mask.inside[i]).collect();
        Self {
            grid,
            mask,
            proj_mask,
            face0_nodes,
            face1_nodes,
            lateral_ring,
            diag,
            deflate: vec![all],
        }
    }

    pub fn default_max_iters(&self) -> usize {
        10 * (self.grid.num_nodes() as f64).sqrt().ceil() as usize
    }
}

/// Diagonal of G^T G for the given mask: sum of squared stencil
/// coefficients that reference each node.
fn normal_eq_diag(mask: &InteriorMask) -> Vec<f64> {
    let grid = &mask.grid;
    let d = grid.dims();
    let n = grid.num_nodes();
    let strides = grid.strides();
    let mut diag = vec![0.0; n];
    for j in 0..n {
        if !mask.inside[j] {
            continue;
        }
        let mut acc = 0.0;
        for a in 0..d {
            let stride = strides[a];
            let inv_h = 1.0 / grid.spacing()[a];
            let inv_2h = 0.5 * inv_h;
            let minus_bit = 1u8 << (2 * a);
            let plus_bit = 1u8 << (2 * a + 1);
            let aj = mask.adj[j];
            let bj = mask.nbr[j];
            // Row j's own coefficient on itself.
            match (bj & minus_bit != 0, bj & plus_bit != 0) {
                (false, true) | (true, false) => acc += inv_h * inv_h,
                _ => {}
            }
            // Row j-s places a coefficient on j.
            if aj & minus_bit != 0 {
                let bi = mask.nbr[j - stride];
                if bi & minus_bit != 0 && bi & plus_bit != 0 {
                    acc += inv_2h * inv_2h;
                } else if bi & plus_bit != 0 {
                    acc += inv_h * inv_h;
                }
            }
            // Row j+s places a coefficient on j.
            if aj & plus_bit != 0 {
                let bi = mask.nbr[j + stride];
                if bi & minus_bit != 0 && bi & plus_bit != 0 {
                    acc += inv_2h * inv_2h;
                } else if bi & minus_bit != 0 {
                    acc += inv_h * inv_h;
                }
            }
        }
        diag[j] = acc;
    }
    diag
}

/// Workspace for repeated projections against one support.
pub struct Projector {
    pub ops: SupportOperators,
    cg: Cg,
    grad_buf: VectorLattice,
    apply_in: Vec<f64>,
    warm_neumann: Vec<f64>,
    warm_dirichlet: Vec<f64>,
    pub tol: f64,
    pub max_iters: usize,
}

impl Projector {
    pub fn new(support: &LevelSetSupport) -> Self {
        let ops = SupportOperators::build(support);
        let n = ops.grid.num_nodes();
        let max_iters = ops.default_max_iters();
        Self {
            cg: Cg::new(n),
            grad_buf: VectorLattice::zeros(&ops.grid),
            apply_in: vec![0.0; n],
            warm_neumann: vec![0.0; n],
            warm_dirichlet: vec![0.0; n],
            tol: TOL_ELLIPTIC,
            max_iters,
            ops,
        }
    }

    /// G phi with the face-closed mask (time rows on faces are zero).
    fn grad_closed(&mut self, phi: &[f64]) {
        let n = self.ops.grid.num_nodes();
        for a in 0..self.ops.grid.dims() {
            gradient_component_into(
                phi,
                &self.ops.proj_mask,
                a,
                &mut self.grad_buf.values[a * n..(a + 1) * n],
            );
        }
    }

    /// y = G^T G x over the face-closed mask.
    fn apply_normal_eq(&mut self, x: &[f64], y: &mut [f64]) {
        self.grad_closed(x);
        divergence_into(&self.grad_buf, &self.ops.proj_mask, y);
        for v in y.iter_mut() {
            *v = -*v;
        }
    }

    /// b = G^T v.
    fn rhs_from(&self, v: &VectorLattice, out: &mut [f64]) {
        divergence_into(v, &self.ops.proj_mask, out);
        for o in out.iter_mut() {
            *o = -*o;
        }
    }

    /// Helmholtz projection of `v`: returns the divergence-free part
    /// v_perp = v - G phi and the potential phi. In Neumann mode v_perp
    /// has zero flux through every boundary piece (weakly on the swept
    /// boundary, exactly on the faces); in Dirichlet mode phi is pinned to
    /// the given data on the lateral ring and v_perp carries flux there.
    pub fn project(&mut self, v: &VectorLattice, mode: LateralMode<'_>) -> Result<(VectorLattice, EllipticSolution)> {
        if v.grid != self.ops.grid {
            return Err(Error::Config("grid mismatch in projection".into()));
        }
        let n = self.ops.grid.num_nodes();
        let mut b = vec![0.0; n];
        self.rhs_from(v, &mut b);

        let mut active = self.ops.proj_mask.inside.clone();
        let mut lift: Option<Vec<f64>> = None;
        let deflate: Vec<Vec<usize>>;
        let mut x;
        match mode {
            LateralMode::Neumann => {
                deflate = self.ops.deflate.clone();
                x = std::mem::take(&mut self.warm_neumann);
            }
            LateralMode::Dirichlet(data) => {
                deflate = Vec::new();
                x = std::mem::take(&mut self.warm_dirichlet);
                let mut l = vec![0.0; n];
                for &i in &self.ops.lateral_ring {
                    l[i] = data.values[i];
                    active[i] = false;
                    x[i] = 0.0;
                }
                // b <- b - A lift, restricted to the free nodes.
                let mut a_l = vec![0.0; n];
                // borrow dance: apply uses &mut self
                let lift_in = l.clone();
                self.apply_in.copy_from_slice(&lift_in);
                let tmp = std::mem::take(&mut self.apply_in);
                let mut y = vec![0.0; n];
                self.apply_normal_eq(&tmp, &mut y);
                self.apply_in = tmp;
                a_l.copy_from_slice(&y);
                for i in 0..n {
                    if active[i] {
                        b[i] -= a_l[i];
                    }
                }
                lift = Some(l);
            }
        }

        let diag = self.ops.diag.clone();
        let tol = self.tol;
        let max_iters = self.max_iters;
        let mut cg = std::mem::replace(&mut self.cg, Cg::new(0));
        let (res, iters) = cg.solve(
            |xin, yout| self.apply_normal_eq(xin, yout),
            &b,
            &mut x,
            &active,
            Some(&diag),
            tol,
            max_iters,
            &deflate,
        );
        self.cg = cg;

        let mut phi_vals = x.clone();
        if let Some(l) = &lift {
            for &i in &self.ops.lateral_ring {
                phi_vals[i] = l[i];
            }
        }
        match mode {
            LateralMode::Neumann => self.warm_neumann = x,
            LateralMode::Dirichlet(_) => self.warm_dirichlet = x,
        }

        // v_perp = v - G phi; on the faces the time component of G phi is
        // the prescribed data v . e0 itself (face closure), so the face
        // flux of v_perp vanishes identically.
        self.grad_closed(&phi_vals);
        let mut v_perp = v.clone();
        for k in 0..v_perp.values.len() {
            v_perp.values[k] -= self.grad_buf.values[k];
        }
        for i in 0..n {
            if !self.ops.mask.inside[i] {
                for c in 0..self.ops.grid.dims() {
                    v_perp.values[c * n + i] = 0.0;
                }
            }
        }
        for &i in self.ops.face0_nodes.iter().chain(self.ops.face1_nodes.iter()) {
            v_perp.values[i] = 0.0;
        }

        let phi = ScalarLattice {
            grid: self.ops.grid.clone(),
            values: phi_vals,
        };
        if res > self.tol && iters >= self.max_iters {
            return Err(Error::SolverDiverged {
                residual: res,
                iterations: iters,
                tol: self.tol,
            });
        }
        Ok((
            v_perp,
            EllipticSolution {
                phi,
                residual_norm: res,
                iterations: iters,
                compatibility_defect: 0.0,
            },
        ))
    }

    /// Harmonic initialization: solve the Laplace equation with the
    /// prescribed flux data (zero on the swept boundary, -rho0 / +rho1 on
    /// the faces), take W = grad(Phi), stamp the exact face densities and
    /// project once so the discrete solenoidal constraint holds to solver
    /// tolerance.
    pub fn harmonic_init(
        &mut self,
        support: &LevelSetSupport,
        flux: &FluxSpec,
    ) -> Result<(VectorLattice, EllipticSolution)> {
        flux.check_balance()?;
        let grid = self.ops.grid.clone();
        let n = grid.num_nodes();
        let m = grid.num_spatial_nodes();
        let nt = grid.shape()[0];

        // Outward-normal data: grad(Phi).N = -rho0 on the t=0 face and
        // +rho1 on the t=1 face. With N = -e0 at t=0 this prescribes
        // dPhi/dt = rho0 there, and likewise rho1 at t=1.
        let bc = BoundarySpec {
            face0: flux.rho0.iter().map(|&r| -r).collect(),
            face1: flux.rho1.clone(),
            lateral: LateralBc::Neumann(ScalarLattice::zeros(&grid)),
        };
        let src = ScalarLattice::zeros(&grid);
        let harmonic = solve_poisson(&src, support, &bc)?;

        let mut w = VectorLattice::zeros(&grid);
        for a in 0..grid.dims() {
            gradient_component_into(
                &harmonic.phi.values,
                &self.ops.mask,
                a,
                &mut w.values[a * n..(a + 1) * n],
            );
        }
        // Stamp the exact face densities. The finite-volume solution is
        // discretely conservative, so the central-difference density of
        // grad(Phi) already carries the same mass through every slice; no
        // further correction is applied.
        for &i in &self.ops.face0_nodes {
            w.values[i] = flux.rho0[i];
        }
        for &i in &self.ops.face1_nodes {
            w.values[i] = flux.rho1[i - (nt - 1) * m];
        }
        for i in 0..n {
            if !self.ops.mask.inside[i] {
                for c in 0..grid.dims() {
                    w.values[c * n + i] = 0.0;
                }
            }
        }
        let w_init = w;
        let res = harmonic.residual_norm;
        let iters = harmonic.iterations;
        Ok((
            w_init,
            EllipticSolution {
                phi: harmonic.phi,
                residual_norm: harmonic.residual_norm.max(res),
                iterations: harmonic.iterations + iters,
                compatibility_defect: harmonic.compatibility_defect,
            },
        ))
    }

    #[cfg(test)]
    pub(crate) fn dbg_apply(&mut self, x: &[f64], y: &mut [f64]) {
        self.apply_normal_eq(x, y);
    }

    /// Divergence of a vector field in the projection's own adjoint sense.
    pub fn divergence_closed(&self, v: &VectorLattice) -> ScalarLattice {
        let mut out = ScalarLattice::zeros(&self.ops.grid);
        divergence_into(v, &self.ops.proj_mask, &mut out.values);
        out
    }
}

/// One-shot Helmholtz projection (operation-level entry; the optimizer
/// reuses a [`Projector`] across iterations instead).
pub fn helmholtz_project(
    v: &VectorLattice,
    support: &LevelSetSupport,
    mode: LateralMode<'_>,
) -> Result<(VectorLattice, EllipticSolution)> {
    let mut p = Projector::new(support);
    p.project(v, mode)
}

/// Vertex-centered finite-volume Poisson solve: laplacian(phi) = source on
/// the embedded domain, with the boundary realized by ghost closure
/// (interface located by linear interpolation of psi along grid lines).
/// All-Neumann problems are projected onto the compatible subspace and
/// gauge-fixed to zero mean; the removed defect is reported.
pub fn solve_poisson(
    source: &ScalarLattice,
    support: &LevelSetSupport,
    bc: &BoundarySpec,
) -> Result<EllipticSolution> {
    let grid = support.grid().clone();
    bc.check(&grid)?;
    if source.grid != grid {
        return Err(Error::Config("source grid mismatch".into()));
    }
    let d = grid.dims();
    let n = grid.num_nodes();
    let m = grid.num_spatial_nodes();
    let nt = grid.shape()[0];
    let strides = grid.strides();
    let shape = grid.shape().to_vec();
    let spacing = grid.spacing().to_vec();
    let dv = grid.cell_volume();
    let psi = &support.psi.values;
    let inside: Vec<bool> = psi.iter().map(|&v| v < 0.0).collect();
    let theta_min = 1e-2;

    // Per-node, per-direction edge coefficients (2d directions) plus the
    // diagonal; the operator applied is the negative FV laplacian times
    // the cell volume, which is SPD on the inside nodes.
    let mut diag = vec![0.0; n];
    let mut coef = vec![0.0; n * 2 * d];
    let mut rhs = vec![0.0; n];
    let dirichlet = matches!(bc.lateral, LateralBc::Dirichlet(_));
    let lat = match &bc.lateral {
        LateralBc::Neumann(l) | LateralBc::Dirichlet(l) => l,
    };

    let mut coords = vec![0usize; d];
    for j in 0..n {
        if !inside[j] {
            advance(&mut coords, &shape);
            continue;
        }
        // Half cells where the node sits on the grid edge.
        let mut wcell = 1.0;
        for a in 0..d {
            if coords[a] == 0 || coords[a] + 1 == shape[a] {
                wcell *= 0.5;
            }
        }
        let vol = dv * wcell;
        rhs[j] = -vol * source.values[j];

        for a in 0..d {
            let h = spacing[a];
            // Transverse weight of the face (shared by both endpoints).
            let mut wface = 1.0;
            for b in 0..d {
                if b != a && (coords[b] == 0 || coords[b] + 1 == shape[b]) {
                    wface *= 0.5;
                }
            }
            let area = dv / h * wface;
            for (dir, exists) in [(0usize, coords[a] > 0), (1usize, coords[a] + 1 < shape[a])] {
                let slot = j * 2 * d + 2 * a + dir;
                if !exists {
                    // Grid edge: boundary face with Neumann data. Only the
                    // temporal faces carry data; the support never reaches
                    // the lateral grid edge.
                    if a == 0 {
                        let q = if dir == 0 { bc.face0[j % m] } else { bc.face1[j - (nt - 1) * m] };
                        rhs[j] += q * area;
                    }
                    continue;
                }
                let nb = if dir == 0 { j - strides[a] } else { j + strides[a] };
                if inside[nb] {
                    // Wet fraction of the face from the midpoint level-set
                    // value: smooths the staircase a dropped-edge boundary
                    // would otherwise imprint on the solution near the cut.
                    let psi_mid = 0.5 * (psi[j] + psi[nb]);
                    let gmid = {
                        let gj = support.psi_gradient(j);
                        let mut s = 0.0;
                        for (b, gv) in gj.iter().enumerate() {
                            if b != a {
                                s += gv * gv;
                            }
                        }
                        s.sqrt()
                    };
                    let href = spacing
                        .iter()
                        .enumerate()
                        .filter(|&(b, _)| b != a)
                        .map(|(_, &hh)| hh)
                        .fold(0.0f64, f64::max)
                        .max(1e-300);
                    let aperture = if gmid > 1e-9 {
                        (0.5 - psi_mid / (gmid * href)).clamp(0.05, 1.0)
                    } else {
                        1.0
                    };
                    let t = aperture * area / h;
                    diag[j] += t;
                    coef[slot] = -t;
                } else {
                    // Level-set crossing on this edge.
                    let theta = (psi[j] / (psi[j] - psi[nb])).clamp(theta_min, 1.0);
                    match &bc.lateral {
                        LateralBc::Dirichlet(_) => {
                            let t = area / (theta * h);
                            let dval = (1.0 - theta) * lat.values[j] + theta * lat.values[nb];
                            diag[j] += t;
                            rhs[j] += t * dval;
                        }
                        LateralBc::Neumann(_) => {
                            // Outward flux through the cut face, projected
                            // on this axis by the boundary normal.
                            let qval = (1.0 - theta) * lat.values[j] + theta * lat.values[nb];
                            if qval != 0.0 {
                                let g = support.psi_gradient(j);
                                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                                let na = g[a] / gn;
                                rhs[j] += qval * na.abs() * area;
                            }
                        }
                    }
                }
            }
        }
        advance(&mut coords, &shape);
    }

    // Compatibility for the all-Neumann case.
    let mut defect = 0.0;
    if !dirichlet {
        let rhs_sum: f64 = rhs.iter().sum();
        let vol_sum: f64 = {
            let mut s = 0.0;
            let mut c = vec![0usize; d];
            for j in 0..n {
                if inside[j] {
                    let mut w = 1.0;
                    for a in 0..d {
                        if c[a] == 0 || c[a] + 1 == shape[a] {
                            w *= 0.5;
                        }
                    }
                    s += dv * w;
                }
                advance(&mut c, &shape);
            }
            s
        };
        let scale: f64 = rhs.iter().map(|v| v.abs()).sum::<f64>().max(1e-300);
        defect = rhs_sum.abs() / scale;
        if defect > 1e-2 {
            return Err(Error::Config(format!(
                "incompatible all-Neumann data: relative defect {defect:.3e}"
            )));
        }
        let mut c = vec![0usize; d];
        for j in 0..n {
            if inside[j] {
                let mut w = 1.0;
                for a in 0..d {
                    if c[a] == 0 || c[a] + 1 == shape[a] {
                        w *= 0.5;
                    }
                }
                rhs[j] -= rhs_sum * (dv * w) / vol_sum;
            }
            advance(&mut c, &shape);
        }
    }

    let apply = |x: &[f64], y: &mut [f64]| {
        for j in 0..n {
            if !inside[j] {
                y[j] = 0.0;
                continue;
            }
            let mut acc = diag[j] * x[j];
            for a in 0..d {
                for dir in 0..2 {
                    let c = coef[j * 2 * d + 2 * a + dir];
                    if c != 0.0 {
                        let nb = if dir == 0 { j - strides[a] } else { j + strides[a] };
                        acc += c * x[nb];
                    }
                }
            }
            y[j] = acc;
        }
    };

    let mut x = vec![0.0; n];
    let mut cg = Cg::new(n);
    let max_iters = 10 * (n as f64).sqrt().ceil() as usize;
    let groups: Vec<Vec<usize>> = if dirichlet {
        Vec::new()
    } else {
        vec![(0..n).filter(|&j| inside[j]).collect()]
    };
    let (res, iters) = cg.solve(
        apply,
        &rhs,
        &mut x,
        &inside,
        Some(&diag),
        TOL_ELLIPTIC,
        max_iters,
        &groups,
    );
    if res > TOL_ELLIPTIC && iters >= max_iters {
        return Err(Error::SolverDiverged {
            residual: res,
            iterations: iters,
            tol: TOL_ELLIPTIC,
        });
    }

    if !dirichlet {
        // Gauge: zero mean over the domain.
        let cnt = inside.iter().filter(|&&b| b).count().max(1);
        let mean: f64 = (0..n).filter(|&j| inside[j]).map(|j| x[j]).sum::<f64>() / cnt as f64;
        for j in 0..n {
            if inside[j] {
                x[j] -= mean;
            }
        }
    }

    Ok(EllipticSolution {
        phi: ScalarLattice {
            grid,
            values: x,
        },
        residual_norm: res,
        iterations: iters,
        compatibility_defect: defect,
    })
}

/// Discrete laplacian with ghost values synthesized from the boundary
/// data: interior nodes use plain second differences; where the stencil
/// exits the domain the missing value is extrapolated through the
/// interface (quadratic for Dirichlet data, first-order for Neumann).
pub fn laplacian(f: &ScalarLattice, support: &LevelSetSupport, bc: &BoundarySpec) -> Result<ScalarLattice> {
    let grid = support.grid().clone();
    bc.check(&grid)?;
    if f.grid != grid {
        return Err(Error::Config("lattice grid mismatch".into()));
    }
    let d = grid.dims();
    let n = grid.num_nodes();
    let m = grid.num_spatial_nodes();
    let nt = grid.shape()[0];
    let strides = grid.strides();
    let shape = grid.shape().to_vec();
    let spacing = grid.spacing().to_vec();
    let psi = &support.psi.values;
    let inside: Vec<bool> = psi.iter().map(|&v| v < 0.0).collect();
    let lat = match &bc.lateral {
        LateralBc::Neumann(l) | LateralBc::Dirichlet(l) => l,
    };
    let mut out = ScalarLattice::zeros(&grid);

    let mut coords = vec![0usize; d];
    for j in 0..n {
        if !inside[j] {
            advance(&mut coords, &shape);
            continue;
        }
        let mut acc = 0.0;
        for a in 0..d {
            let h = spacing[a];
            let get_side = |dir: usize| -> Option<(usize, bool)> {
                // (node index, exists in grid)
                if dir == 0 {
                    if coords[a] > 0 {
                        Some((j - strides[a], true))
                    } else {
                        None
                    }
                } else if coords[a] + 1 < shape[a] {
                    Some((j + strides[a], true))
                } else {
                    None
                }
            };
            let ghost = |dir: usize| -> f64 {
                // Value at the missing stencil point, from the data.
                match get_side(dir) {
                    Some((nb, _)) if inside[nb] => f.values[nb],
                    maybe_nb => {
                        // Grid edge (temporal face) or level-set crossing.
                        if a == 0 && maybe_nb.is_none() {
                            // Temporal face Neumann data, central ghost.
                            let q = if dir == 0 { -bc.face0[j % m] } else { bc.face1[j - (nt - 1) * m] };
                            let other = if dir == 0 { j + strides[a] } else { j - strides[a] };
                            // (f[other] - ghost)/(2h) = dphi/dt matching q sign
                            // for outward normal -e0 / +e0.
                            return f.values[other] - 2.0 * h * q * if dir == 0 { 1.0 } else { -1.0 };
                        }
                        let nb = match maybe_nb {
                            Some((nb, _)) => nb,
                            None => return f.values[j],
                        };
                        let theta = (psi[j] / (psi[j] - psi[nb])).clamp(0.1, 1.0);
                        match &bc.lateral {
                            LateralBc::Dirichlet(_) => {
                                // Quadratic extrapolation through f[j-1], f[j]
                                // and the interface value when available. The
                                // crossing value itself must be interpolated
                                // quadratically along the edge or its error
                                // dominates the extrapolation.
                                let behind = get_side(1 - dir);
                                match behind {
                                    Some((bk, _)) if inside[bk] => {
                                        let dm = lat.values[bk];
                                        let d0 = lat.values[j];
                                        let dp = lat.values[nb];
                                        let dval = 0.5 * (theta * theta - theta) * dm
                                            + (1.0 - theta * theta) * d0
                                            + 0.5 * (theta * theta + theta) * dp;
                                        let fm = f.values[bk];
                                        let f0 = f.values[j];
                                        let l_m = (1.0 - theta) / (1.0 + theta);
                                        let l_0 = -2.0 * (1.0 - theta) / theta;
                                        let l_g = 2.0 / (theta * (1.0 + theta));
                                        fm * l_m + f0 * l_0 + dval * l_g
                                    }
                                    _ => {
                                        let dval =
                                            (1.0 - theta) * lat.values[j] + theta * lat.values[nb];
                                        f.values[j] + (dval - f.values[j]) / theta
                                    }
                                }
                            }
                            LateralBc::Neumann(_) => {
                                let qval = (1.0 - theta) * lat.values[j] + theta * lat.values[nb];
                                let g = support.psi_gradient(j);
                                let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                                let na = g[a] / gn;
                                let sign = if dir == 1 { 1.0 } else { -1.0 };
                                f.values[j] + sign * h * qval * na * sign
                            }
                        }
                    }
                }
            };
            let fm = ghost(0);
            let fp = ghost(1);
            acc += (fp - 2.0 * f.values[j] + fm) / (h * h);
        }
        out.values[j] = acc;
        advance(&mut coords, &shape);
    }
    Ok(out)
}
