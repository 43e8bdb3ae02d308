//! The three space-time vector fields and their conversions: the solenoidal
//! field W = (rho, p), the advection field U = (1, v) and the extended
//! velocity V = (-|v|^2/2, v), plus the kinetic-energy density T = W.V and
//! the action integral.

use crate::error::{Error, Result};
use crate::grid::{dot_scalar, InteriorMask, ScalarLattice, SpaceTimeGrid, VectorLattice};
use crate::support::LevelSetSupport;

/// Relative density floor: nodes whose density falls below
/// `RHO_FLOOR_REL * mean face density` violate positivity.
pub const RHO_FLOOR_REL: f64 = 1e-8;

/// Space-time vector field whose temporal component is the mass density and
/// whose spatial components are the momentum. The optimization variable.
#[derive(Debug, Clone)]
pub struct SolenoidalField {
    pub w: VectorLattice,
    /// Absolute density floor used in positivity checks and divisions.
    pub rho_floor: f64,
}

impl SolenoidalField {
    pub fn new(w: VectorLattice, rho_floor: f64) -> Self {
        Self { w, rho_floor }
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.w.grid
    }

    pub fn rho(&self) -> &[f64] {
        self.w.component(0)
    }

    /// Verify strict positivity of the density over the mask.
    pub fn check_positivity(&self, mask: &InteriorMask) -> Result<()> {
        let rho = self.rho();
        for i in 0..rho.len() {
            if mask.is_inside(i) && rho[i] <= self.rho_floor {
                return Err(Error::Positivity {
                    node: i,
                    rho: rho[i],
                    floor: self.rho_floor,
                });
            }
        }
        Ok(())
    }
}

/// Prescribed flux data on the two temporal faces; the lateral flux of a
/// solenoidal field is identically zero.
#[derive(Debug, Clone)]
pub struct FluxSpec {
    /// Spatial density samples on the t=0 face (zero off the face).
    pub rho0: Vec<f64>,
    /// Spatial density samples on the t=1 face.
    pub rho1: Vec<f64>,
    pub grid: SpaceTimeGrid,
}

pub const TOL_MASS: f64 = 1e-8;

impl FluxSpec {
    pub fn new(grid: &SpaceTimeGrid, rho0: Vec<f64>, rho1: Vec<f64>) -> Result<Self> {
        let m = grid.num_spatial_nodes();
        if rho0.len() != m || rho1.len() != m {
            return Err(Error::Config("face density sample count mismatch".into()));
        }
        let s = Self {
            rho0,
            rho1,
            grid: grid.clone(),
        };
        s.check_balance()?;
        Ok(s)
    }

    pub fn mass0(&self) -> f64 {
        self.rho0.iter().sum::<f64>() * self.grid.spatial_cell_volume()
    }

    pub fn mass1(&self) -> f64 {
        self.rho1.iter().sum::<f64>() * self.grid.spatial_cell_volume()
    }

    /// Masses must balance (relative tolerance); unbalanced transport is a
    /// configuration error.
    pub fn check_balance(&self) -> Result<()> {
        let m0 = self.mass0();
        let m1 = self.mass1();
        let scale = m0.abs().max(m1.abs()).max(1e-300);
        if (m0 - m1).abs() / scale > TOL_MASS {
            return Err(Error::Config(format!(
                "face masses are unbalanced: {m0:.12e} vs {m1:.12e}"
            )));
        }
        if m0 <= 0.0 {
            return Err(Error::Config("face mass must be positive".into()));
        }
        Ok(())
    }

    /// Mean face density, the scale for the density positivity floor.
    pub fn mean_face_density(&self) -> f64 {
        let c0 = self.rho0.iter().filter(|&&v| v > 0.0).count();
        let c1 = self.rho1.iter().filter(|&&v| v > 0.0).count();
        let s0: f64 = self.rho0.iter().sum();
        let s1: f64 = self.rho1.iter().sum();
        (s0 + s1) / ((c0 + c1).max(1) as f64)
    }

    pub fn rho_floor(&self) -> f64 {
        RHO_FLOOR_REL * self.mean_face_density()
    }
}

/// V = (-|v|^2/2, v) with v = p/rho; equals
/// W/(W.e0) - ((W.W)/(W.e0)^2 + 1) e0 / 2.
pub fn extended_velocity(w: &SolenoidalField, mask: &InteriorMask) -> Result<VectorLattice> {
    mask.check_grid(w.grid())?;
    let grid = w.grid();
    let d = grid.dims();
    let n = grid.num_nodes();
    let mut out = VectorLattice::zeros(grid);
    let rho = w.rho();
    for i in 0..n {
        if !mask.is_inside(i) {
            continue;
        }
        if rho[i] <= w.rho_floor {
            return Err(Error::Positivity {
                node: i,
                rho: rho[i],
                floor: w.rho_floor,
            });
        }
        let mut v2 = 0.0;
        for c in 1..d {
            let v = w.w.values[c * n + i] / rho[i];
            out.values[c * n + i] = v;
            v2 += v * v;
        }
        out.values[i] = -0.5 * v2;
    }
    Ok(out)
}

/// U = W / rho; the temporal component is identically 1 inside the domain.
pub fn advection_field(w: &SolenoidalField, mask: &InteriorMask) -> Result<VectorLattice> {
    mask.check_grid(w.grid())?;
    let grid = w.grid();
    let d = grid.dims();
    let n = grid.num_nodes();
    let mut out = VectorLattice::zeros(grid);
    let rho = w.rho();
    for i in 0..n {
        if !mask.is_inside(i) {
            continue;
        }
        if rho[i] <= w.rho_floor {
            return Err(Error::Positivity {
                node: i,
                rho: rho[i],
                floor: w.rho_floor,
            });
        }
        out.values[i] = 1.0;
        for c in 1..d {
            out.values[c * n + i] = w.w.values[c * n + i] / rho[i];
        }
    }
    Ok(out)
}

/// Kinetic-energy density T = W.V = rho |v|^2 / 2.
pub fn kinetic_energy_density(w: &SolenoidalField, mask: &InteriorMask) -> Result<ScalarLattice> {
    mask.check_grid(w.grid())?;
    let grid = w.grid();
    let d = grid.dims();
    let n = grid.num_nodes();
    let mut out = ScalarLattice::zeros(grid);
    let rho = w.rho();
    for i in 0..n {
        if !mask.is_inside(i) {
            continue;
        }
        if rho[i] <= w.rho_floor {
            return Err(Error::Positivity {
                node: i,
                rho: rho[i],
                floor: w.rho_floor,
            });
        }
        let mut p2 = 0.0;
        for c in 1..d {
            let p = w.w.values[c * n + i];
            p2 += p * p;
        }
        out.values[i] = 0.5 * p2 / rho[i];
    }
    Ok(out)
}

/// Action integral: masked volume quadrature of the kinetic-energy density
/// over the support. Equals W2^2 / 2 at the optimum.
pub fn action(w: &SolenoidalField, support: &LevelSetSupport) -> Result<f64> {
    let mask = support.interior_mask();
    action_masked(w, &mask)
}

/// Action against a prebuilt mask (the optimizer caches the mask).
pub fn action_masked(w: &SolenoidalField, mask: &InteriorMask) -> Result<f64> {
    let t = kinetic_energy_density(w, mask)?;
    let one = vec![1.0; t.values.len()];
    Ok(dot_scalar(&t.values, &one, mask))
}

/// Per-slice mass with edge-coverage weights: boundary nodes count by the
/// fraction of their cell inside the support, estimated from psi and its
/// spatial gradient. This removes the one-node rasterization wobble that a
/// binary mask produces under a moving boundary.
pub fn slice_masses(w: &SolenoidalField, support: &LevelSetSupport) -> Vec<f64> {
    let grid = w.grid();
    let m = grid.num_spatial_nodes();
    let nt = grid.shape()[0];
    let da = grid.spatial_cell_volume();
    let rho = w.rho();
    let h = grid.spacing()[1..].iter().cloned().fold(0.0, f64::max);
    let mut out = Vec::with_capacity(nt);
    for k in 0..nt {
        let mut acc = 0.0;
        for xs in 0..m {
            let i = k * m + xs;
            let psi = support.psi.values[i];
            if psi >= 0.5 * h {
                continue;
            }
            let g = support.psi_gradient(i);
            let gx = g[1..].iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let coverage = (0.5 - psi / (gx * h)).clamp(0.0, 1.0);
            if coverage > 0.0 && psi < 0.0 {
                acc += coverage * rho[i] * da;
            } else if coverage > 0.0 {
                // Slightly outside: weight the nearest inside density.
                acc += coverage * nearest_inside_rho(w, support, i).unwrap_or(0.0) * da;
            }
        }
        out.push(acc);
    }
    out
}

fn nearest_inside_rho(w: &SolenoidalField, support: &LevelSetSupport, i: usize) -> Option<f64> {
    let grid = w.grid();
    let strides = grid.strides();
    let coords = grid.coords_of(i);
    let shape = grid.shape();
    for a in (1..grid.dims()).rev() {
        if coords[a] > 0 && support.psi.values[i - strides[a]] < 0.0 {
            return Some(w.rho()[i - strides[a]]);
        }
        if coords[a] + 1 < shape[a] && support.psi.values[i + strides[a]] < 0.0 {
            return Some(w.rho()[i + strides[a]]);
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::InteriorMask;

    fn grid1d() -> SpaceTimeGrid {
        SpaceTimeGrid::line(9, 9, 0.0, 1.0).unwrap()
    }

    fn field_1d(rho: f64, p: f64) -> (SolenoidalField, InteriorMask) {
        let g = grid1d();
        let w = VectorLattice::from_fn(&g, |_| vec![rho, p]);
        (SolenoidalField::new(w, 1e-12), InteriorMask::full(&g))
    }

    #[test]
    fn extended_velocity_trivial_cases() {
        // w = (1, 0): V = (0, 0)
        let (w, mask) = field_1d(1.0, 0.0);
        let v = extended_velocity(&w, &mask).unwrap();
        assert!(v.values.iter().all(|x| x.abs() < 1e-15));
        // w = (2, 2): v = 1, V = (-1/2, 1)
        let (w, mask) = field_1d(2.0, 2.0);
        let v = extended_velocity(&w, &mask).unwrap();
        let n = w.grid().num_nodes();
        for i in 0..n {
            assert!((v.values[i] + 0.5).abs() < 1e-15);
            assert!((v.values[n + i] - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn extended_velocity_matches_coordinate_free_formula() {
        // V = W/(W.e0) - ((W.W)/(W.e0)^2 + 1) e0/2 on a random smooth field.
        let g = grid1d();
        let w = VectorLattice::from_fn(&g, |p| vec![1.5 + 0.3 * (p[1] * 5.0).sin(), 0.7 * p[0] - 0.2]);
        let f = SolenoidalField::new(w.clone(), 1e-12);
        let mask = InteriorMask::full(&g);
        let v = extended_velocity(&f, &mask).unwrap();
        let n = g.num_nodes();
        for i in 0..n {
            let w0 = w.values[i];
            let w1 = w.values[n + i];
            let ww = w0 * w0 + w1 * w1;
            let v0 = w0 / w0 - 0.5 * (ww / (w0 * w0) + 1.0);
            let v1 = w1 / w0;
            assert!((v.values[i] - v0).abs() < 1e-13);
            assert!((v.values[n + i] - v1).abs() < 1e-13);
        }
    }

    #[test]
    fn variation_of_v_is_orthogonal_to_w() {
        // Finite-difference dV along a random dW satisfies W . dV = 0 with
        // residual O(eps^2).
        let g = grid1d();
        let n = g.num_nodes();
        let mask = InteriorMask::full(&g);
        let w = VectorLattice::from_fn(&g, |p| vec![2.0 + (3.0 * p[0]).cos() * 0.5, 0.4 * p[1]]);
        let dw = VectorLattice::from_fn(&g, |p| vec![0.3 * (7.0 * p[1]).sin(), -0.8 + p[0]]);
        let eps = 1e-4;
        let mut wp = w.clone();
        let mut wm = w.clone();
        for k in 0..wp.values.len() {
            wp.values[k] += eps * dw.values[k];
            wm.values[k] -= eps * dw.values[k];
        }
        let vp = extended_velocity(&SolenoidalField::new(wp, 1e-12), &mask).unwrap();
        let vm = extended_velocity(&SolenoidalField::new(wm, 1e-12), &mask).unwrap();
        let mut max_resid = 0.0f64;
        for i in 0..n {
            let mut acc = 0.0;
            for c in 0..2 {
                let dv = (vp.values[c * n + i] - vm.values[c * n + i]) / (2.0 * eps);
                acc += w.values[c * n + i] * dv;
            }
            max_resid = max_resid.max(acc.abs());
        }
        assert!(max_resid < 1e-6, "W . dV = {max_resid}");
    }

    #[test]
    fn advection_field_cases() {
        let (w, mask) = field_1d(2.5, 0.0);
        let u = advection_field(&w, &mask).unwrap();
        let n = w.grid().num_nodes();
        for i in 0..n {
            assert_eq!(u.values[i], 1.0);
            assert_eq!(u.values[n + i], 0.0);
        }
        let (w, mask) = field_1d(1.0, 3.0);
        let u = advection_field(&w, &mask).unwrap();
        for i in 0..n {
            assert_eq!(u.values[i], 1.0);
            assert!((u.values[n + i] - 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn kinetic_energy_agreement() {
        // rho = 2, v = 3: T = 9; and the two formulas T = W.V and
        // T = rho |v|^2 / 2 agree to 1e-12 relative on random fields.
        let (w, mask) = field_1d(2.0, 6.0);
        let t = kinetic_energy_density(&w, &mask).unwrap();
        assert!(t.values.iter().all(|x| (x - 9.0).abs() < 1e-12));

        let g = grid1d();
        let n = g.num_nodes();
        let wf = VectorLattice::from_fn(&g, |p| vec![1.0 + 0.6 * p[0] + 0.2 * p[1], (4.0 * p[1]).sin()]);
        let f = SolenoidalField::new(wf.clone(), 1e-12);
        let t = kinetic_energy_density(&f, &mask).unwrap();
        let v = extended_velocity(&f, &mask).unwrap();
        for i in 0..n {
            let wv = wf.values[i] * v.values[i] + wf.values[n + i] * v.values[n + i];
            let rel = (t.values[i] - wv).abs() / t.values[i].abs().max(1e-300);
            assert!(rel < 1e-12, "node {i}: {} vs {}", t.values[i], wv);
        }
    }

    #[test]
    fn round_trip_rho_u_recovers_w() {
        let g = grid1d();
        let n = g.num_nodes();
        let wf = VectorLattice::from_fn(&g, |p| vec![2.0 + p[1], 0.3 - 0.9 * p[0]]);
        let f = SolenoidalField::new(wf.clone(), 1e-12);
        let mask = InteriorMask::full(&g);
        let u = advection_field(&f, &mask).unwrap();
        for i in 0..n {
            for c in 0..2 {
                let back = wf.values[i] * u.values[c * n + i];
                let rel = (back - wf.values[c * n + i]).abs() / wf.values[c * n + i].abs().max(1e-300);
                assert!(rel < 1e-12);
            }
        }
    }

    #[test]
    fn positivity_error_carries_node() {
        let g = grid1d();
        let mut w = VectorLattice::from_fn(&g, |_| vec![1.0, 0.5]);
        w.values[7] = -0.25;
        let f = SolenoidalField::new(w, 1e-12);
        let mask = InteriorMask::full(&g);
        match extended_velocity(&f, &mask) {
            Err(Error::Positivity { node, rho, .. }) => {
                assert_eq!(node, 7);
                assert_eq!(rho, -0.25);
            }
            other => panic!("expected positivity error, got {other:?}"),
        }
    }

    #[test]
    fn unbalanced_flux_is_config_error() {
        let g = grid1d();
        let m = g.num_spatial_nodes();
        let rho0 = vec![1.0; m];
        let rho1 = vec![2.0; m];
        assert!(matches!(
            FluxSpec::new(&g, rho0, rho1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn action_of_static_field_is_zero() {
        let g = grid1d();
        let psi = ScalarLattice::from_fn(&g, |p| (p[1] - 0.5).abs() - 0.3);
        let support = LevelSetSupport::from_psi(psi, 6.0).unwrap();
        let w = VectorLattice::from_fn(&g, |_| vec![1.0, 0.0]);
        let f = SolenoidalField::new(w, 1e-12);
        assert_eq!(action(&f, &support).unwrap(), 0.0);
    }

    #[test]
    fn action_of_analytic_translation_flow() {
        // Uniform density on [0,1] translated by d: the flow x -> x + t d
        // has action d^2/2.
        let d = 0.25;
        let g = SpaceTimeGrid::line(65, 257, -0.5, 2.0).unwrap();
        let psi = ScalarLattice::from_fn(&g, |p| (p[1] - 0.5 - d * p[0]).abs() - 0.5);
        let support = LevelSetSupport::from_psi(psi, 6.0).unwrap();
        let w = VectorLattice::from_fn(&g, |_| vec![1.0, d]);
        let f = SolenoidalField::new(w, 1e-12);
        let a = action(&f, &support).unwrap();
        let exact = 0.5 * d * d;
        assert!((a - exact).abs() / exact < 0.02, "action {a} vs {exact}");
    }

    #[test]
    fn action_of_analytic_dilation_flow() {
        // Uniform [0,1] -> uniform [0,2] under x -> (1+t) x: action 1/6.
        let g = SpaceTimeGrid::line(65, 257, -0.5, 2.5).unwrap();
        let psi = ScalarLattice::from_fn(&g, |p| {
            let half = 0.5 * (1.0 + p[0]);
            (p[1] - half).abs() - half
        });
        let support = LevelSetSupport::from_psi(psi, 6.0).unwrap();
        let w = VectorLattice::from_fn(&g, |p| {
            let s = 1.0 + p[0];
            vec![1.0 / s, p[1] / (s * s)]
        });
        let f = SolenoidalField::new(w, 1e-12);
        let a = action(&f, &support).unwrap();
        let exact = 1.0 / 6.0;
        assert!((a - exact).abs() / exact < 0.03, "action {a} vs {exact}");
    }
}
