//! P1 conforming finite element machinery with zero trace.
//!
//! The discrete energy is built from the same load quadrature as the
//! residual and the linearized systems, so the exact potential relation
//! `dE_h(u)[v] = <F_h(u), v>` holds in floating point up to rounding. The
//! per-iteration energy decay bounds of the linearization schemes are
//! therefore observable at machine precision and are asserted in tests.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mesh::Mesh;
use crate::model::NonlinearModel;
use crate::quad::{self, Point, TRI7};
use crate::sparse::{SparseMatrix, Vector};

/// Interior vertices receive degrees of freedom in ascending vertex order;
/// boundary vertices carry the implicit value zero.
#[derive(Clone, Debug)]
pub struct DofMap {
    vertex_to_dof: Vec<Option<usize>>,
    dof_to_vertex: Vec<usize>,
}

impl DofMap {
    pub fn build(mesh: &Mesh) -> Self {
        let mut vertex_to_dof = vec![None; mesh.n_vertices()];
        let mut dof_to_vertex = Vec::new();
        for (v, slot) in vertex_to_dof.iter_mut().enumerate() {
            if !mesh.is_boundary_vertex(v) {
                *slot = Some(dof_to_vertex.len());
                dof_to_vertex.push(v);
            }
        }
        DofMap {
            vertex_to_dof,
            dof_to_vertex,
        }
    }

    pub fn n_dofs(&self) -> usize {
        self.dof_to_vertex.len()
    }

    pub fn dof_of_vertex(&self, v: usize) -> Option<usize> {
        self.vertex_to_dof[v]
    }

    pub fn vertex_of_dof(&self, d: usize) -> usize {
        self.dof_to_vertex[d]
    }
}

/// A P1 function with zero boundary trace: one coefficient per interior
/// vertex of its mesh.
#[derive(Clone, Debug)]
pub struct FeFunction {
    mesh: Arc<Mesh>,
    dofs: Arc<DofMap>,
    coeffs: Vector,
}

impl FeFunction {
    pub fn zero(mesh: &Arc<Mesh>) -> Self {
        let dofs = Arc::new(DofMap::build(mesh));
        let coeffs = vec![0.0; dofs.n_dofs()];
        FeFunction {
            mesh: Arc::clone(mesh),
            dofs,
            coeffs,
        }
    }

    pub fn from_coeffs(mesh: &Arc<Mesh>, dofs: &Arc<DofMap>, coeffs: Vector) -> Result<Self> {
        if coeffs.len() != dofs.n_dofs() {
            return Err(Error::input(format!(
                "coefficient vector has length {} but the dof map has {} dofs",
                coeffs.len(),
                dofs.n_dofs()
            )));
        }
        Ok(FeFunction {
            mesh: Arc::clone(mesh),
            dofs: Arc::clone(dofs),
            coeffs,
        })
    }

    /// Nodal interpolant: interior vertices take `f`, boundary vertices stay
    /// zero (the function lives in the zero-trace space).
    pub fn interpolate(mesh: &Arc<Mesh>, f: impl Fn(Point) -> f64) -> Self {
        let mut u = FeFunction::zero(mesh);
        for d in 0..u.dofs.n_dofs() {
            let v = u.dofs.vertex_of_dof(d);
            u.coeffs[d] = f(mesh.vertex(v));
        }
        u
    }

    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn dof_map(&self) -> &Arc<DofMap> {
        &self.dofs
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn n_dofs(&self) -> usize {
        self.coeffs.len()
    }

    /// Values at all mesh vertices (zero on the boundary).
    pub fn vertex_values(&self) -> Vector {
        let mut values = vec![0.0; self.mesh.n_vertices()];
        for (d, &v) in self.dofs.dof_to_vertex.iter().enumerate() {
            values[v] = self.coeffs[d];
        }
        values
    }

    /// Nodal values on one element.
    pub fn element_values(&self, e: usize) -> [f64; 3] {
        self.mesh
            .element(e)
            .map(|v| self.dofs.dof_of_vertex(v).map_or(0.0, |d| self.coeffs[d]))
    }

    /// Evaluate at a point by scanning for the containing element.
    /// Intended for tests and diagnostics, not inner loops.
    pub fn eval_at(&self, p: Point) -> Option<f64> {
        for e in 0..self.mesh.n_elements() {
            let [a, b, c] = self.mesh.element_points(e);
            let area = quad::signed_area(a, b, c);
            let l0 = quad::signed_area(p, b, c) / area;
            let l1 = quad::signed_area(a, p, c) / area;
            let l2 = quad::signed_area(a, b, p) / area;
            let eps = -1e-12;
            if l0 >= eps && l1 >= eps && l2 >= eps {
                let vals = self.element_values(e);
                return Some(l0 * vals[0] + l1 * vals[1] + l2 * vals[2]);
            }
        }
        None
    }

    /// Coefficient-wise difference; both functions must live on one mesh.
    pub fn sub(&self, other: &FeFunction) -> Result<FeFunction> {
        require_same_mesh(self, other)?;
        let coeffs = self
            .coeffs
            .iter()
            .zip(&other.coeffs)
            .map(|(a, b)| a - b)
            .collect();
        Ok(FeFunction {
            mesh: Arc::clone(&self.mesh),
            dofs: Arc::clone(&self.dofs),
            coeffs,
        })
    }
}

fn require_same_mesh(a: &FeFunction, b: &FeFunction) -> Result<()> {
    if a.mesh.fingerprint() != b.mesh.fingerprint() {
        return Err(Error::input("functions live on different meshes"));
    }
    Ok(())
}

/// Linearization scheme selector for the fixed-point step
/// `a(u^n; u^{n+1}, v) = <f(u^n), v>`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SchemeSpec {
    /// Riesz-map preconditioned gradient step with step size `step`
    /// (requires `0 < step < 2 / (3 M_mu)`).
    Zarantonello { step: f64 },
    /// Frozen-coefficient fixed point: re-solve with weight `mu(|grad u^n|^2)`.
    Kacanov,
    /// Damped tangent (Newton) step. `correction` enables the halving
    /// control that enforces energy decrease per step.
    Newton { damping: f64, correction: bool },
}

impl SchemeSpec {
    pub fn zarantonello(step: f64) -> Self {
        SchemeSpec::Zarantonello { step }
    }

    pub fn newton() -> Self {
        SchemeSpec::Newton {
            damping: 1.0,
            correction: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchemeSpec::Zarantonello { .. } => "zarantonello",
            SchemeSpec::Kacanov => "kacanov",
            SchemeSpec::Newton { .. } => "newton",
        }
    }

    pub fn validate(&self, model: &NonlinearModel) -> Result<()> {
        match *self {
            SchemeSpec::Zarantonello { step } => {
                let limit = 2.0 / (3.0 * model.big_m_mu);
                if !(step > 0.0 && step < limit) {
                    return Err(Error::input(format!(
                        "zarantonello step {step} outside (0, {limit})"
                    )));
                }
            }
            SchemeSpec::Kacanov => {}
            SchemeSpec::Newton { damping, .. } => {
                if !(damping > 0.0 && damping <= 1.0) {
                    return Err(Error::input(format!(
                        "newton damping {damping} outside (0, 1]"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Area and the constant gradients of the three barycentric basis functions.
fn element_basis(mesh: &Mesh, e: usize) -> (f64, [[f64; 2]; 3]) {
    let [a, b, c] = mesh.element_points(e);
    let area2 = (b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]);
    let grads = [
        [(b[1] - c[1]) / area2, (c[0] - b[0]) / area2],
        [(c[1] - a[1]) / area2, (a[0] - c[0]) / area2],
        [(a[1] - b[1]) / area2, (b[0] - a[0]) / area2],
    ];
    (0.5 * area2, grads)
}

/// Piecewise-constant gradient of a P1 function, one 2-vector per element.
pub fn gradient_field(u: &FeFunction) -> Vec<[f64; 2]> {
    let mesh = u.mesh();
    (0..mesh.n_elements())
        .map(|e| {
            let (_, grads) = element_basis(mesh, e);
            let vals = u.element_values(e);
            let mut g = [0.0, 0.0];
            for i in 0..3 {
                g[0] += vals[i] * grads[i][0];
                g[1] += vals[i] * grads[i][1];
            }
            g
        })
        .collect()
}

/// Load vector `(g, phi_i)` for all interior basis functions, by degree-5
/// quadrature per element.
pub fn assemble_load(mesh: &Mesh, dofs: &DofMap, load: impl Fn(Point) -> f64) -> Vector {
    let mut b = vec![0.0; dofs.n_dofs()];
    for e in 0..mesh.n_elements() {
        let [pa, pb, pc] = mesh.element_points(e);
        let area = mesh.area(e);
        let tri = mesh.element(e);
        for (w, bary) in TRI7 {
            let p = [
                bary[0] * pa[0] + bary[1] * pb[0] + bary[2] * pc[0],
                bary[0] * pa[1] + bary[1] * pb[1] + bary[2] * pc[1],
            ];
            let gv = load(p);
            for local in 0..3 {
                if let Some(d) = dofs.dof_of_vertex(tri[local]) {
                    b[d] += w * area * gv * bary[local];
                }
            }
        }
    }
    b
}

/// Nonlinear residual `F_h(u)_i = int mu(|grad u|^2) grad u . grad phi_i - (g, phi_i)`.
/// The flux term is exact (piecewise-constant integrand); the load vector
/// must come from [`assemble_load`] on the same mesh.
pub fn residual(u: &FeFunction, model: &NonlinearModel, load_vec: &[f64]) -> Vector {
    let mesh = u.mesh();
    let dofs = u.dof_map();
    let mut r: Vector = load_vec.iter().map(|v| -v).collect();
    for e in 0..mesh.n_elements() {
        let (area, grads) = element_basis(mesh, e);
        let vals = u.element_values(e);
        let mut g = [0.0, 0.0];
        for i in 0..3 {
            g[0] += vals[i] * grads[i][0];
            g[1] += vals[i] * grads[i][1];
        }
        let w = (model.mu)(g[0] * g[0] + g[1] * g[1]);
        let tri = mesh.element(e);
        for local in 0..3 {
            if let Some(d) = dofs.dof_of_vertex(tri[local]) {
                r[d] += area * w * (g[0] * grads[local][0] + g[1] * grads[local][1]);
            }
        }
    }
    r
}

/// Discrete energy `E_h(u) = sum_T |T| psi(|grad u|_T^2) - (g, u)_h`, with
/// the load pairing factored through the same quadrature as `assemble_load`.
pub fn energy(u: &FeFunction, model: &NonlinearModel, load_vec: &[f64]) -> f64 {
    let mesh = u.mesh();
    let grads = gradient_field(u);
    let psi_terms: Vec<f64> = (0..mesh.n_elements())
        .map(|e| {
            let g = grads[e];
            mesh.area(e) * (model.psi)(g[0] * g[0] + g[1] * g[1])
        })
        .collect();
    let pairing: Vec<f64> = load_vec
        .iter()
        .zip(u.coeffs())
        .map(|(b, c)| b * c)
        .collect();
    quad::pairwise_sum(&psi_terms) - quad::pairwise_sum(&pairing)
}

/// `||u||_X = ||grad u||_{L^2}`, exact for P1.
pub fn x_norm(u: &FeFunction) -> f64 {
    let mesh = u.mesh();
    let grads = gradient_field(u);
    let terms: Vec<f64> = (0..mesh.n_elements())
        .map(|e| {
            let g = grads[e];
            mesh.area(e) * (g[0] * g[0] + g[1] * g[1])
        })
        .collect();
    quad::pairwise_sum(&terms).max(0.0).sqrt()
}

/// `||u - v||_X` for two functions on the same mesh.
pub fn x_norm_diff(u: &FeFunction, v: &FeFunction) -> Result<f64> {
    Ok(x_norm(&u.sub(v)?))
}

/// Assemble the SPD system of one linearization step at `u_n`.
///
/// * Zarantonello: `A = K` (unit-weight stiffness), `b = K u_n - step * F_h(u_n)`.
/// * Kacanov: `A = K_w` with elementwise weight `mu(|grad u_n|^2)`, `b` = load.
/// * Newton: `A = F_h'(u_n)`, `b = A u_n - damping * F_h(u_n)`; callers that
///   adapt the damping pass the current value via the scheme.
pub fn assemble_linearized(
    scheme: &SchemeSpec,
    u_n: &FeFunction,
    model: &NonlinearModel,
    load_vec: &[f64],
) -> Result<(SparseMatrix, Vector)> {
    scheme.validate(model)?;
    let mesh = u_n.mesh();
    let dofs = u_n.dof_map();
    let n = dofs.n_dofs();
    if load_vec.len() != n {
        return Err(Error::input(
            "load vector length does not match the dof map",
        ));
    }

    let mut triplets: Vec<(usize, usize, f64)> = Vec::with_capacity(9 * mesh.n_elements());
    let mut add_sym = |d: [Option<usize>; 3], k: &[[f64; 3]; 3]| {
        for i in 0..3 {
            let Some(di) = d[i] else { continue };
            triplets.push((di, di, k[i][i]));
            for j in (i + 1)..3 {
                let Some(dj) = d[j] else { continue };
                triplets.push((di, dj, k[i][j]));
                triplets.push((dj, di, k[i][j]));
            }
        }
    };

    for e in 0..mesh.n_elements() {
        let (area, grads) = element_basis(mesh, e);
        let d = mesh.element(e).map(|v| dofs.dof_of_vertex(v));
        let mut k = [[0.0f64; 3]; 3];
        match *scheme {
            SchemeSpec::Zarantonello { .. } => {
                for i in 0..3 {
                    for j in i..3 {
                        k[i][j] = area * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                    }
                }
            }
            SchemeSpec::Kacanov | SchemeSpec::Newton { .. } => {
                let vals = u_n.element_values(e);
                let mut g = [0.0, 0.0];
                for i in 0..3 {
                    g[0] += vals[i] * grads[i][0];
                    g[1] += vals[i] * grads[i][1];
                }
                let q = g[0] * g[0] + g[1] * g[1];
                let w = (model.mu)(q);
                for i in 0..3 {
                    for j in i..3 {
                        k[i][j] =
                            area * w * (grads[i][0] * grads[j][0] + grads[i][1] * grads[j][1]);
                    }
                }
                if let SchemeSpec::Newton { .. } = scheme {
                    let wp = 2.0 * (model.mu_prime)(q);
                    let dir: [f64; 3] = [0, 1, 2].map(|i| g[0] * grads[i][0] + g[1] * grads[i][1]);
                    for i in 0..3 {
                        for j in i..3 {
                            k[i][j] += area * wp * dir[i] * dir[j];
                        }
                    }
                }
            }
        }
        add_sym(d, &k);
    }
    let a = SparseMatrix::from_triplets(n, &triplets)?;

    let b = match *scheme {
        SchemeSpec::Kacanov => load_vec.to_vec(),
        SchemeSpec::Zarantonello { step } => {
            let ku = a.mul_vec(u_n.coeffs())?;
            let res = residual(u_n, model, load_vec);
            ku.iter().zip(&res).map(|(k, r)| k - step * r).collect()
        }
        SchemeSpec::Newton { damping, .. } => {
            let au = a.mul_vec(u_n.coeffs())?;
            let res = residual(u_n, model, load_vec);
            au.iter().zip(&res).map(|(a, r)| a - damping * r).collect()
        }
    };
    Ok((a, b))
}

/// H1-seminorm distance between a P1 function and an exact gradient field,
/// by elementwise degree-5 quadrature. Quadrature points are interior, so an
/// exact gradient that is singular at a mesh vertex is never evaluated there.
pub fn h1_seminorm_error(u: &FeFunction, exact_gradient: impl Fn(Point) -> [f64; 2]) -> f64 {
    let mesh = u.mesh();
    let grads = gradient_field(u);
    let terms: Vec<f64> = (0..mesh.n_elements())
        .map(|e| {
            let [pa, pb, pc] = mesh.element_points(e);
            let area = mesh.area(e);
            let gh = grads[e];
            let mut acc = 0.0;
            for (w, bary) in TRI7 {
                let p = [
                    bary[0] * pa[0] + bary[1] * pb[0] + bary[2] * pc[0],
                    bary[0] * pa[1] + bary[1] * pb[1] + bary[2] * pc[1],
                ];
                let ge = exact_gradient(p);
                let dx = ge[0] - gh[0];
                let dy = ge[1] - gh[1];
                acc += w * (dx * dx + dy * dy);
            }
            area * acc
        })
        .collect();
    quad::pairwise_sum(&terms).max(0.0).sqrt()
}

/// Represent a coarse-mesh function on a one-step refinement of its mesh.
/// New vertices take the midpoint value of their parent edge; the function
/// is unchanged as an element of the space.
pub fn prolongate(u: &FeFunction, fine: &Arc<Mesh>) -> Result<FeFunction> {
    let gen = fine
        .genealogy()
        .ok_or_else(|| Error::input("target mesh has no refinement genealogy"))?;
    if gen.parent_fingerprint() != u.mesh().fingerprint() {
        return Err(Error::input(
            "target mesh was not refined from the function's mesh",
        ));
    }
    let mut values = u.vertex_values();
    values.reserve(gen.new_vertex_parents().len());
    for &(a, b) in gen.new_vertex_parents() {
        values.push(0.5 * (values[a] + values[b]));
    }
    let dofs = Arc::new(DofMap::build(fine));
    let coeffs = dofs.dof_to_vertex.iter().map(|&v| values[v]).collect();
    Ok(FeFunction {
        mesh: Arc::clone(fine),
        dofs,
        coeffs,
    })
}
