//! The h-weighted residual error estimator.
//!
//! Per element `T` the squared indicator is
//!
//! `eta_T^2 = h_T^2 ||g||_T^2 + h_T ||jump of mu(|grad v|^2) grad v . n||_{dT \ Gamma}^2`
//!
//! with `h_T = |T|^(1/2)`. The flux of a P1 function is constant per
//! element, so every interior edge carries a single scalar jump. Each
//! interior edge contributes to the indicators of *both* adjacent elements,
//! weighted by the respective element's `h_T`.

use crate::error::{Error, Result};
use crate::fem::{gradient_field, FeFunction};
use crate::mesh::MarkSet;
use crate::model::NonlinearModel;
use crate::quad::{self, Point, TRI7};

/// Squared local indicators, aligned with the elements of one mesh.
#[derive(Clone, Debug)]
pub struct IndicatorField {
    mesh_fingerprint: u64,
    eta_sq: Vec<f64>,
}

impl IndicatorField {
    pub fn eta_sq(&self) -> &[f64] {
        &self.eta_sq
    }

    pub fn len(&self) -> usize {
        self.eta_sq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta_sq.is_empty()
    }

    pub fn mesh_fingerprint(&self) -> u64 {
        self.mesh_fingerprint
    }
}

/// Compute all local indicators for the iterate `u` and load `g`.
pub fn local_indicators(
    u: &FeFunction,
    model: &NonlinearModel,
    load: impl Fn(Point) -> f64,
) -> IndicatorField {
    let mesh = u.mesh();
    let grads = gradient_field(u);
    let fluxes: Vec<[f64; 2]> = grads
        .iter()
        .map(|g| {
            let w = (model.mu)(g[0] * g[0] + g[1] * g[1]);
            [w * g[0], w * g[1]]
        })
        .collect();

    let eta_sq = (0..mesh.n_elements())
        .map(|e| {
            let area = mesh.area(e);
            let h = area.sqrt();
            let [pa, pb, pc] = mesh.element_points(e);
            let mut g_sq = 0.0;
            for (w, bary) in TRI7 {
                let p = [
                    bary[0] * pa[0] + bary[1] * pb[0] + bary[2] * pc[0],
                    bary[0] * pa[1] + bary[1] * pb[1] + bary[2] * pc[1],
                ];
                let gv = load(p);
                g_sq += w * gv * gv;
            }
            let volume_term = area * (area * g_sq); // h_T^2 * ||g||_T^2

            let tri = mesh.element(e);
            let mut edge_term = 0.0;
            for local in 0..3u8 {
                if mesh.boundary_flags(e)[local as usize] {
                    continue;
                }
                let Some((n, _)) = mesh.neighbor(e, local) else {
                    continue;
                };
                let a = mesh.vertex(tri[(local as usize + 1) % 3]);
                let b = mesh.vertex(tri[(local as usize + 2) % 3]);
                let len = (b[0] - a[0]).hypot(b[1] - a[1]);
                let normal = [(a[1] - b[1]) / len, (b[0] - a[0]) / len];
                let jump = (fluxes[e][0] - fluxes[n][0]) * normal[0]
                    + (fluxes[e][1] - fluxes[n][1]) * normal[1];
                edge_term += len * jump * jump;
            }
            volume_term + h * edge_term
        })
        .collect();
    IndicatorField {
        mesh_fingerprint: mesh.fingerprint(),
        eta_sq,
    }
}

/// `eta = (sum_T eta_T^2)^(1/2)`.
pub fn total(field: &IndicatorField) -> f64 {
    quad::pairwise_sum(&field.eta_sq).max(0.0).sqrt()
}

/// `eta(U) = (sum_{T in U} eta_T^2)^(1/2)` for a subset of elements.
pub fn subset_total(field: &IndicatorField, subset: &MarkSet) -> Result<f64> {
    if let Some(bad) = subset.iter().find(|&e| e >= field.len()) {
        return Err(Error::input(format!(
            "subset element {bad} out of range for {} indicators",
            field.len()
        )));
    }
    let terms: Vec<f64> = subset.iter().map(|e| field.eta_sq[e]).collect();
    Ok(quad::pairwise_sum(&terms).max(0.0).sqrt())
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::fem::{prolongate, x_norm_diff, DofMap, FeFunction};
    use crate::mesh::Mesh;
    use std::sync::Arc;

    #[test]
    fn linear_function_with_zero_load_has_zero_interior_indicators() {
        let mesh = Arc::new(Mesh::initial_lshape().uniform_refine());
        let model = NonlinearModel::exponential();
        let u = FeFunction::interpolate(&mesh, |p| p[0]);
        let field = local_indicators(&u, &model, |_| 0.0);
        let mut seen = 0;
        for e in 0..mesh.n_elements() {
            let all_interior = mesh.element(e).iter().all(|&v| !mesh.is_boundary_vertex(v));
            let neighbors_interior = (0..3u8).all(|l| {
                mesh.neighbor(e, l).is_some_and(|(n, _)| {
                    mesh.element(n).iter().all(|&v| !mesh.is_boundary_vertex(v))
                })
            });
            if all_interior && neighbors_interior {
                assert_eq!(field.eta_sq()[e], 0.0, "element {e}");
                seen += 1;
            }
        }
        assert!(seen > 10);
    }

    #[test]
    fn single_element_volume_term() {
        let mesh = Arc::new(
            Mesh::from_triangles(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], vec![[0, 1, 2]])
                .unwrap(),
        );
        let model = NonlinearModel::exponential();
        let u = FeFunction::zero(&mesh);
        let field = local_indicators(&u, &model, |_| 1.0);
        // h_T^2 ||g||_T^2 = area * area = 1/4; no interior edges.
        assert!((field.eta_sq()[0] - 0.25).abs() <= 1e-15);
    }

    #[test]
    fn criss_cross_hat_matches_hand_computation() {
        // Unit square refined once: four elements around the center vertex.
        // The hat function at the center has elementwise |grad|^2 = 4; each
        // interior spoke carries the same jump magnitude by symmetry.
        let mesh = Arc::new(Mesh::unit_square().uniform_refine());
        let dofs = DofMap::build(&mesh);
        assert_eq!(dofs.n_dofs(), 1);
        let model = NonlinearModel::exponential();
        let u = FeFunction::interpolate(&mesh, |_| 1.0); // center vertex -> 1
        let c = 3.0;
        let field = local_indicators(&u, &model, |_| c);

        let mu4 = (model.mu)(4.0);
        // volume: h^2 ||g||^2 = (1/4) * (c^2/4); edges: two spokes, each
        // h * |e| * jump^2 = (1/2) * (sqrt(1/2)) * 8 mu(4)^2.
        let expected = c * c / 16.0 + 2.0 * 0.5 * 0.5f64.sqrt() * 8.0 * mu4 * mu4;
        for e in 0..4 {
            assert!(
                (field.eta_sq()[e] - expected).abs() <= 1e-13 * expected,
                "element {e}: {} vs {expected}",
                field.eta_sq()[e]
            );
        }
    }

    #[test]
    fn totals_and_subsets() {
        let field = IndicatorField {
            mesh_fingerprint: 0,
            eta_sq: vec![9.0, 16.0],
        };
        assert_eq!(total(&field), 5.0);
        assert_eq!(subset_total(&field, &MarkSet::new()).unwrap(), 0.0);
        assert_eq!(
            subset_total(&field, &MarkSet::all(2)).unwrap(),
            total(&field)
        );
        assert_eq!(
            subset_total(&field, &[1usize].into_iter().collect()).unwrap(),
            4.0
        );
        assert!(subset_total(&field, &[5usize].into_iter().collect()).is_err());

        let zero = IndicatorField {
            mesh_fingerprint: 0,
            eta_sq: vec![0.0; 4],
        };
        assert_eq!(total(&zero), 0.0);
    }

    #[test]
    fn subset_totals_are_monotone() {
        let field = IndicatorField {
            mesh_fingerprint: 0,
            eta_sq: (0..20).map(|k| (k as f64 * 0.37).sin().abs()).collect(),
        };
        let small: MarkSet = (0..7).collect();
        let big: MarkSet = (0..15).collect();
        assert!(subset_total(&field, &small).unwrap() <= subset_total(&field, &big).unwrap());
        assert!(subset_total(&field, &big).unwrap() <= total(&field));
    }

    /// Stability on non-refined elements: prolongation leaves the indicators
    /// of elements with untouched neighborhoods bit-identical.
    #[test]
    fn indicators_on_untouched_neighborhoods_are_bit_stable() {
        let mesh = Arc::new(Mesh::initial_lshape());
        let model = NonlinearModel::exponential();
        let sol = crate::model::ManufacturedSolution::lshape_default();
        let u = FeFunction::interpolate(&mesh, sol.value);
        let field = local_indicators(&u, &model, sol.load);

        let marks: MarkSet = (0..30).collect();
        let fine = Arc::new(mesh.refine(&marks).unwrap());
        let uf = prolongate(&u, &fine).unwrap();
        let field_fine = local_indicators(&uf, &model, sol.load);

        let gen = fine.genealogy().unwrap();
        let refined: std::collections::HashSet<usize> =
            gen.refined_parents().iter().copied().collect();
        let mut checked = 0;
        for p in 0..mesh.n_elements() {
            if refined.contains(&p) {
                continue;
            }
            let neighbors_untouched = (0..3u8).all(|l| match mesh.neighbor(p, l) {
                Some((n, _)) => !refined.contains(&n),
                None => true,
            });
            if !neighbors_untouched {
                continue;
            }
            // Untouched elements keep their index (children replace parents
            // in place, extras are appended).
            assert_eq!(
                field.eta_sq()[p].to_bits(),
                field_fine.eta_sq()[p].to_bits(),
                "element {p}"
            );
            checked += 1;
        }
        assert!(checked > 50);
    }

    /// Empirical stability constant: |eta(U, v) - eta_ref(U, w)| stays
    /// proportional to ||v - w||_X over common elements.
    #[test]
    fn empirical_stability_constant_is_finite() {
        let mesh = Arc::new(Mesh::initial_lshape());
        let model = NonlinearModel::exponential();
        let sol = crate::model::ManufacturedSolution::lshape_default();
        let u = FeFunction::interpolate(&mesh, sol.value);
        let marks: MarkSet = (40..80).collect();
        let fine = Arc::new(mesh.refine(&marks).unwrap());
        let uf = prolongate(&u, &fine).unwrap();
        let gen = fine.genealogy().unwrap();
        let refined: std::collections::HashSet<usize> =
            gen.refined_parents().iter().copied().collect();
        let common: MarkSet = (0..mesh.n_elements())
            .filter(|p| !refined.contains(p))
            .collect();

        let field_coarse = local_indicators(&u, &model, sol.load);
        let eta_coarse = subset_total(&field_coarse, &common).unwrap();

        let mut state = 0x3f84d5b5b5470917u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let scale = 10f64.powf(-3.0 + 3.0 * (trial as f64 / 99.0));
            let coeffs: Vec<f64> = uf.coeffs().iter().map(|c| c + scale * next()).collect();
            let w = FeFunction::from_coeffs(&fine, uf.dof_map(), coeffs).unwrap();
            let dist = x_norm_diff(&w, &uf).unwrap();
            if dist == 0.0 {
                continue;
            }
            let field_w = local_indicators(&w, &model, sol.load);
            let eta_w = subset_total(&field_w, &common).unwrap();
            let ratio = (eta_w - eta_coarse).abs() / dist;
            assert!(ratio.is_finite());
            worst = worst.max(ratio);
        }
        // Log the observed maximum; it must be a finite, stable constant.
        eprintln!("empirical C_stb over 100 trials: {worst:.6}");
        assert!(worst > 0.0 && worst < 1e3);
    }

    /// Reduction on refined elements for the prolongated function: new
    /// interior edges carry no jump, volume terms halve, old edge terms
    /// scale by 2^(-1/2); altogether a factor q_red = 2^(-1/4).
    #[test]
    fn reduction_factor_holds_on_refined_sets() {
        let mesh = Arc::new(Mesh::initial_lshape());
        let model = NonlinearModel::exponential();
        let sol = crate::model::ManufacturedSolution::lshape_default();
        let u = FeFunction::interpolate(&mesh, sol.value);
        let field = local_indicators(&u, &model, sol.load);

        for take in [10usize, 50, 120] {
            let marks: MarkSet = (0..take).collect();
            let fine = Arc::new(mesh.refine(&marks).unwrap());
            let uf = prolongate(&u, &fine).unwrap();
            let field_fine = local_indicators(&uf, &model, sol.load);
            let gen = fine.genealogy().unwrap();

            let refined_parents: MarkSet = gen.refined_parents().iter().copied().collect();
            let children: MarkSet = (0..fine.n_elements())
                .filter(|&e| fine.generation(e) > mesh.generation(gen.parent_element(e)))
                .collect();

            let eta_children = subset_total(&field_fine, &children).unwrap();
            let eta_parents = subset_total(&field, &refined_parents).unwrap();
            let q_red = 2f64.powf(-0.25);
            assert!(
                eta_children <= q_red * eta_parents * (1.0 + 1e-12),
                "take {take}: {eta_children} vs {} * {eta_parents}",
                q_red
            );
        }
    }
}
