//! Dörfler marking with minimal cardinality.

use crate::error::{Error, Result};
use crate::estimator::IndicatorField;
use crate::mesh::MarkSet;

/// Smallest element set `M` with `theta^2 * sum_T eta_T^2 <= sum_{T in M} eta_T^2`,
/// built by sorting the indicators descending and taking the shortest
/// sufficient prefix. Ties break towards the smaller element index, so the
/// result is deterministic.
pub fn doerfler(field: &IndicatorField, theta: f64) -> Result<MarkSet> {
    if !(theta > 0.0 && theta <= 1.0) {
        return Err(Error::input(format!("theta {theta} outside (0, 1]")));
    }
    let mut order: Vec<usize> = (0..field.len()).collect();
    order.sort_by(|&a, &b| {
        field.eta_sq()[b]
            .partial_cmp(&field.eta_sq()[a])
            .expect("indicators are finite")
            .then(a.cmp(&b))
    });
    // Accumulate the target in the same (descending) order as the prefix so
    // that theta = 1 selects exactly the non-zero indicators.
    let total_sq: f64 = order.iter().map(|&e| field.eta_sq()[e]).sum();
    let target = theta * theta * total_sq;
    let mut acc = 0.0;
    let mut marks = MarkSet::new();
    for &e in &order {
        if acc >= target {
            break;
        }
        acc += field.eta_sq()[e];
        marks.insert(e);
    }
    Ok(marks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{local_indicators, subset_total, total};
    use crate::fem::FeFunction;
    use crate::mesh::Mesh;
    use crate::model::{ManufacturedSolution, NonlinearModel};
    use proptest::prelude::*;
    use std::sync::Arc;

    fn synthetic(eta_sq: Vec<f64>) -> IndicatorField {
        crate::estimator::testing::synthetic_field(eta_sq)
    }

    #[test]
    fn prefix_rule_hand_example() {
        let field = synthetic(vec![4.0, 1.0, 1.0, 1.0, 1.0]);
        let marks = doerfler(&field, 0.5).unwrap();
        assert_eq!(marks.len(), 1);
        assert!(marks.contains(0));
    }

    #[test]
    fn theta_one_marks_all_nonzero() {
        let field = synthetic(vec![0.5, 0.0, 0.25, 0.0, 1.0]);
        let marks = doerfler(&field, 1.0).unwrap();
        let expected: Vec<usize> = vec![0, 2, 4];
        assert_eq!(marks.iter().collect::<Vec<_>>(), expected);
    }

    #[test]
    fn zero_field_marks_nothing() {
        let field = synthetic(vec![0.0; 6]);
        assert!(doerfler(&field, 0.7).unwrap().is_empty());
    }

    #[test]
    fn theta_out_of_range_is_an_input_error() {
        let field = synthetic(vec![1.0]);
        assert!(doerfler(&field, 0.0).is_err());
        assert!(doerfler(&field, 1.5).is_err());
        assert!(doerfler(&field, -0.1).is_err());
    }

    #[test]
    fn determinism_with_ties() {
        let field = synthetic(vec![1.0, 1.0, 1.0, 1.0]);
        let a = doerfler(&field, 0.5).unwrap();
        let b = doerfler(&field, 0.5).unwrap();
        assert_eq!(a, b);
        // Ties break towards the smallest index.
        assert_eq!(a.iter().collect::<Vec<_>>(), vec![0]);
    }

    #[test]
    fn criterion_and_minimality_on_a_real_estimator_field() {
        let mesh = Arc::new(Mesh::initial_lshape());
        let model = NonlinearModel::exponential();
        let sol = ManufacturedSolution::lshape_default();
        let u = FeFunction::interpolate(&mesh, sol.value);
        let field = local_indicators(&u, &model, sol.load);
        for theta in [0.2, 0.5, 0.8, 1.0] {
            let marks = doerfler(&field, theta).unwrap();
            let sub = subset_total(&field, &marks).unwrap();
            let tot = total(&field);
            assert!(
                theta * theta * tot * tot <= sub * sub * (1.0 + 1e-12),
                "criterion failed for theta {theta}"
            );
            // Minimality: dropping the smallest marked indicator breaks it.
            if !marks.is_empty() {
                let weakest = marks
                    .iter()
                    .min_by(|&a, &b| {
                        field.eta_sq()[a]
                            .partial_cmp(&field.eta_sq()[b])
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                let reduced: MarkSet = marks.iter().filter(|&e| e != weakest).collect();
                let sub_red = subset_total(&field, &reduced).unwrap();
                assert!(
                    sub_red * sub_red < theta * theta * tot * tot,
                    "set not minimal for theta {theta}"
                );
            }
        }
    }

    proptest! {
        #[test]
        fn doerfler_criterion_holds_for_random_fields(
            values in proptest::collection::vec(0.0f64..100.0, 1..60),
            theta in 0.01f64..1.0,
        ) {
            let field = synthetic(values);
            let marks = doerfler(&field, theta).unwrap();
            let sub = subset_total(&field, &marks).unwrap();
            let tot = total(&field);
            prop_assert!(theta * theta * tot * tot <= sub * sub + 1e-9);
            // Removing the weakest marked element violates the criterion.
            if !marks.is_empty() {
                let weakest = marks
                    .iter()
                    .min_by(|&a, &b| {
                        field.eta_sq()[a]
                            .partial_cmp(&field.eta_sq()[b])
                            .unwrap()
                            .then(b.cmp(&a))
                    })
                    .unwrap();
                let reduced: MarkSet = marks.iter().filter(|&e| e != weakest).collect();
                let sub_red = subset_total(&field, &reduced).unwrap();
                prop_assert!(sub_red * sub_red < theta * theta * tot * tot + 1e-9);
            }
        }
    }
}
