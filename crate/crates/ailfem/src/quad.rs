//! Numerical integration on triangles.
//!
//! All non-polynomial integrands in the crate (loads, energies, error norms)
//! are integrated with the symmetric 7-point rule of polynomial degree 5.
//! Piecewise-constant integrands are handled in closed form by the callers.

pub type Point = [f64; 2];

/// Barycentric points and weights of the degree-5 symmetric rule.
/// Weights sum to one; multiply by the element area.
#[allow(clippy::excessive_precision)]
pub const TRI7: [(f64, [f64; 3]); 7] = {
    // group weights (155 +- sqrt(15))/1200, centroid weight 9/40
    const W0: f64 = 0.225;
    const A1: f64 = 0.059_715_871_789_769_82; // 1 - 2*B1
    const B1: f64 = 0.470_142_064_105_115_1; // (6 + sqrt(15))/21
    const W1: f64 = 0.132_394_152_788_506_18; // (155 + sqrt(15))/1200
    const A2: f64 = 0.797_426_985_353_087_3; // 1 - 2*B2
    const B2: f64 = 0.101_286_507_323_456_34; // (6 - sqrt(15))/21
    const W2: f64 = 0.125_939_180_544_827_15; // (155 - sqrt(15))/1200
    [
        (W0, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
        (W1, [A1, B1, B1]),
        (W1, [B1, A1, B1]),
        (W1, [B1, B1, A1]),
        (W2, [A2, B2, B2]),
        (W2, [B2, A2, B2]),
        (W2, [B2, B2, A2]),
    ]
};

/// Signed area of the triangle `(a, b, c)`.
pub fn signed_area(a: Point, b: Point, c: Point) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

/// Integrate `f` over the triangle `(a, b, c)` with the degree-5 rule.
pub fn integrate(a: Point, b: Point, c: Point, f: &mut impl FnMut(Point) -> f64) -> f64 {
    let area = signed_area(a, b, c).abs();
    let mut sum = 0.0;
    for (w, bary) in TRI7 {
        let p = [
            bary[0] * a[0] + bary[1] * b[0] + bary[2] * c[0],
            bary[0] * a[1] + bary[1] * b[1] + bary[2] * c[1],
        ];
        sum += w * f(p);
    }
    area * sum
}

/// Composite rule: subdivide the triangle `levels` times into four similar
/// children (edge midpoints) and apply the base rule on every cell.
pub fn integrate_subdivided(
    a: Point,
    b: Point,
    c: Point,
    levels: u32,
    f: &mut impl FnMut(Point) -> f64,
) -> f64 {
    if levels == 0 {
        return integrate(a, b, c, f);
    }
    let mab = mid(a, b);
    let mbc = mid(b, c);
    let mca = mid(c, a);
    let l = levels - 1;
    integrate_subdivided(a, mab, mca, l, f)
        + integrate_subdivided(mab, b, mbc, l, f)
        + integrate_subdivided(mca, mbc, c, l, f)
        + integrate_subdivided(mab, mbc, mca, l, f)
}

/// Integrate `f` over a triangle that may be close to an isolated singular
/// point. Cells far from `singular` (relative to their own diameter) use the
/// plain rule; cells nearby are subdivided recursively, so the quadrature
/// error concentrates in a vanishing neighbourhood of the singularity.
pub fn integrate_graded(
    a: Point,
    b: Point,
    c: Point,
    singular: Point,
    f: &mut impl FnMut(Point) -> f64,
) -> f64 {
    graded_rec(a, b, c, singular, 0, f)
}

fn graded_rec(
    a: Point,
    b: Point,
    c: Point,
    s: Point,
    depth: u32,
    f: &mut impl FnMut(Point) -> f64,
) -> f64 {
    let diam = dist(a, b).max(dist(b, c)).max(dist(c, a));
    let d = dist_to_triangle(a, b, c, s);
    if d >= 2.0 * diam || depth >= 48 {
        return integrate(a, b, c, f);
    }
    let mab = mid(a, b);
    let mbc = mid(b, c);
    let mca = mid(c, a);
    graded_rec(a, mab, mca, s, depth + 1, f)
        + graded_rec(mab, b, mbc, s, depth + 1, f)
        + graded_rec(mca, mbc, c, s, depth + 1, f)
        + graded_rec(mab, mbc, mca, s, depth + 1, f)
}

fn mid(a: Point, b: Point) -> Point {
    [0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn dist_to_segment(a: Point, b: Point, p: Point) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let ap = [p[0] - a[0], p[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    if len2 == 0.0 {
        return dist(a, p);
    }
    let t = ((ap[0] * ab[0] + ap[1] * ab[1]) / len2).clamp(0.0, 1.0);
    dist([a[0] + t * ab[0], a[1] + t * ab[1]], p)
}

fn dist_to_triangle(a: Point, b: Point, c: Point, p: Point) -> f64 {
    // Inside (any orientation) counts as distance zero.
    let s1 = signed_area(a, b, p);
    let s2 = signed_area(b, c, p);
    let s3 = signed_area(c, a, p);
    if (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0) {
        return 0.0;
    }
    dist_to_segment(a, b, p)
        .min(dist_to_segment(b, c, p))
        .min(dist_to_segment(c, a, p))
}

/// Deterministic pairwise (tree) summation. Independent of thread count and
/// more accurate than a running sum on long inputs.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        2 => values[0] + values[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
        }
    }
}
