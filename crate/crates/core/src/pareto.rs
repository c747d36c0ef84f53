//! Two-objective Pareto machinery under the maximization convention:
//! dominance, non-dominated filtering, exact hypervolume by a sweep, and
//! hypervolume improvement.

/// `a` dominates `b`: no worse in every objective and strictly better in one.
pub fn dominates(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] >= b[0] && a[1] >= b[1] && (a[0] > b[0] || a[1] > b[1])
}

/// Indices of the non-dominated points, ascending. Exact duplicates of a
/// front point are all kept.
pub fn pareto_front(points: &[[f64; 2]]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| {
        points[j][0]
            .total_cmp(&points[i][0])
            .then(points[j][1].total_cmp(&points[i][1]))
    });
    let mut front = Vec::new();
    let mut best_f2 = f64::NEG_INFINITY;
    let mut k = 0;
    while k < order.len() {
        // group of equal first objective; its leaders share the group max f2
        let f1 = points[order[k]][0];
        let group_max = points[order[k]][1];
        let mut end = k;
        while end < order.len() && points[order[end]][0] == f1 {
            if points[order[end]][1] == group_max && group_max > best_f2 {
                front.push(order[end]);
            }
            end += 1;
        }
        best_f2 = best_f2.max(group_max);
        k = end;
    }
    front.sort_unstable();
    front
}

/// Area dominated by `front` and bounded below by `reference`. Points not
/// strictly above the reference in both objectives contribute nothing.
pub fn hypervolume(front: &[[f64; 2]], reference: [f64; 2]) -> f64 {
    let mut pts: Vec<[f64; 2]> = front
        .iter()
        .copied()
        .filter(|p| p[0] > reference[0] && p[1] > reference[1])
        .collect();
    pts.sort_by(|a, b| b[0].total_cmp(&a[0]).then(b[1].total_cmp(&a[1])));
    let mut area = 0.0;
    let mut ceiling = reference[1];
    for p in pts {
        if p[1] > ceiling {
            area += (p[0] - reference[0]) * (p[1] - ceiling);
            ceiling = p[1];
        }
    }
    area
}

/// HV(front ∪ {candidate}) − HV(front); exactly zero when the candidate is
/// weakly dominated by a front member or not above the reference point.
pub fn hvi(front: &[[f64; 2]], reference: [f64; 2], candidate: [f64; 2]) -> f64 {
    if candidate[0] <= reference[0] || candidate[1] <= reference[1] {
        return 0.0;
    }
    if front.iter().any(|p| p[0] >= candidate[0] && p[1] >= candidate[1]) {
        return 0.0;
    }
    let mut extended = front.to_vec();
    extended.push(candidate);
    (hypervolume(&extended, reference) - hypervolume(front, reference)).max(0.0)
}

/// Component-wise minimum minus 10% of the observed range. A degenerate
/// range falls back to 10% of the magnitude (or 0.1 at zero).
pub fn reference_from(points: &[[f64; 2]]) -> Option<[f64; 2]> {
    if points.is_empty() {
        return None;
    }
    let mut r = [0.0; 2];
    for (k, slot) in r.iter_mut().enumerate() {
        let lo = points.iter().map(|p| p[k]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
        let span = if hi > lo {
            hi - lo
        } else if lo != 0.0 {
            lo.abs()
        } else {
            1.0
        };
        *slot = lo - 0.1 * span;
    }
    Some(r)
}

/// Every evaluated point, the current non-dominated set, the reference
/// point and the hypervolume it implies.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoArchive {
    xs: Vec<Vec<f64>>,
    ys: Vec<[f64; 2]>,
    front: Vec<usize>,
    reference: Option<[f64; 2]>,
    fixed_reference: bool,
    hypervolume: f64,
}

impl Default for ParetoArchive {
    fn default() -> Self {
        Self::new()
    }
}

impl ParetoArchive {
    /// Archive whose reference point follows the observations.
    pub fn new() -> Self {
        Self {
            xs: Vec::new(),
            ys: Vec::new(),
            front: Vec::new(),
            reference: None,
            fixed_reference: false,
            hypervolume: 0.0,
        }
    }

    /// Archive with a reference point that never moves.
    pub fn with_reference(reference: [f64; 2]) -> Self {
        Self {
            reference: Some(reference),
            fixed_reference: true,
            ..Self::new()
        }
    }

    /// Adds one observation. The adaptive reference point is recomputed
    /// (and HV rebuilt from scratch) only when the new value is not strictly
    /// above it in some objective.
    pub fn insert(&mut self, x: Vec<f64>, y: [f64; 2]) {
        self.xs.push(x);
        self.ys.push(y);
        let moved = match self.reference {
            Some(r) if self.fixed_reference || (y[0] > r[0] && y[1] > r[1]) => false,
            _ => {
                self.reference = reference_from(&self.ys);
                true
            }
        };
        let idx = self.ys.len() - 1;
        let r = self.reference.expect("reference set after insert");
        if moved {
            self.front = pareto_front(&self.ys);
            self.hypervolume = hypervolume(&self.front_values(), r);
            return;
        }
        let front_vals = self.front_values();
        if front_vals.iter().any(|p| dominates(*p, y)) {
            return;
        }
        let gain = hvi(&front_vals, r, y);
        self.front.retain(|&i| !dominates(y, self.ys[i]));
        self.front.push(idx);
        self.hypervolume = if gain > 0.0 {
            hypervolume(&self.front_values(), r)
        } else {
            self.hypervolume
        };
    }

    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn xs(&self) -> &[Vec<f64>] {
        &self.xs
    }

    pub fn values(&self) -> &[[f64; 2]] {
        &self.ys
    }

    /// Front indices in insertion order.
    pub fn front(&self) -> &[usize] {
        &self.front
    }

    pub fn front_values(&self) -> Vec<[f64; 2]> {
        self.front.iter().map(|&i| self.ys[i]).collect()
    }

    pub fn reference(&self) -> Option<[f64; 2]> {
        self.reference
    }

    pub fn hypervolume(&self) -> f64 {
        self.hypervolume
    }

    pub fn on_front(&self, index: usize) -> bool {
        self.front.contains(&index)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// O(n²) pairwise dominance filter.
    fn brute_front(points: &[[f64; 2]]) -> Vec<usize> {
        (0..points.len())
            .filter(|&i| !points.iter().any(|q| dominates(*q, points[i])))
            .collect()
    }

    /// Area by decomposition into the cells of the coordinate grid.
    fn cell_hypervolume(front: &[[f64; 2]], r: [f64; 2]) -> f64 {
        let mut xs: Vec<f64> = front.iter().map(|p| p[0]).filter(|v| *v > r[0]).collect();
        let mut ys: Vec<f64> = front.iter().map(|p| p[1]).filter(|v| *v > r[1]).collect();
        xs.push(r[0]);
        ys.push(r[1]);
        xs.sort_by(f64::total_cmp);
        ys.sort_by(f64::total_cmp);
        xs.dedup();
        ys.dedup();
        let mut area = 0.0;
        for i in 0..xs.len() - 1 {
            for j in 0..ys.len() - 1 {
                let corner = [xs[i + 1], ys[j + 1]];
                if front.iter().any(|p| p[0] >= corner[0] && p[1] >= corner[1]) {
                    area += (xs[i + 1] - xs[i]) * (ys[j + 1] - ys[j]);
                }
            }
        }
        area
    }

    #[test]
    fn dominance_cases() {
        assert!(dominates([2.0, 2.0], [1.0, 1.0]));
        assert!(!dominates([2.0, 1.0], [1.0, 2.0]));
        assert!(!dominates([1.0, 2.0], [2.0, 1.0]));
        assert!(!dominates([1.0, 1.0], [1.0, 1.0]));
        assert!(dominates([1.0, 2.0], [1.0, 1.0]));
    }

    #[test]
    fn small_fronts() {
        assert_eq!(pareto_front(&[]), Vec::<usize>::new());
        assert_eq!(pareto_front(&[[0.3, 0.1]]), vec![0]);
        assert_eq!(pareto_front(&[[1.0, 2.0], [2.0, 1.0], [0.0, 0.0]]), vec![0, 1]);
        assert_eq!(pareto_front(&[[1.0, 1.0], [0.5, 0.5], [1.0, 1.0]]), vec![0, 2]);
        assert_eq!(pareto_front(&[[1.0, 1.0], [1.0, 0.5]]), vec![0]);
    }

    #[test]
    fn random_fronts_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            // coarse values to force ties and duplicates
            let pts: Vec<[f64; 2]> = (0..200)
                .map(|_| [rng.random_range(0..20) as f64, rng.random_range(0..20) as f64])
                .collect();
            assert_eq!(pareto_front(&pts), brute_front(&pts));
        }
    }

    #[test]
    fn hypervolume_cases() {
        assert_eq!(hypervolume(&[[1.0, 1.0]], [0.0, 0.0]), 1.0);
        assert_eq!(hypervolume(&[[1.0, 2.0], [2.0, 1.0]], [0.0, 0.0]), 3.0);
        assert_eq!(hypervolume(&[[-1.0, 5.0], [3.0, -2.0]], [0.0, 0.0]), 0.0);
        assert_eq!(hypervolume(&[], [0.0, 0.0]), 0.0);
    }

    #[test]
    fn hvi_cases() {
        let front = [[1.0, 2.0], [2.0, 1.0]];
        assert_eq!(hvi(&front, [0.0, 0.0], [0.5, 0.5]), 0.0);
        assert_eq!(hvi(&front, [0.0, 0.0], [1.0, 2.0]), 0.0);
        assert_eq!(hvi(&[], [0.0, 0.0], [1.0, 1.0]), 1.0);
        assert_eq!(hvi(&front, [0.0, 0.0], [1.5, 1.5]), 0.25);
    }

    #[test]
    fn archive_tracks_front_and_reference() {
        let mut archive = ParetoArchive::new();
        archive.insert(vec![0.0], [1.0, 1.0]);
        assert_eq!(archive.reference(), Some([0.9, 0.9]));
        assert!((archive.hypervolume() - 0.01).abs() < 1e-15);
        archive.insert(vec![1.0], [2.0, 0.0]);
        // new point fell below the reference: r = min − 0.1·range
        assert_eq!(archive.reference(), Some([0.9, -0.1]));
        archive.insert(vec![2.0], [1.5, 0.5]);
        archive.insert(vec![3.0], [1.2, 0.4]);
        assert_eq!(archive.front(), &[0, 1, 2]);
        let r = archive.reference().unwrap();
        assert_eq!(archive.hypervolume(), hypervolume(&archive.front_values(), r));
    }

    fn arb_points(max: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
        prop::collection::vec((0.0f64..10.0, 0.0f64..10.0).prop_map(|(a, b)| [a, b]), 0..max)
    }

    proptest! {
        #[test]
        fn front_is_idempotent_and_order_free(points in arb_points(40)) {
            let front = pareto_front(&points);
            let vals: Vec<[f64; 2]> = front.iter().map(|&i| points[i]).collect();
            prop_assert_eq!(pareto_front(&vals), (0..vals.len()).collect::<Vec<_>>());
            let mut reversed = vals.clone();
            reversed.reverse();
            let r = [0.0, 0.0];
            prop_assert_eq!(hypervolume(&vals, r), hypervolume(&reversed, r));
        }

        #[test]
        fn hypervolume_matches_cell_decomposition(points in arb_points(25), rx in -1.0f64..5.0, ry in -1.0f64..5.0) {
            let exact = hypervolume(&points, [rx, ry]);
            let cells = cell_hypervolume(&points, [rx, ry]);
            prop_assert!((exact - cells).abs() <= 1e-9 * cells.max(1.0));
        }

        #[test]
        fn hvi_is_the_definitional_difference(points in arb_points(25), cx in 0.0f64..10.0, cy in 0.0f64..10.0) {
            let front: Vec<[f64; 2]> = pareto_front(&points).into_iter().map(|i| points[i]).collect();
            let r = [0.0, 0.0];
            let gain = hvi(&front, r, [cx, cy]);
            prop_assert!(gain >= 0.0);
            let mut extended = front.clone();
            extended.push([cx, cy]);
            let reference = cell_hypervolume(&extended, r) - cell_hypervolume(&front, r);
            prop_assert!((gain - reference).abs() <= 1e-9 * reference.abs().max(1.0));
            if front.iter().any(|p| dominates(*p, [cx, cy])) {
                prop_assert_eq!(gain, 0.0);
            }
        }

        #[test]
        fn inserting_never_decreases_hypervolume(points in arb_points(40)) {
            let mut archive = ParetoArchive::with_reference([0.0, 0.0]);
            let mut last = 0.0;
            for (i, p) in points.iter().enumerate() {
                archive.insert(vec![i as f64], *p);
                prop_assert!(archive.hypervolume() >= last);
                last = archive.hypervolume();
                let vals = archive.front_values();
                for a in &vals {
                    prop_assert!(!vals.iter().any(|b| dominates(*b, *a)));
                }
                prop_assert_eq!(archive.hypervolume(), hypervolume(&vals, [0.0, 0.0]));
            }
            let mut sorted_front = archive.front().to_vec();
            sorted_front.sort_unstable();
            prop_assert_eq!(sorted_front, pareto_front(archive.values()));
        }
    }
}
