//! Farthest point sampling and the greedy k-center coreset.

use crate::numerics::{l2, squared_l2, Tensor};

use super::MemoryError;

/// Farthest point sampling over the rows of `points`.
///
/// Starts from row 0, then repeatedly takes the row whose distance to the
/// nearest already-selected row is largest, ties going to the smallest
/// index. Distances are compared squared, which preserves the ordering.
pub fn fps_select(points: &Tensor, k: usize) -> Result<Vec<usize>, MemoryError> {
    let n = points.rows();
    if n == 0 || points.is_empty() {
        return Err(MemoryError::EmptyInput);
    }
    if k < 1 || k > n {
        return Err(MemoryError::SelectionSize { k, n });
    }
    let mut selected = Vec::with_capacity(k);
    let mut taken = vec![false; n];
    let mut min_dist: Vec<f64> = vec![f64::INFINITY; n];
    let mut current = 0;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == k {
            break;
        }
        let anchor = points.row(current);
        let mut best = None;
        let mut best_dist = f64::NEG_INFINITY;
        for (i, d) in min_dist.iter_mut().enumerate() {
            if taken[i] {
                continue;
            }
            let nd = squared_l2(points.row(i), anchor);
            if nd < *d {
                *d = nd;
            }
            if *d > best_dist {
                best_dist = *d;
                best = Some(i);
            }
        }
        current = best.expect("k <= n leaves a candidate");
    }
    Ok(selected)
}

/// Greedy solver for the minimax coreset objective
/// `min_{S} max_{m} min_{s in S} ||m - s||`. It is the same selection rule
/// as [`fps_select`] and carries its 2-approximation guarantee.
pub fn coreset_select(points: &Tensor, k: usize) -> Result<Vec<usize>, MemoryError> {
    fps_select(points, k)
}

/// `max_m min_{s in selected} ||m - s||`.
pub fn coverage_radius(points: &Tensor, selected: &[usize]) -> f64 {
    points
        .iter_rows()
        .map(|p| {
            selected
                .iter()
                .map(|&s| l2(p, points.row(s)))
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Tensor {
        Tensor::matrix(xs.len(), 1, xs.to_vec()).unwrap()
    }

    #[test]
    fn fps_two_of_four() {
        assert_eq!(fps_select(&line(&[0.0, 1.0, 9.0, 10.0]), 2).unwrap(), vec![0, 3]);
    }

    #[test]
    fn fps_three_of_four_breaks_tie_low() {
        assert_eq!(fps_select(&line(&[0.0, 1.0, 9.0, 10.0]), 3).unwrap(), vec![0, 3, 1]);
    }

    #[test]
    fn fps_all_points() {
        let sel = fps_select(&line(&[3.0, -1.0, 4.0, 1.5, 9.0]), 5).unwrap();
        assert_eq!(sel[0], 0);
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fps_rejects_bad_k() {
        let pts = line(&[0.0, 1.0]);
        assert!(matches!(fps_select(&pts, 0), Err(MemoryError::SelectionSize { .. })));
        assert!(matches!(fps_select(&pts, 3), Err(MemoryError::SelectionSize { .. })));
        assert!(matches!(
            fps_select(&Tensor::zeros(vec![0, 3]), 1),
            Err(MemoryError::EmptyInput)
        ));
    }

    #[test]
    fn coreset_radius_examples() {
        let pts = line(&[0.0, 1.0, 9.0, 10.0]);
        let sel = coreset_select(&pts, 2).unwrap();
        assert_eq!(sel, vec![0, 3]);
        assert_eq!(coverage_radius(&pts, &sel), 1.0);
        assert_eq!(coverage_radius(&pts, &coreset_select(&pts, 4).unwrap()), 0.0);

        let dup = line(&[5.0, 5.0, 5.0]);
        let sel = coreset_select(&dup, 1).unwrap();
        assert_eq!(sel, vec![0]);
        assert_eq!(coverage_radius(&dup, &sel), 0.0);
    }

    #[test]
    fn brute_force_optimum_for_line_example() {
        // every 2-subset of four points on a line
        let pts = line(&[0.0, 1.0, 9.0, 10.0]);
        let mut best = f64::INFINITY;
        for a in 0..4 {
            for b in a + 1..4 {
                best = best.min(coverage_radius(&pts, &[a, b]));
            }
        }
        assert_eq!(best, 1.0);
    }
}
