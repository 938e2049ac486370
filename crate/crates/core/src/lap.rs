//! Linear sum assignment (Hungarian method with potentials, O(n^3)).

/// Assignment maximizing `sum_i score[i][assign[i]]` over permutations.
/// `score` must be square.
pub fn maximize(score: &[Vec<f64>]) -> Vec<usize> {
    let n = score.len();
    let cost: Vec<Vec<f64>> = score.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    minimize(&cost, n)
}

fn minimize(cost: &[Vec<f64>], n: usize) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    // 1-based rows/cols; p[j] = row matched to column j, 0 = free.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0usize; n];
    for j in 1..=n {
        assign[p[j] - 1] = j - 1;
    }
    assign
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(score: &[Vec<f64>]) -> f64 {
        fn rec(score: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == score.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..score.len() {
                if !used[j] {
                    used[j] = true;
                    best = best.max(score[row][j] + rec(score, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        rec(score, 0, &mut vec![false; score.len()])
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for n in 1..=7 {
            for _ in 0..20 {
                let s: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
                let a = maximize(&s);
                let mut seen = a.clone();
                seen.sort_unstable();
                assert_eq!(seen, (0..n).collect::<Vec<_>>());
                let got: f64 = a.iter().enumerate().map(|(i, &j)| s[i][j]).sum();
                assert!((got - brute(&s)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn recovers_planted_permutation() {
        let pi = [3usize, 0, 4, 1, 2];
        let s: Vec<Vec<f64>> = (0..5).map(|i| (0..5).map(|j| if pi[i] == j { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(maximize(&s), pi.to_vec());
        assert!(maximize(&[]).is_empty());
    }
}
