//! Average-linkage agglomerative clustering.

/// Clusters items given a symmetric distance matrix, merging the closest
/// pair of clusters while their average inter-item distance is at most
/// `threshold`. Ties merge the pair with the smallest indices first.
///
/// Returns, for every item, the smallest item index in its cluster.
pub fn average_linkage(dist: &[Vec<f64>], threshold: f64) -> Vec<usize> {
    let n = dist.len();
    // cluster k is identified by its smallest member; `d` holds the current
    // average distance between live clusters
    let mut d: Vec<Vec<f64>> = dist.to_vec();
    let mut size = vec![1usize; n];
    let mut alive = vec![true; n];
    let mut label: Vec<usize> = (0..n).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if alive[j] && best.is_none_or(|(b, _, _)| d[i][j] < b) {
                    best = Some((d[i][j], i, j));
                }
            }
        }
        let Some((gap, i, j)) = best.filter(|&(gap, _, _)| gap <= threshold) else {
            break;
        };
        debug_assert!(gap.is_finite());
        // merge j into i, Lance-Williams update for average linkage
        let (si, sj) = (size[i] as f64, size[j] as f64);
        for k in 0..n {
            if alive[k] && k != i && k != j {
                let v = (si * d[i][k] + sj * d[j][k]) / (si + sj);
                d[i][k] = v;
                d[k][i] = v;
            }
        }
        size[i] += size[j];
        alive[j] = false;
        for l in label.iter_mut() {
            if *l == j {
                *l = i;
            }
        }
    }
    label
}
