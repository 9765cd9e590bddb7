//! Classification scores at a fixed threshold and over the full ranking.

/// Fraction of rows whose `score >= 0.5` agrees with `label == 1`.
pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &y)| (s >= 0.5) == (y == 1))
        .count();
    hits as f64 / scores.len() as f64
}

/// Step-interpolated average precision: the mean of the precision reached at
/// each positive when rows are ranked by descending score. Equal scores keep
/// their input order. Zero when there are no positives.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let positives = labels.iter().filter(|&&y| y == 1).count();
    if positives == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}
