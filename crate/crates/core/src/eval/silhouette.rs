use std::collections::BTreeMap;

use super::EvalError;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean silhouette with Euclidean distance. Points alone in their cluster
/// score 0, as do points whose intra and nearest-cluster distances are
/// both 0.
pub fn silhouette(points: &[Vec<f64>], labels: &[usize]) -> Result<f64, EvalError> {
    if points.len() != labels.len() {
        return Err(EvalError::Length(points.len(), labels.len()));
    }
    let mut members: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        members.entry(l).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(EvalError::SingleCluster);
    }
    let mut total = 0.0;
    for (i, &li) in labels.iter().enumerate() {
        let own = &members[&li];
        if own.len() == 1 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(&points[i], &points[j])).sum::<f64>()
            / (own.len() - 1) as f64;
        let b = members
            .iter()
            .filter(|(l, _)| **l != li)
            .map(|(_, js)| js.iter().map(|&j| dist(&points[i], &points[j])).sum::<f64>() / js.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}
