//! Oracles shared by several test targets.
#![allow(dead_code)]

/// AP by counting: with distinct scores an item's rank is the number of
/// items scoring at least as high. Precisions are summed in rank order.
pub fn ap_by_counting(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let rank = |i: usize| scores.iter().filter(|&&s| s >= scores[i]).count();
    let mut precisions: Vec<(usize, f64)> = (0..scores.len())
        .filter(|&i| labels[i])
        .map(|i| {
            let r = rank(i);
            let above = (0..scores.len()).filter(|&j| labels[j] && scores[j] >= scores[i]).count();
            (r, above as f64 / r as f64)
        })
        .collect();
    if precisions.is_empty() {
        return None;
    }
    precisions.sort_by_key(|p| p.0);
    let n = precisions.len() as f64;
    Some(precisions.iter().map(|p| p.1).sum::<f64>() / n)
}

/// Calls `f` with every permutation of `0..n` (Heap's algorithm).
pub fn for_each_permutation(n: usize, mut f: impl FnMut(&[usize])) {
    let mut a: Vec<usize> = (0..n).collect();
    let mut c = vec![0usize; n];
    f(&a);
    let mut i = 0;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                a.swap(0, i);
            } else {
                a.swap(c[i], i);
            }
            f(&a);
            c[i] += 1;
            i = 0;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
}

/// Checks `ap` against the counting oracle for every labeling and ranking of
/// up to `max_n` items. Returns the number of cases compared.
pub fn exhaustive_ap_check(max_n: usize, ap: impl Fn(&[f64], &[f64]) -> Option<f64>) -> Result<usize, String> {
    let mut cases = 0;
    for n in 1..=max_n {
        for bits in 0u32..(1 << n) {
            let labels: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let y: Vec<f64> = labels.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let mut err = None;
            for_each_permutation(n, |perm| {
                if err.is_some() {
                    return;
                }
                let scores: Vec<f64> = perm.iter().map(|&p| (p + 1) as f64 / n as f64).collect();
                let got = ap(&scores, &y);
                let want = ap_by_counting(&scores, &labels);
                if got != want {
                    err = Some(format!("scores {scores:?} labels {y:?}: {got:?} vs {want:?}"));
                }
                cases += 1;
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
    }
    Ok(cases)
}
