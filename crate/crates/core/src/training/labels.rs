use rand::seq::index;
use rand::Rng;

/// Soft targets: `1 - tau` on the label, `tau / (K - 1)` elsewhere.
pub fn smooth_labels(labels: &[usize], tau: f64, classes: usize) -> Vec<Vec<f64>> {
    let off = if classes > 1 { tau / (classes - 1) as f64 } else { 0.0 };
    let on = if classes > 1 { 1.0 - tau } else { 1.0 };
    labels
        .iter()
        .map(|&y| (0..classes).map(|k| if k == y { on } else { off }).collect())
        .collect()
}

/// Number of labels resampled in a batch of `batch` examples.
pub fn noisy_count(tau: f64, batch: usize) -> usize {
    (tau * batch as f64).round_ties_even() as usize
}

/// Replaces `round_half_even(tau * B)` distinct, uniformly chosen labels with
/// labels drawn uniformly from all `K` classes (possibly the original one).
pub fn inject_label_noise(labels: &[usize], tau: f64, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut out = labels.to_vec();
    let count = noisy_count(tau, labels.len()).min(labels.len());
    if count == 0 || classes == 0 {
        return out;
    }
    for i in index::sample(rng, labels.len(), count) {
        out[i] = rng.random_range(0..classes);
    }
    out
}

/// Expected target distribution of one example under [`inject_label_noise`]:
/// `(p_label, p_other)`.
pub fn expected_noisy_distribution(tau: f64, classes: usize, batch: usize) -> (f64, f64) {
    let rate = noisy_count(tau, batch).min(batch) as f64 / batch as f64;
    let k = classes as f64;
    (1.0 - rate + rate / k, rate / k)
}

/// The smoothing strength whose targets equal the expected noisy targets.
pub fn equivalent_smoothing(tau: f64, classes: usize) -> f64 {
    tau - tau / classes as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn smoothing_values() {
        let t = smooth_labels(&[3], 0.1, 10);
        assert!((t[0][3] - 0.9).abs() < 1e-15);
        assert!((t[0][0] - 0.1 / 9.0).abs() < 1e-17);
        assert!((t[0].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(smooth_labels(&[1, 0], 0.0, 3), vec![vec![0.0, 1.0, 0.0], vec![1.0, 0.0, 0.0]]);
    }

    #[test]
    fn zero_noise_keeps_labels() {
        let labels = vec![0, 1, 2, 3];
        assert_eq!(inject_label_noise(&labels, 0.0, 4, &mut rng::seeded(0)), labels);
    }

    #[test]
    fn count_rounds_half_to_even() {
        assert_eq!(noisy_count(0.25, 10), 2);
        assert_eq!(noisy_count(0.45, 10), 4);
        assert_eq!(noisy_count(0.15, 10), 2);
        assert_eq!(noisy_count(0.5, 1), 0);
        assert_eq!(noisy_count(0.5, 3), 2);
    }
}
