//! Robust 1-D signal utilities: median filter, Hampel outlier filter, and
//! prominence-based peak/valley detection.

/// Median of a slice. Averages the two central elements for even lengths.
fn median_of(buf: &mut Vec<f64>) -> f64 {
    buf.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = buf.len();
    if n % 2 == 1 {
        buf[n / 2]
    } else {
        0.5 * (buf[n / 2 - 1] + buf[n / 2])
    }
}

/// Sliding median filter with an odd window. Edge windows shrink
/// symmetrically (radius `min(half, i, n-1-i)`), so the output length
/// equals the input length and monotone series keep their end values.
pub fn median_filter(values: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "median window must be odd");
    let half = window / 2;
    let n = values.len();
    let mut out = Vec::with_capacity(n);
    let mut buf = Vec::with_capacity(window);
    for i in 0..n {
        let r = half.min(i).min(n - 1 - i);
        buf.clear();
        buf.extend_from_slice(&values[i - r..i + r + 1]);
        out.push(median_of(&mut buf));
    }
    out
}

/// MAD-to-sigma scale for Gaussian data.
const MAD_SCALE: f64 = 1.4826;

/// Hampel filter: replaces samples deviating from the local median by more
/// than `n_sigma` scaled MADs with that median. Edge windows are truncated.
pub fn hampel_filter(values: &[f64], half_window: usize, n_sigma: f64) -> Vec<f64> {
    let n = values.len();
    let mut out = values.to_vec();
    if n == 0 || half_window == 0 {
        return out;
    }
    let mut buf = Vec::with_capacity(2 * half_window + 1);
    for i in 0..n {
        let lo = i.saturating_sub(half_window);
        let hi = (i + half_window + 1).min(n);
        buf.clear();
        buf.extend_from_slice(&values[lo..hi]);
        let med = median_of(&mut buf);
        for v in buf.iter_mut() {
            *v = (*v - med).abs();
        }
        let mad = median_of(&mut buf);
        let sigma = MAD_SCALE * mad;
        if (values[i] - med).abs() > n_sigma * sigma {
            out[i] = med;
        }
    }
    out
}

/// Local maxima of `values` whose prominence reaches `min_prominence`.
///
/// Plateaus count as a single peak at the plateau midpoint. Prominence is
/// the drop from the peak to the higher of the two minima separating it
/// from the nearest higher terrain (or the series edge).
pub fn find_peaks(values: &[f64], min_prominence: f64) -> Vec<usize> {
    let n = values.len();
    if n < 3 {
        return Vec::new();
    }
    let mut candidates = Vec::new();
    let mut i = 1;
    while i < n - 1 {
        if values[i] > values[i - 1] {
            // scan forward over a possible plateau
            let start = i;
            let mut j = i;
            while j + 1 < n && values[j + 1] == values[j] {
                j += 1;
            }
            if j + 1 < n && values[j + 1] < values[j] {
                candidates.push((start + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }

    let mut peaks = Vec::new();
    for &p in &candidates {
        // left base
        let mut left_min = values[p];
        let mut k = p;
        while k > 0 {
            k -= 1;
            if values[k] > values[p] {
                break;
            }
            if values[k] < left_min {
                left_min = values[k];
            }
        }
        // right base
        let mut right_min = values[p];
        let mut k = p;
        while k + 1 < n {
            k += 1;
            if values[k] > values[p] {
                break;
            }
            if values[k] < right_min {
                right_min = values[k];
            }
        }
        let prominence = values[p] - left_min.max(right_min);
        if prominence >= min_prominence {
            peaks.push(p);
        }
    }
    peaks
}

/// Local minima with at least `min_prominence` of depth.
pub fn find_valleys(values: &[f64], min_prominence: f64) -> Vec<usize> {
    let negated: Vec<f64> = values.iter().map(|v| -v).collect();
    find_peaks(&negated, min_prominence)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Brute-force median filter used as an independent oracle
    /// (symmetrically shrinking edge windows).
    fn median_filter_oracle(values: &[f64], window: usize) -> Vec<f64> {
        let half = window / 2;
        (0..values.len())
            .map(|i| {
                let r = half.min(i).min(values.len() - 1 - i);
                let (lo, hi) = (i - r, i + r + 1);
                let mut w: Vec<f64> = values[lo..hi].to_vec();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if w.len() % 2 == 1 {
                    w[w.len() / 2]
                } else {
                    0.5 * (w[w.len() / 2 - 1] + w[w.len() / 2])
                }
            })
            .collect()
    }

    #[test]
    fn median_filter_matches_oracle() {
        let xs: Vec<f64> = (0..50)
            .map(|i| ((i * 2654435761u64 as usize) % 97) as f64)
            .collect();
        assert_eq!(median_filter(&xs, 5), median_filter_oracle(&xs, 5));
        assert_eq!(median_filter(&xs, 11), median_filter_oracle(&xs, 11));
    }

    #[test]
    fn median_filter_kills_single_spike() {
        let mut xs = vec![1.0; 21];
        xs[10] = 100.0;
        let out = median_filter(&xs, 5);
        assert!(out.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn hampel_replaces_outlier_with_median() {
        let mut xs: Vec<f64> = (0..40).map(|i| i as f64 * 0.1).collect();
        xs[20] = 50.0;
        let out = hampel_filter(&xs, 5, 3.0);
        assert!((out[20] - 2.0).abs() < 0.3);
        // inliers untouched
        assert_eq!(out[5], xs[5]);
    }

    #[test]
    fn hampel_preserves_length_and_clean_data() {
        let xs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.3).sin()).collect();
        let out = hampel_filter(&xs, 5, 3.0);
        assert_eq!(out.len(), xs.len());
    }

    #[test]
    fn peaks_on_triangle() {
        let ys: Vec<f64> = (0..11)
            .map(|i| if i <= 5 { i as f64 } else { 10.0 - i as f64 })
            .collect();
        assert_eq!(find_peaks(&ys, 2.0), vec![5]);
        assert!(find_valleys(&ys, 2.0).is_empty());
    }

    #[test]
    fn small_wiggle_below_prominence_ignored() {
        let mut ys: Vec<f64> = (0..40).map(|i| i as f64 * 0.5).collect();
        ys[20] += 1.0; // 1 m bump on a rising ramp
        assert!(find_peaks(&ys, 2.0).is_empty());
    }

    #[test]
    fn plateau_peak_reported_once() {
        let ys = vec![0.0, 1.0, 5.0, 5.0, 5.0, 1.0, 0.0];
        assert_eq!(find_peaks(&ys, 2.0), vec![3]);
    }

    #[test]
    fn valley_between_two_ramps() {
        let mut ys: Vec<f64> = (0..10).rev().map(|i| i as f64).collect();
        ys.extend((0..10).map(|i| i as f64));
        let valleys = find_valleys(&ys, 2.0);
        assert_eq!(valleys.len(), 1);
        assert!((9..=10).contains(&valleys[0]));
    }
}
