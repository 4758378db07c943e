//! Loss-explosion and precision-precursor detection on training traces.

pub const MEDIAN_WINDOW: usize = 1000;
pub const EXPLOSION_FACTOR: f64 = 10.0;
pub const PRECURSOR_WINDOW: usize = 2000;
pub const PRECURSOR_DROP: u8 = 5;

/// Steps where the loss exceeds ten times the median of the preceding 1000
/// losses while the previous step did not. A run of consecutive exceeding
/// steps is one event.
pub fn explosion_onsets(losses: &[f64]) -> Vec<usize> {
    let mut window: Vec<f64> = Vec::with_capacity(MEDIAN_WINDOW + 1);
    let mut onsets = Vec::new();
    let mut last_hit: Option<usize> = None;
    for (t, &loss) in losses.iter().enumerate() {
        if t >= MEDIAN_WINDOW {
            let mid = window.len() / 2;
            let median = if window.len() % 2 == 1 {
                window[mid]
            } else {
                0.5 * (window[mid - 1] + window[mid])
            };
            if loss > EXPLOSION_FACTOR * median {
                if last_hit != Some(t - 1) {
                    onsets.push(t);
                }
                last_hit = Some(t);
            }
            let old = losses[t - MEDIAN_WINDOW];
            let at = window.partition_point(|v| v.total_cmp(&old).is_lt());
            window.remove(at);
        }
        let at = window.partition_point(|v| v.total_cmp(&loss).is_lt());
        window.insert(at, loss);
    }
    onsets
}

/// Whether loss exact bits drop by at least five between two steps of the
/// 2000 steps leading up to `onset` (inclusive).
pub fn has_precursor(bits: &[u8], onset: usize) -> bool {
    if onset >= bits.len() {
        return false;
    }
    let start = onset.saturating_sub(PRECURSOR_WINDOW);
    let mut peak = 0u8;
    for &b in &bits[start..=onset] {
        peak = peak.max(b);
        if peak - b >= PRECURSOR_DROP {
            return true;
        }
    }
    false
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FluctuationReport {
    pub onsets: Vec<usize>,
    pub with_precursor: usize,
}

pub fn analyze(losses: &[f64], bits: &[u8]) -> FluctuationReport {
    let onsets = explosion_onsets(losses);
    let with_precursor = onsets.iter().filter(|&&t| has_precursor(bits, t)).count();
    FluctuationReport { onsets, with_precursor }
}
