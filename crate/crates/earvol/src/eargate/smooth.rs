//! Label smoothing: correct isolated misclassifications, then enforce a
//! single contiguous ear segment.
//!
//! Three deterministic passes:
//!
//! 1. every isolated `0,1,0` triple of the *input* becomes `0,0,0`;
//! 2. every isolated `1,0,1` triple of the pass-1 result becomes `1,1,1`;
//! 3. among the remaining runs of 1s only the longest survives (earliest on
//!    ties); everything else is zeroed.
//!
//! Running the isolated-1 removal before the gap fill (each on a fixed
//! snapshot) makes the whole map idempotent: pass 1 never creates new
//! isolated 1s, pass 2 only grows or merges runs, and a kept run of length
//! ≥ 2 (or a boundary singleton, which has no flanking pair) is a fixed
//! point of all three passes.

/// Smooth a raw 0/1 slice-label sequence into at most one run of 1s.
pub fn smooth_labels(labels: &[u8]) -> Vec<u8> {
    debug_assert!(labels.iter().all(|&l| l <= 1));
    let n = labels.len();
    // pass 1: drop isolated 1s (snapshot = input)
    let mut stage = labels.to_vec();
    for i in 1..n.saturating_sub(1) {
        if labels[i - 1] == 0 && labels[i] == 1 && labels[i + 1] == 0 {
            stage[i] = 0;
        }
    }
    // pass 2: fill isolated 0s (snapshot = pass-1 result)
    let snapshot = stage.clone();
    for i in 1..n.saturating_sub(1) {
        if snapshot[i - 1] == 1 && snapshot[i] == 0 && snapshot[i + 1] == 1 {
            stage[i] = 1;
        }
    }
    // pass 3: keep only the longest run (ties -> earliest)
    let mut best: Option<(usize, usize)> = None; // (start, len)
    let mut i = 0;
    while i < n {
        if stage[i] == 1 {
            let start = i;
            while i < n && stage[i] == 1 {
                i += 1;
            }
            let len = i - start;
            if best.map(|(_, blen)| len > blen).unwrap_or(true) {
                best = Some((start, len));
            }
        } else {
            i += 1;
        }
    }
    let mut out = vec![0u8; n];
    if let Some((start, len)) = best {
        out[start..start + len].fill(1);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn runs_of_ones(seq: &[u8]) -> usize {
        let mut runs = 0;
        let mut prev = 0u8;
        for &v in seq {
            if v == 1 && prev == 0 {
                runs += 1;
            }
            prev = v;
        }
        runs
    }

    #[test]
    fn literal_isolated_triples() {
        assert_eq!(smooth_labels(&[0, 1, 0]), vec![0, 0, 0]);
        assert_eq!(smooth_labels(&[1, 0, 1]), vec![1, 1, 1]);
    }

    #[test]
    fn mixed_sequence_from_contract() {
        let input = [0, 1, 1, 0, 1, 1, 1, 0, 0, 1, 0];
        let expected = vec![0, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0];
        assert_eq!(smooth_labels(&input), expected);
    }

    #[test]
    fn longest_run_wins() {
        assert_eq!(
            smooth_labels(&[1, 1, 0, 0, 1, 1, 1]),
            vec![0, 0, 0, 0, 1, 1, 1]
        );
    }

    #[test]
    fn tie_breaks_to_earliest_run() {
        assert_eq!(smooth_labels(&[1, 1, 0, 0, 1, 1]), vec![1, 1, 0, 0, 0, 0]);
    }

    #[test]
    fn alternating_pattern_collapses_without_ghost_singletons() {
        // overlapping triples: the isolated-1 removals win over the gap fill
        assert_eq!(smooth_labels(&[0, 1, 0, 1, 0]), vec![0, 0, 0, 0, 0]);
    }

    #[test]
    fn empty_and_trivial_sequences() {
        assert_eq!(smooth_labels(&[]), Vec::<u8>::new());
        assert_eq!(smooth_labels(&[1]), vec![1]);
        assert_eq!(smooth_labels(&[0]), vec![0]);
        assert_eq!(smooth_labels(&[1, 0]), vec![1, 0]);
    }

    #[test]
    fn exhaustive_len12_single_run_and_idempotent() {
        for bits in 0u32..(1 << 12) {
            let seq: Vec<u8> = (0..12).map(|b| ((bits >> b) & 1) as u8).collect();
            let once = smooth_labels(&seq);
            assert!(runs_of_ones(&once) <= 1, "input {seq:?} -> {once:?}");
            let twice = smooth_labels(&once);
            assert_eq!(once, twice, "not idempotent for {seq:?}");
        }
    }

    #[test]
    fn ear_segment_extraction() {
        use super::super::LabelSequence;
        let seq = LabelSequence::new(smooth_labels(&[0, 0, 1, 1, 1, 0, 0])).unwrap();
        assert_eq!(seq.ear_segment(), Some((2, 5)));
        let none = LabelSequence::new(vec![0, 0, 0]).unwrap();
        assert_eq!(none.ear_segment(), None);
    }
}
