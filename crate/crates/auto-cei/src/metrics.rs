//! Outcome metrics: accuracy, precision, refusal rates, length statistics
//! and length-binned diagnostic curves.
//!
//! With counts `n` (total), `c` (correct), `w` (wrong) and `r` (refusals):
//!
//! * `acc = c / n` — correct over everything;
//! * `pre = c / (n - r)` — precision over attempted (non-refused) tasks;
//! * `idk = r / n` — refusal rate;
//! * `idk_acc` — fraction of refusals whose embedded answer was correct;
//! * `hallucination_rate = 1 - pre`.
//!
//! These satisfy `acc = pre * (1 - idk)` identically. Counts are additive,
//! so shards can be counted independently and merged.

use serde::{Deserialize, Serialize};

use crate::corpus::Outcome;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub n_total: usize,
    pub n_correct: usize,
    pub n_wrong: usize,
    pub n_refusal: usize,
    pub n_refusal_embedded_correct: usize,
}

impl OutcomeCounts {
    pub fn tally(outcomes: &[Outcome]) -> OutcomeCounts {
        let mut counts = OutcomeCounts::default();
        for o in outcomes {
            counts.add(o);
        }
        counts
    }

    pub fn add(&mut self, outcome: &Outcome) {
        self.n_total += 1;
        match outcome {
            Outcome::Correct => self.n_correct += 1,
            Outcome::Wrong => self.n_wrong += 1,
            Outcome::Refusal { embedded_correct } => {
                self.n_refusal += 1;
                if *embedded_correct {
                    self.n_refusal_embedded_correct += 1;
                }
            }
        }
    }

    pub fn merge(&mut self, other: &OutcomeCounts) {
        self.n_total += other.n_total;
        self.n_correct += other.n_correct;
        self.n_wrong += other.n_wrong;
        self.n_refusal += other.n_refusal;
        self.n_refusal_embedded_correct += other.n_refusal_embedded_correct;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport<F> {
    pub counts: OutcomeCounts,
    pub acc: F,
    pub pre: F,
    pub idk: F,
    /// 0 when there are no refusals; `idk_acc_defined` records that.
    pub idk_acc: F,
    pub idk_acc_defined: bool,
    pub hallucination_rate: F,
    /// Objective `f = (1 - lambda) * pre + lambda * (1 - idk)` per requested lambda.
    pub f_at: Vec<(F, F)>,
}

/// The curriculum objective as a bare formula; the public, validated entry
/// point is [`crate::curriculum::objective_f`].
pub(crate) fn objective<F: Scalar>(pre: F, idk: F, lambda: F) -> F {
    (F::one() - lambda) * pre + lambda * (F::one() - idk)
}

/// Computes the metrics report over a batch of outcomes.
///
/// Errors with [`Error::UndefinedPrecision`] when the batch contains no
/// non-refusal responses (including the empty batch).
pub fn compute_report<F: Scalar>(outcomes: &[Outcome], lambdas: &[F]) -> Result<MetricsReport<F>> {
    report_from_counts(&OutcomeCounts::tally(outcomes), lambdas)
}

/// Same as [`compute_report`], from pre-merged shard counts.
pub fn report_from_counts<F: Scalar>(
    counts: &OutcomeCounts,
    lambdas: &[F],
) -> Result<MetricsReport<F>> {
    if counts.n_total == counts.n_refusal {
        return Err(Error::UndefinedPrecision);
    }
    let num = |n: usize| F::from_usize(n).expect("count representable in scalar type");
    let n = num(counts.n_total);
    let acc = num(counts.n_correct) / n;
    let pre = num(counts.n_correct) / num(counts.n_total - counts.n_refusal);
    let idk = num(counts.n_refusal) / n;
    let idk_acc_defined = counts.n_refusal > 0;
    let idk_acc = if idk_acc_defined {
        num(counts.n_refusal_embedded_correct) / num(counts.n_refusal)
    } else {
        F::zero()
    };
    let mut f_at = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        if !f_at.iter().any(|(l, _)| *l == lambda) {
            f_at.push((lambda, objective(pre, idk, lambda)));
        }
    }
    Ok(MetricsReport {
        counts: *counts,
        acc,
        pre,
        idk,
        idk_acc,
        idk_acc_defined,
        hallucination_rate: F::one() - pre,
        f_at,
    })
}

impl<F: Scalar> MetricsReport<F> {
    /// The objective at `lambda`, recomputed if it was not requested upfront.
    pub fn f(&self, lambda: F) -> F {
        self.f_at
            .iter()
            .find(|(l, _)| *l == lambda)
            .map(|(_, f)| *f)
            .unwrap_or_else(|| objective(self.pre, self.idk, lambda))
    }
}

/// Mean and population standard deviation of reasoning lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthStats<F> {
    pub mu: F,
    pub sigma: F,
    pub n: usize,
}

/// Computes length statistics; requires at least two samples.
pub fn reasoning_length_stats<F: Scalar>(lengths: &[u32]) -> Result<LengthStats<F>> {
    if lengths.len() < 2 {
        return Err(Error::InsufficientSample { needed: 2, got: lengths.len() });
    }
    let n = F::from_usize(lengths.len()).expect("count representable");
    let mut sum = F::zero();
    for &len in lengths {
        sum = sum + F::from_u32(len).expect("length representable");
    }
    let mu = sum / n;
    let mut ss = F::zero();
    for &len in lengths {
        let d = F::from_u32(len).expect("length representable") - mu;
        ss = ss + d * d;
    }
    Ok(LengthStats { mu, sigma: (ss / n).sqrt(), n: lengths.len() })
}

/// One bin of the error/refusal-vs-length diagnostic curve.
///
/// `error_rate` is wrong over attempted responses in the bin (0 when none
/// were attempted); `refusal_rate` is refusals over everything in the bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthBin<F> {
    pub bin_lo: u32,
    pub bin_hi: u32,
    pub error_rate: F,
    pub refusal_rate: F,
    pub n: usize,
    pub low_support: bool,
}

/// Bins `(outcome, length)` pairs into contiguous length bins of
/// `bin_width`, starting at length 1. Bins with fewer than `min_support`
/// members are flagged. Returns `ceil(max_len / bin_width)` bins.
pub fn length_binned_rates<F: Scalar>(
    pairs: &[(Outcome, u32)],
    bin_width: u32,
    min_support: usize,
) -> Vec<LengthBin<F>> {
    assert!(bin_width >= 1, "bin width must be positive");
    let max_len = pairs.iter().map(|(_, l)| *l).max().unwrap_or(0);
    if max_len == 0 {
        return Vec::new();
    }
    let n_bins = max_len.div_ceil(bin_width) as usize;
    let mut counts = vec![OutcomeCounts::default(); n_bins];
    for (outcome, len) in pairs {
        let idx = ((len.max(&1) - 1) / bin_width) as usize;
        counts[idx].add(outcome);
    }
    counts
        .iter()
        .enumerate()
        .map(|(k, c)| {
            let attempted = c.n_correct + c.n_wrong;
            let rate = |num: usize, den: usize| {
                if den == 0 {
                    F::zero()
                } else {
                    F::from_usize(num).expect("count representable")
                        / F::from_usize(den).expect("count representable")
                }
            };
            LengthBin {
                bin_lo: k as u32 * bin_width + 1,
                bin_hi: (k as u32 + 1) * bin_width,
                error_rate: rate(c.n_wrong, attempted),
                refusal_rate: rate(c.n_refusal, c.n_total),
                n: c.n_total,
                low_support: c.n_total < min_support,
            }
        })
        .collect()
}

/// Renders bins as the curve CSV (`bin_lo,bin_hi,error_rate,refusal_rate,n`).
pub fn curves_to_csv(bins: &[LengthBin<crate::Real>]) -> Result<String> {
    #[derive(Serialize)]
    struct Row {
        bin_lo: u32,
        bin_hi: u32,
        error_rate: f64,
        refusal_rate: f64,
        n: usize,
    }
    let mut writer = csv::Writer::from_writer(Vec::new());
    for b in bins {
        writer.serialize(Row {
            bin_lo: b.bin_lo,
            bin_hi: b.bin_hi,
            error_rate: b.error_rate,
            refusal_rate: b.refusal_rate,
            n: b.n,
        })?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(correct: usize, wrong: usize, refusal: usize, embedded: usize) -> Vec<Outcome> {
        let mut v = Vec::new();
        v.extend(std::iter::repeat_n(Outcome::Correct, correct));
        v.extend(std::iter::repeat_n(Outcome::Wrong, wrong));
        v.extend(std::iter::repeat_n(Outcome::Refusal { embedded_correct: true }, embedded));
        v.extend(std::iter::repeat_n(
            Outcome::Refusal { embedded_correct: false },
            refusal - embedded,
        ));
        v
    }

    #[test]
    fn report_on_mixed_batch() {
        let outcomes = batch(60, 20, 20, 3);
        let report = compute_report::<f64>(&outcomes, &[0.2]).unwrap();
        assert_eq!(report.counts.n_total, 100);
        assert!((report.acc - 0.60).abs() < 1e-12);
        assert!((report.pre - 0.75).abs() < 1e-12);
        assert!((report.idk - 0.20).abs() < 1e-12);
        assert!((report.idk_acc - 0.15).abs() < 1e-12);
        assert!((report.hallucination_rate - 0.25).abs() < 1e-12);
        assert!(report.idk_acc_defined);
    }

    #[test]
    fn acc_identity_holds() {
        for (c, w, r, e) in [(60, 20, 20, 3), (1, 1, 1, 0), (10, 0, 5, 5), (3, 7, 0, 0)] {
            let report = compute_report::<f64>(&batch(c, w, r, e), &[]).unwrap();
            assert!((report.acc - report.pre * (1.0 - report.idk)).abs() <= 1e-12, "{c}/{w}/{r}");
        }
    }

    #[test]
    fn all_refusal_batch_is_undefined_precision() {
        assert!(matches!(
            compute_report::<f64>(&batch(0, 0, 5, 1), &[]),
            Err(Error::UndefinedPrecision)
        ));
        assert!(matches!(compute_report::<f64>(&[], &[]), Err(Error::UndefinedPrecision)));
    }

    #[test]
    fn zero_refusals_flags_idk_acc() {
        let report = compute_report::<f64>(&batch(5, 5, 0, 0), &[]).unwrap();
        assert_eq!(report.idk_acc, 0.0);
        assert!(!report.idk_acc_defined);
    }

    #[test]
    fn f_at_matches_formula() {
        let report = compute_report::<f64>(&batch(60, 20, 20, 3), &[0.0, 0.2, 1.0]).unwrap();
        for &(lambda, f) in &report.f_at {
            let expect = (1.0 - lambda) * report.pre + lambda * (1.0 - report.idk);
            assert!((f - expect).abs() <= 1e-12);
        }
        assert_eq!(report.f_at[0].1, report.pre);
        assert_eq!(report.f_at[2].1, 1.0 - report.idk);
    }

    #[test]
    fn shard_merge_equals_whole_batch() {
        let a = batch(10, 3, 4, 1);
        let b = batch(7, 8, 2, 2);
        let mut whole = a.clone();
        whole.extend(b.iter().cloned());
        let mut merged = OutcomeCounts::tally(&a);
        merged.merge(&OutcomeCounts::tally(&b));
        assert_eq!(merged, OutcomeCounts::tally(&whole));
        assert_eq!(
            report_from_counts::<f64>(&merged, &[0.2]).unwrap(),
            compute_report::<f64>(&whole, &[0.2]).unwrap()
        );
    }

    #[test]
    fn length_stats_population_std() {
        let stats = reasoning_length_stats::<f64>(&[4, 6, 8]).unwrap();
        assert_eq!(stats.n, 3);
        assert!((stats.mu - 6.0).abs() < 1e-12);
        assert!((stats.sigma - 1.632_993_161_855_452).abs() < 1e-9);
    }

    #[test]
    fn length_stats_requires_two_samples() {
        assert!(matches!(
            reasoning_length_stats::<f64>(&[5]),
            Err(Error::InsufficientSample { needed: 2, got: 1 })
        ));
    }

    #[test]
    fn degenerate_lengths_have_zero_std() {
        let lens: Vec<u32> = std::iter::repeat_n(5, 10_000).collect();
        let stats = reasoning_length_stats::<f64>(&lens).unwrap();
        assert_eq!(stats.mu, 5.0);
        assert_eq!(stats.sigma, 0.0);
    }

    #[test]
    fn binned_rates_all_correct() {
        let pairs: Vec<(Outcome, u32)> = (1..=8).map(|l| (Outcome::Correct, l)).collect();
        let bins = length_binned_rates::<f64>(&pairs, 1, 1);
        assert_eq!(bins.len(), 8);
        for b in &bins {
            assert_eq!(b.error_rate, 0.0);
            assert_eq!(b.refusal_rate, 0.0);
        }
    }

    #[test]
    fn bin_layout_and_support_flag() {
        let pairs = vec![
            (Outcome::Correct, 1u32),
            (Outcome::Wrong, 2),
            (Outcome::Refusal { embedded_correct: false }, 8),
        ];
        let bins = length_binned_rates::<f64>(&pairs, 3, 2);
        // ceil(8 / 3) = 3 bins: [1,3], [4,6], [7,9].
        assert_eq!(bins.len(), 3);
        assert_eq!((bins[0].bin_lo, bins[0].bin_hi), (1, 3));
        assert_eq!((bins[2].bin_lo, bins[2].bin_hi), (7, 9));
        assert_eq!(bins[0].n, 2);
        assert!((bins[0].error_rate - 0.5).abs() < 1e-12);
        assert_eq!(bins[1].n, 0);
        assert!(bins[1].low_support);
        assert_eq!(bins[2].refusal_rate, 1.0);
        assert!(bins[2].low_support);
    }

    #[test]
    fn csv_header_and_rows() {
        let pairs = vec![(Outcome::Correct, 1u32), (Outcome::Wrong, 1)];
        let bins = length_binned_rates::<f64>(&pairs, 1, 30);
        let csv = curves_to_csv(&bins).unwrap();
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("bin_lo,bin_hi,error_rate,refusal_rate,n"));
        assert_eq!(lines.next(), Some("1,1,0.5,0.0,2"));
    }
}
