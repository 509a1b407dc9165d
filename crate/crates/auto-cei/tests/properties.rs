//! Property tests for the pipeline's structural invariants: the shape of
//! the reward curve, task generation, rendering/parsing roundtrips, depth
//! ranges, metric identities and resampling weights.

use proptest::collection::vec;
use proptest::prelude::*;

use auto_cei::config::parse_depths;
use auto_cei::corpus::{
    annotate_refusal, parse_response, render_answer, render_refusal, MarkerSpec, Outcome, Verdict,
};
use auto_cei::ei::resample_weights;
use auto_cei::env::{generate_batch, generate_task, oracle_steps, Label, TaskSet, MAX_DEPTH};
use auto_cei::metrics::{report_from_counts, OutcomeCounts};
use auto_cei::reward::{calibrate, compute_reward};
use auto_cei::{Error, LengthStats, Real};

const REFUSAL: Outcome = Outcome::Refusal { embedded_correct: false };

fn length_stats() -> impl Strategy<Value = LengthStats> {
    (1.0f64..60.0, 0.25f64..12.0, 2usize..5000).prop_map(|(mu, sigma, n)| LengthStats {
        mu,
        sigma,
        n,
    })
}

fn step_bodies() -> impl Strategy<Value = Vec<String>> {
    vec("[a-z]{1,8}( [a-z]{1,8}){0,2}", 0..6)
}

fn labels() -> impl Strategy<Value = Label> {
    prop_oneof![Just(Label::True), Just(Label::False), Just(Label::Unknown)]
}

fn markers() -> impl Strategy<Value = MarkerSpec> {
    prop_oneof![Just(MarkerSpec::default()), Just(MarkerSpec::paragraph())]
}

proptest! {
    /// Correct and wrong answers earn the interval ends; refusal rewards
    /// stay strictly inside and ignore the embedded answer.
    #[test]
    fn assertive_rewards_sit_at_the_interval_ends(
        stats in length_stats(),
        len in 0u32..200,
    ) {
        let params = calibrate(&stats).expect("positive sigma calibrates");
        prop_assert_eq!(compute_reward(&Outcome::Correct, len, &params), 1.0);
        prop_assert_eq!(compute_reward(&Outcome::Wrong, len, &params), -1.0);
        let r = compute_reward(&REFUSAL, len, &params);
        prop_assert!(r > -1.0 && r < 1.0, "refusal reward {} escaped the open interval", r);
        let embedded = Outcome::Refusal { embedded_correct: true };
        prop_assert_eq!(compute_reward(&embedded, len, &params), r);
    }

    /// The refusal reward is zero at the threshold, never shrinks with
    /// length, and is antisymmetric around the threshold.
    #[test]
    fn refusal_reward_grows_with_length_around_the_threshold(
        c1 in 1u32..40,
        sigma in 0.25f64..12.0,
        delta in 0u32..40,
    ) {
        let stats = LengthStats { mu: c1 as Real, sigma, n: 100 };
        let params = calibrate(&stats).expect("positive sigma calibrates");
        let at = |len: u32| compute_reward(&REFUSAL, len, &params);
        prop_assert_eq!(at(c1), 0.0);
        for len in 0..80 {
            prop_assert!(at(len + 1) >= at(len), "reward shrank at length {}", len + 1);
        }
        if delta <= c1 {
            prop_assert!((at(c1 + delta) + at(c1 - delta)).abs() < 1e-12);
        }
    }

    /// Calibration pins the threshold at the mean and earns 0.9 exactly two
    /// standard deviations above it, matching the closed form
    /// `c2 = ln(19) / (2 sigma)`.
    #[test]
    fn calibration_earns_nine_tenths_two_deviations_above_the_mean(stats in length_stats()) {
        let params = calibrate(&stats).expect("positive sigma calibrates");
        prop_assert_eq!(params.c1, stats.mu);
        prop_assert!(((params.c2 * stats.sigma).tanh() - 0.9).abs() < 1e-9);
        let closed_form = 19f64.ln() / (2.0 * stats.sigma);
        prop_assert!((params.c2 - closed_form).abs() < 1e-9 * closed_form);
    }

    /// Every generated task is well-formed, solvable in exactly the
    /// requested number of steps, and a pure function of its inputs.
    #[test]
    fn generated_tasks_validate_and_match_their_requested_difficulty(
        difficulty in 1u32..=MAX_DEPTH,
        seed in any::<u64>(),
    ) {
        let task = generate_task(difficulty, seed).expect("difficulty in range");
        task.validate().expect("generated task is well-formed");
        prop_assert_eq!(task.optimal_steps, difficulty);
        prop_assert_eq!(oracle_steps(&task).expect("reference steps").len(), difficulty as usize);
        let again = generate_task(difficulty, seed).expect("same inputs");
        prop_assert_eq!(again, task);
    }

    /// Task sets survive a write/read cycle through their JSONL form.
    #[test]
    fn task_sets_roundtrip_through_jsonl(n in 1usize..10, seed in any::<u64>()) {
        let set = generate_batch("prop", n, 1..=4, seed).expect("batch");
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("tasks.jsonl");
        set.write_jsonl(&path).expect("write");
        let back = TaskSet::from_jsonl(&path).expect("read");
        prop_assert_eq!(back.to_jsonl_string(), set.to_jsonl_string());
    }

    /// Depth ranges parse exactly when non-empty and inside the supported
    /// band; zero, inverted, oversized and non-numeric forms are rejected.
    #[test]
    fn depth_ranges_parse_iff_well_formed(lo in 1u32..=MAX_DEPTH, hi in 1u32..=MAX_DEPTH) {
        match parse_depths(&format!("{lo}..{hi}")) {
            Ok(range) => {
                prop_assert!(lo <= hi);
                prop_assert_eq!(range, lo..=hi);
            }
            Err(_) => prop_assert!(lo > hi),
        }
        prop_assert_eq!(parse_depths(&lo.to_string()).expect("single depth"), lo..=lo);
        let from_zero = format!("0..{hi}");
        let past_max = format!("{lo}..{}", MAX_DEPTH + 1);
        prop_assert!(parse_depths(&from_zero).is_err());
        prop_assert!(parse_depths(&past_max).is_err());
        prop_assert!(parse_depths("one..two").is_err());
    }

    /// Reports satisfy `acc = pre * (1 - idk)`, the hallucination
    /// complement, and the objective definition at every lambda.
    #[test]
    fn outcome_reports_satisfy_the_accuracy_identity(
        correct in 0usize..400,
        wrong in 0usize..400,
        refusal in 0usize..400,
        embedded in 0usize..400,
        lambda in 0.0f64..=1.0,
    ) {
        prop_assume!(correct + wrong > 0);
        let embedded = embedded.min(refusal);
        let counts = OutcomeCounts {
            n_total: correct + wrong + refusal,
            n_correct: correct,
            n_wrong: wrong,
            n_refusal: refusal,
            n_refusal_embedded_correct: embedded,
        };
        let report = report_from_counts(&counts, &[lambda]).expect("some answers are assertive");
        prop_assert!((report.acc - report.pre * (1.0 - report.idk)).abs() < 1e-12);
        prop_assert!((report.hallucination_rate - (1.0 - report.pre)).abs() < 1e-12);
        let f = (1.0 - lambda) * report.pre + lambda * (1.0 - report.idk);
        prop_assert!((report.f(lambda) - f).abs() < 1e-12);
        prop_assert_eq!(report.idk_acc_defined, refusal > 0);
        if refusal > 0 {
            prop_assert!((report.idk_acc - embedded as Real / refusal as Real).abs() < 1e-12);
        }
    }

    /// Rendered responses parse back to their own step count and verdict,
    /// and refusal annotation flips the verdict without touching the steps.
    #[test]
    fn rendered_responses_parse_back_to_their_steps_and_verdict(
        bodies in step_bodies(),
        label in labels(),
        marker in markers(),
    ) {
        let expected_len = bodies.len().max(1) as u32;

        let assertive = render_answer(&bodies, label, &marker);
        let parsed = parse_response(&assertive, &marker).expect("own rendering parses");
        prop_assert_eq!(parsed.verdict, Verdict::Answer(label));
        prop_assert_eq!(parsed.len, expected_len);
        prop_assert_eq!(parsed.len as usize, parsed.steps.len());

        let refusal = render_refusal(&bodies, &marker);
        let parsed = parse_response(&refusal, &marker).expect("own rendering parses");
        prop_assert_eq!(parsed.verdict, Verdict::Refusal(None));
        prop_assert_eq!(parsed.len, expected_len);

        let annotated = annotate_refusal(&assertive, &marker).expect("assertive annotates");
        let parsed = parse_response(&annotated, &marker).expect("annotated response parses");
        prop_assert_eq!(parsed.verdict, Verdict::Refusal(Some(label)));
        prop_assert_eq!(parsed.len, expected_len);
        prop_assert_eq!(annotate_refusal(&annotated, &marker).expect("idempotent"), annotated);
    }

    /// Resampling weights are a positive distribution, invariant under a
    /// common reward shift, and ordered like the rewards.
    #[test]
    fn resample_weights_normalise_and_preserve_reward_order(
        rewards in vec(-1.0f64..=1.0, 1..24),
        tau in 0.4f64..=0.7,
        shift in -3.0f64..=3.0,
    ) {
        let weights = resample_weights(&rewards, tau);
        prop_assert_eq!(weights.len(), rewards.len());
        prop_assert!((weights.iter().sum::<Real>() - 1.0).abs() < 1e-12);
        prop_assert!(weights.iter().all(|w| *w > 0.0));

        let shifted: Vec<Real> = rewards.iter().map(|r| r + shift).collect();
        for (a, b) in weights.iter().zip(resample_weights(&shifted, tau)) {
            prop_assert!((a - b).abs() < 1e-12);
        }

        for (i, wi) in weights.iter().enumerate() {
            for (j, wj) in weights.iter().enumerate() {
                if rewards[i] == rewards[j] {
                    prop_assert_eq!(wi, wj);
                } else if rewards[j] - rewards[i] > 1e-6 {
                    prop_assert!(wi < wj);
                }
            }
        }
    }
}

#[test]
fn out_of_range_difficulties_are_rejected() {
    assert!(generate_task(0, 5).is_err());
    assert!(generate_task(MAX_DEPTH + 1, 5).is_err());
}

#[test]
fn reports_over_pure_refusal_outcomes_have_no_precision() {
    let counts = OutcomeCounts {
        n_total: 7,
        n_refusal: 7,
        n_refusal_embedded_correct: 3,
        ..OutcomeCounts::default()
    };
    assert!(matches!(report_from_counts::<Real>(&counts, &[]), Err(Error::UndefinedPrecision)));
}
