use odap_core::analysis::{fit_factorial, FitMethod, FitOptions};
use odap_core::scenario::{load_scenario, CASE_STUDY_ODAP};
use odap_core::{run_sweep, summarize, DistributionPattern, SweepPlan, SweepRecord};
use proptest::prelude::*;

/// Yates' algorithm on responses in standard order (factor 1 varies
/// fastest). Entry `j` of the result is the coefficient of the term whose
/// factors are the set bits of `j`.
fn yates(y: &[f64]) -> Vec<f64> {
    let n = y.len();
    let k = n.trailing_zeros();
    let mut col = y.to_vec();
    for _ in 0..k {
        let mut next = vec![0.0; n];
        for i in 0..n / 2 {
            next[i] = col[2 * i] + col[2 * i + 1];
            next[n / 2 + i] = col[2 * i + 1] - col[2 * i];
        }
        col = next;
    }
    col.iter().map(|c| c / n as f64).collect()
}

fn term_mask(factors: &[usize]) -> usize {
    factors.iter().map(|f| 1 << f).sum()
}

fn records(k: usize, ys: &[Vec<f64>]) -> Vec<SweepRecord> {
    ys.iter()
        .enumerate()
        .flat_map(|(id, reps)| {
            reps.iter().enumerate().map(move |(r, y)| SweepRecord {
                pattern_id: id as u64,
                pattern_bits: DistributionPattern::from_index(k, id as u64).bit_string(),
                throughput_bps: 1e6,
                replicate: r as u32,
                seed: 0,
                makespan_s: *y,
            })
        })
        .collect()
}

#[test]
fn yates_oracle_on_known_design() {
    // 2^2 textbook example: y = (1, 3, 5, 11) for (00, 10, 01, 11)
    let c = yates(&[1.0, 3.0, 5.0, 11.0]);
    assert_eq!(c, [5.0, 2.0, 3.0, 1.0]);
}

#[test]
fn simulated_sweep_matches_yates() {
    let s = load_scenario(CASE_STUDY_ODAP).unwrap();
    let plan = SweepPlan {
        throughputs: vec![1e6],
        replicates: 2,
        base_seed: 11,
        ..SweepPlan::default()
    };
    let sweep = run_sweep(&s, &plan, 2).unwrap();
    let means: Vec<f64> = summarize(&sweep.records).iter().map(|c| c.mean).collect();
    let oracle = yates(&means);
    let scale = means.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    let fit = fit_factorial(&sweep.records, &FitOptions::default()).unwrap();
    assert_eq!(fit.method, FitMethod::Contrast);
    assert_eq!(fit.estimates.len(), 93);
    for e in &fit.estimates {
        let want = oracle[term_mask(&e.term.factors)];
        assert!(
            (e.coefficient - want).abs() <= 1e-9 * want.abs().max(scale),
            "{}: {} vs {want}",
            e.name,
            e.coefficient
        );
    }
}

#[test]
fn noise_free_synthetic_response_is_recovered_exactly() {
    let k = 8;
    let ys: Vec<Vec<f64>> = (0..1u64 << k)
        .map(|id| {
            let x = |i: u64| if id >> i & 1 == 1 { 1.0 } else { -1.0 };
            vec![10.0 + 5.0 * x(0) - 3.0 * x(0) * x(1)]
        })
        .collect();
    let fit = fit_factorial(&records(k, &ys), &FitOptions::default()).unwrap();
    for e in &fit.estimates {
        let want = match e.name.as_str() {
            "intercept" => 10.0,
            "F1" => 5.0,
            "F1*F2" => -3.0,
            _ => 0.0,
        };
        assert_eq!(e.coefficient, want, "{}", e.name);
    }
    let sig: Vec<&str> = fit
        .significant_terms()
        .iter()
        .map(|e| e.name.as_str())
        .collect();
    assert_eq!(sig, ["F1", "F1*F2"]);
}

proptest! {
    #[test]
    fn contrast_least_squares_and_yates_agree(
        ys in prop::collection::vec(prop::collection::vec(-100.0f64..100.0, 2), 16),
    ) {
        let rs = records(4, &ys);
        let means: Vec<f64> = ys.iter().map(|r| (r[0] + r[1]) / 2.0).collect();
        let oracle = yates(&means);
        let contrast = fit_factorial(&rs, &FitOptions { max_order: 4, ..FitOptions::default() }).unwrap();
        let ls = fit_factorial(&rs, &FitOptions { max_order: 4, force_least_squares: true, ..FitOptions::default() }).unwrap();
        prop_assert_eq!(contrast.method, FitMethod::Contrast);
        prop_assert_eq!(ls.method, FitMethod::LeastSquares);
        for (a, b) in contrast.estimates.iter().zip(&ls.estimates) {
            let want = oracle[term_mask(&a.term.factors)];
            prop_assert!((a.coefficient - want).abs() < 1e-9);
            prop_assert!((b.coefficient - want).abs() < 1e-9);
            prop_assert!((a.std_err - b.std_err).abs() < 1e-9 * a.std_err.max(1.0));
        }
    }

    #[test]
    fn saturated_prediction_reproduces_cell_means(ys in prop::collection::vec(-50.0f64..50.0, 8)) {
        let rs = records(3, &ys.iter().map(|y| vec![*y]).collect::<Vec<_>>());
        let fit = fit_factorial(&rs, &FitOptions::default()).unwrap();
        for (id, y) in ys.iter().enumerate() {
            let p = DistributionPattern::from_index(3, id as u64);
            prop_assert!((fit.predict(p.bits()) - y).abs() < 1e-9);
        }
    }
}
