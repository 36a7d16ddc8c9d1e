use super::*;
use crate::fl::InterleaveRatio;
use alloc::collections::BTreeSet;
use alloc::vec;
use proptest::prelude::*;

fn cand(config: ProtectionConfig, asr: f64, accuracy: f64, comm: f64) -> Candidate {
    Candidate { config, level: "L".into(), group: "0.5".into(), asr, accuracy, comm_bytes: comm, compute_secs: 1.0, convergence_round: 10.0 }
}

fn r(a: u32, b: u32) -> InterleaveRatio {
    InterleaveRatio::new(a, b).unwrap()
}

fn rates(c: &[Candidate], f: impl Fn(&Candidate) -> f64) -> Vec<f64> {
    c.iter().map(f).collect()
}

#[test]
fn asr_filter_examples() {
    let g: Vec<Candidate> = [0.0, 0.002, 0.008].iter().map(|&a| cand(ProtectionConfig::plain(), a, 0.5, 1.0)).collect();
    assert_eq!(rates(&filter_asr(&g, 0.005), |c| c.asr), [0.0, 0.002]);
    assert_eq!(filter_asr(&g, 1.0).len(), 3);
    let same: Vec<Candidate> = (0..3).map(|_| cand(ProtectionConfig::plain(), 0.2, 0.5, 1.0)).collect();
    assert_eq!(filter_asr(&same, 0.0).len(), 3);
}

#[test]
fn acc_filter_examples() {
    let g: Vec<Candidate> = [0.56, 0.54, 0.50].iter().map(|&a| cand(ProtectionConfig::plain(), 0.0, a, 1.0)).collect();
    assert_eq!(rates(&filter_acc(&g, 0.04), |c| c.accuracy), [0.56, 0.54]);
    assert_eq!(rates(&filter_acc(&g, 0.0), |c| c.accuracy), [0.56]);
    assert_eq!(filter_acc(&g[2..], 0.0).len(), 1);
}

#[test]
fn cost_filter_examples() {
    let g: Vec<Candidate> = [100e6, 140e6, 200e6].iter().map(|&c| cand(ProtectionConfig::plain(), 0.0, 0.5, c)).collect();
    assert_eq!(rates(&filter_sc(&g, 0.5), |c| c.comm_bytes), [100e6, 140e6]);
    let mut h = g.clone();
    h[1].compute_secs = 0.5;
    assert_eq!(rates(&filter_sc(&h, 0.0), |c| c.comm_bytes), [100e6]);
    let eq: Vec<Candidate> = (0..4).map(|_| cand(ProtectionConfig::plain(), 0.0, 0.5, 5.0)).collect();
    assert_eq!(filter_sc(&eq, 0.0).len(), 4);
}

#[test]
fn permissive_thresholds_keep_everything() {
    let g: Vec<Candidate> = (0..6).map(|i| cand(ProtectionConfig::dp_only(0.1 * i as f64), 0.1 * i as f64, 0.9 - 0.1 * i as f64, 1.0 + i as f64)).collect();
    let th = ThresholdSet { t_asr: 1.0, t_acc: 1.0, t_sc: 1e9 };
    assert_eq!(pipeline(&g, &th, &RQ2_ORDER).last().unwrap().len(), 6);
}

#[test]
fn six_record_group_matches_hand_result() {
    let g = vec![
        cand(ProtectionConfig::new(Method::Pi, 0.1, 1.0, r(1, 2)), 0.000, 0.62, 120.0),
        cand(ProtectionConfig::new(Method::Pi, 0.1, 1.0, r(1, 4)), 0.004, 0.60, 150.0),
        cand(ProtectionConfig::new(Method::SiDp, 0.1, 0.0, r(1, 2)), 0.009, 0.64, 40.0),
        cand(ProtectionConfig::new(Method::Mp, 0.01, 0.2, InterleaveRatio::ZERO), 0.002, 0.55, 90.0),
        cand(ProtectionConfig::new(Method::Mp, 0.01, 0.6, InterleaveRatio::ZERO), 0.001, 0.59, 200.0),
        cand(ProtectionConfig::dp_only(0.1), 0.003, 0.50, 40.0),
    ];
    let th = ThresholdSet { t_asr: 0.005, t_acc: 0.04, t_sc: 0.5 };
    let stages = pipeline(&g, &th, &RQ2_ORDER);
    // asr ≤ 0.005 drops SI/DP; acc ≥ 0.58 leaves PI×2 and MP η=0.6; comm ≤ 180 keeps both PI.
    assert_eq!(stages[0].len(), 5);
    assert_eq!(rates(&stages[1], |c| c.accuracy), [0.62, 0.60, 0.59]);
    assert_eq!(rates(&stages[2], |c| c.comm_bytes), [120.0, 150.0]);
    let stages = pipeline(&g, &th, &RQ3_ORDER);
    // acc ≥ 0.60 first keeps PI×2 and SI/DP; asr ≤ 0.005 then drops SI/DP.
    assert_eq!(rates(&stages[0], |c| c.accuracy), [0.62, 0.60, 0.64]);
    assert_eq!(rates(&stages[1], |c| c.accuracy), [0.62, 0.60]);
}

#[test]
fn earlier_stage_slack_can_displace_survivors() {
    // A looser t_asr admits a more accurate record, which then raises the
    // accuracy bar: stage-wise filters are monotone, the composed pipeline
    // is not.
    let g = vec![cand(ProtectionConfig::plain(), 0.0, 0.5, 1.0), cand(ProtectionConfig::dp_only(0.1), 0.01, 0.9, 1.0)];
    let tight = ThresholdSet { t_asr: 0.0, t_acc: 0.04, t_sc: 0.5 };
    let loose = ThresholdSet { t_asr: 0.02, ..tight };
    assert_eq!(pipeline(&g, &tight, &RQ2_ORDER)[2].len(), 1);
    let after = &pipeline(&g, &loose, &RQ2_ORDER)[2];
    assert_eq!(after.len(), 1);
    assert_eq!(after[0].accuracy, 0.9);
}

#[test]
fn rendering_collapses_and_excludes() {
    let pi: Vec<Candidate> = [r(0, 1), r(1, 4), r(1, 2), r(3, 4), r(1, 1)]
        .into_iter()
        .map(|q| cand(ProtectionConfig::new(Method::Pi, 0.1, 1.0, q), 0.0, 0.5, 1.0))
        .collect();
    let mp: Vec<Candidate> = [0.0, 0.2, 0.6, 1.0]
        .into_iter()
        .map(|e| cand(ProtectionConfig::new(Method::Mp, 0.01, e, InterleaveRatio::ZERO), 0.0, 0.5, 1.0))
        .collect();
    let sidp = vec![cand(ProtectionConfig::new(Method::SiDp, 0.1, 0.0, r(1, 2)), 0.0, 0.5, 1.0)];
    let all: Vec<Candidate> = pi.iter().chain(&mp).chain(&sidp).cloned().collect();

    let keep_pi: Vec<Candidate> = pi.iter().filter(|c| c.config.ratio != r(3, 4)).cloned().collect();
    let keep_mp = vec![mp[1].clone()];
    let survivors: Vec<Candidate> = keep_pi.iter().chain(&keep_mp).chain(&sidp).cloned().collect();
    assert_eq!(render_cell(&all, &survivors), "SI/DP, PI (excl. ρ=3/4), MP: η=0.2, DP (PI), HE (PI)");

    assert_eq!(render_cell(&all, &all), "SI/DP, PI, MP, DP (PI, MP), HE (PI)");
    assert_eq!(render_cell(&all, &[]), "none");
    let dp_only_pi = vec![pi[4].clone()];
    assert_eq!(render_cell(&all, &dp_only_pi), "DP (PI)");
}

#[test]
fn select_groups_and_marks_missing() {
    let mut a = cand(ProtectionConfig::dp_only(0.1), 0.0, 0.5, 1.0);
    a.level = "DLG".into();
    let rows = select(&[a], &ThresholdSet::RQ2, &RQ2_ORDER, &["DLG".into(), "CAH".into()], &["0.5".into()]);
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].rendered, "DP-only");
    assert_eq!(rows[1].rendered, "no candidate");
    let table = render_table(&rows, &["DLG".into(), "CAH".into()], &["0.5".into()]);
    assert!(table.contains("CAH | no candidate"), "{table}");
}

#[test]
fn recommendations() {
    use PrivacyRequirement::*;
    assert_eq!(recommend(Strong, Priority::Accuracy).methods, [Method::Pi]);
    assert_eq!(recommend(Strong, Priority::LowCommunication).methods, [Method::SiDp, Method::DpOnly]);
    assert_eq!(recommend(Moderate, Priority::Accuracy).methods, [Method::Mp, Method::SiHe]);
    let m = recommend(Moderate, Priority::LowCommunication);
    assert_eq!(m.methods, [Method::SiDp, Method::DpOnly]);
    assert!(m.caveat.is_some());
}

/// Integer-valued record for the exact oracle: asr and accuracy in
/// thousandths, costs as positive integers.
#[derive(Debug, Clone)]
struct Raw {
    asr: i64,
    acc: i64,
    comm: i64,
    compute: i64,
    rounds: i64,
}

fn raw_strategy() -> impl Strategy<Value = Raw> {
    (0i64..=60, 0i64..=1000, 1i64..=40, 1i64..=40, 1i64..=60).prop_map(|(asr, acc, comm, compute, rounds)| Raw { asr, acc, comm, compute, rounds })
}

/// Exact re-implementation over index sets with integer arithmetic;
/// `t_sc` is in hundredths.
fn oracle(g: &[Raw], t_asr: i64, t_acc: i64, t_sc: i64, order: &[Stage]) -> BTreeSet<usize> {
    let mut s: BTreeSet<usize> = (0..g.len()).collect();
    for st in order {
        match st {
            Stage::Asr => {
                let m = s.iter().map(|&i| g[i].asr).min().unwrap();
                s.retain(|&i| g[i].asr <= m + t_asr);
            }
            Stage::Acc => {
                let m = s.iter().map(|&i| g[i].acc).max().unwrap();
                s.retain(|&i| g[i].acc >= m - t_acc);
            }
            Stage::Sc => {
                for f in [|r: &Raw| r.comm, |r: &Raw| r.compute, |r: &Raw| r.rounds] {
                    let m = s.iter().map(|&i| f(&g[i])).min().unwrap();
                    s.retain(|&i| 100 * f(&g[i]) <= (100 + t_sc) * m);
                }
            }
        }
    }
    s
}

fn to_candidates(g: &[Raw]) -> Vec<Candidate> {
    g.iter()
        .enumerate()
        .map(|(i, x)| Candidate {
            config: ProtectionConfig::dp_only(i as f64 + 1.0),
            level: "L".into(),
            group: "G".into(),
            asr: x.asr as f64 / 1000.0,
            accuracy: x.acc as f64 / 1000.0,
            comm_bytes: x.comm as f64 * 1e6,
            compute_secs: x.compute as f64 / 10.0,
            convergence_round: x.rounds as f64,
        })
        .collect()
}

fn ids(c: &[Candidate]) -> BTreeSet<usize> {
    c.iter().map(|c| c.config.sigma as usize - 1).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn pipeline_matches_exact_oracle(g in proptest::collection::vec(raw_strategy(), 1..=20), ta in 0i64..=20, tc in 0i64..=100, ts in 0i64..=100) {
        let th = ThresholdSet { t_asr: ta as f64 / 1000.0, t_acc: tc as f64 / 1000.0, t_sc: ts as f64 / 100.0 };
        let cands = to_candidates(&g);
        for order in [RQ2_ORDER, RQ3_ORDER] {
            let got = pipeline(&cands, &th, &order);
            prop_assert_eq!(ids(got.last().unwrap()), oracle(&g, ta, tc, ts, &order));
        }
    }

    #[test]
    fn stages_nest_and_pipeline_is_idempotent(g in proptest::collection::vec(raw_strategy(), 1..=20), ta in 0i64..=20, tc in 0i64..=100, ts in 0i64..=100) {
        let th = ThresholdSet { t_asr: ta as f64 / 1000.0, t_acc: tc as f64 / 1000.0, t_sc: ts as f64 / 100.0 };
        let cands = to_candidates(&g);
        for order in [RQ2_ORDER, RQ3_ORDER] {
            let stages = pipeline(&cands, &th, &order);
            let mut prev = ids(&cands);
            for s in &stages {
                let cur = ids(s);
                prop_assert!(cur.is_subset(&prev) && !cur.is_empty());
                prev = cur;
            }
            let again = pipeline(stages.last().unwrap(), &th, &order);
            prop_assert_eq!(ids(again.last().unwrap()), prev);
        }
    }

    #[test]
    fn each_filter_is_monotone_in_its_threshold(g in proptest::collection::vec(raw_strategy(), 1..=20), a in 0i64..=50, b in 0i64..=50) {
        let (lo, hi) = (a.min(b), a.max(b));
        let c = to_candidates(&g);
        let f = |x: i64| x as f64 / 1000.0;
        prop_assert!(ids(&filter_asr(&c, f(lo))).is_subset(&ids(&filter_asr(&c, f(hi)))));
        prop_assert!(ids(&filter_acc(&c, f(lo))).is_subset(&ids(&filter_acc(&c, f(hi)))));
        let single = |t: f64| filter_cost(&c, t, |x| x.comm_bytes);
        prop_assert!(ids(&single(lo as f64 / 50.0)).is_subset(&ids(&single(hi as f64 / 50.0))));
    }
}
