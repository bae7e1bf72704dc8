use tiergate::sim::{run, Policy};
use tiergate::{Overrides, Phase, Scenario};

fn short() -> Scenario {
    Scenario::builtin("table3")
        .unwrap()
        .with_overrides(&Overrides {
            warmup_steps: Some(30),
            ..Overrides::default()
        })
        .unwrap()
}

#[test]
fn policies_on_one_seed_see_the_same_queries_and_network() {
    let s = short();
    let runs: Vec<_> = [
        Policy::SafeObo,
        Policy::UniformRandom,
        Policy::Oracle,
        Policy::AlwaysArm("3b-llm-only".into()),
    ]
    .iter()
    .map(|p| run(&s, p, 5, 80).unwrap())
    .collect();
    for t in 0..80 {
        let first = &runs[0].records[t].context;
        for other in &runs[1..] {
            let c = &other.records[t].context;
            assert_eq!(c.cloud_delay_s, first.cloud_delay_s);
            assert_eq!(c.multi_hop, first.multi_hop);
            assert_eq!(c.query_len_tokens, first.query_len_tokens);
            assert_eq!(c.entity_count, first.entity_count);
        }
    }
}

#[test]
fn same_arm_same_step_same_outcome_across_policies() {
    let s = short();
    let a = run(&s, &Policy::AlwaysArm("72b-graphrag".into()), 2, 60).unwrap();
    let b = run(&s, &Policy::UniformRandom, 2, 60).unwrap();
    let mut shared = 0;
    for (x, y) in a.records.iter().zip(&b.records) {
        if x.arm == y.arm && x.context == y.context {
            assert_eq!(x.outcome, y.outcome);
            shared += 1;
        }
    }
    assert!(shared > 0);
}

#[test]
fn records_are_consistent_with_the_summary() {
    let s = short();
    let out = run(&s, &Policy::SafeObo, 9, 100).unwrap();
    assert_eq!(out.records.len(), 100);
    assert_eq!(out.summary.arm_counts.values().sum::<u64>(), 100);
    assert_eq!(out.summary.warmup.steps, 30);
    assert_eq!(out.summary.exploit.steps, 70);
    for (i, r) in out.records.iter().enumerate() {
        assert_eq!(r.step, i as u64 + 1);
        assert_eq!(
            r.phase,
            if i < 30 {
                Phase::Warmup
            } else {
                Phase::Exploit
            }
        );
        assert!(r.safe_set_size >= 1);
        assert!(
            (r.outcome.total_cost - r.outcome.resource_cost_tflops - r.outcome.time_cost_tflops)
                .abs()
                < 1e-9
        );
        assert_eq!(
            r.delay_violation,
            r.outcome.delay_s > s.gate.qos.max_delay_s
        );
    }
}

#[test]
fn baselines_report_no_safe_set() {
    let out = run(&short(), &Policy::UniformRandom, 1, 20).unwrap();
    assert!(out.records.iter().all(|r| r.safe_set_size == 0));
}

#[test]
fn oracle_respects_qos_in_expectation() {
    let s = short();
    let out = run(&s, &Policy::Oracle, 4, 200).unwrap();
    for r in &out.records {
        let arm = r.arm_index;
        let acc = s.env.expected_accuracy(arm, &r.context);
        let delay = s.env.expected_delay(arm, &r.context);
        let feasible = acc >= s.gate.qos.min_accuracy && delay <= s.gate.qos.max_delay_s;
        // falls back to the most accurate arm when nothing qualifies
        assert!(feasible || r.arm == "72b-graphrag", "{r:?}");
    }
}

#[test]
fn zero_steps_is_an_error() {
    assert!(run(&short(), &Policy::SafeObo, 0, 0).is_err());
}

#[test]
fn unknown_arm_is_an_error() {
    assert!(run(&short(), &Policy::AlwaysArm("nope".into()), 0, 5).is_err());
}
