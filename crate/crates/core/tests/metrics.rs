mod common;

use bottrans_core::eval::{auc_roc, f1_score, hard_labels, refine, Confusion, ScoreScaling};
use bottrans_core::experiment::{run_task_suite, task_sources, Variant};
use bottrans_core::synthgen::{DomainSpec, SuiteSpec};
use bottrans_core::train::TrainConfig;
use bottrans_core::Label;
use common::{auc_oracle, confusion_oracle, f1_oracle, metric_instance, rng};
use proptest::prelude::*;

#[test]
fn metrics_match_brute_force() {
    let r = &mut rng(77);
    for _ in 0..100 {
        let (labels, scores) = metric_instance(r);
        let c = Confusion::new(&labels, &hard_labels(&scores)).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), confusion_oracle(&labels, &scores));
        assert_eq!(c.total(), labels.len());
        let f1 = f1_score(&labels, &hard_labels(&scores)).unwrap();
        assert!((f1 - f1_oracle(&labels, &scores)).abs() < 1e-15);
        assert!((auc_roc(&labels, &scores).unwrap() - auc_oracle(&labels, &scores)).abs() < 1e-12);
    }
}

#[test]
fn single_class_auc_is_an_error() {
    assert_eq!(auc_roc(&[Label::Human; 4], &[0.1, 0.2, 0.3, 0.4]).unwrap_err().class(), "input");
}

#[test]
fn task_source_selection() {
    assert_eq!(task_sources(4, 2).unwrap(), (vec![0, 1], vec![2, 3]));
    assert!(task_sources(3, 2).is_err());
}

#[test]
fn task_suite_rows_and_reproducibility() {
    let dom = DomainSpec {
        num_nodes: 50,
        feature_dim: 4,
        ..DomainSpec::default()
    };
    let suite = SuiteSpec {
        source: dom.clone(),
        target: dom,
        shifts: vec![0.0, 1.0, 2.0, 3.0],
        degree_spread: 0.1,
        seed: 0,
    };
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 16,
        hidden: 4,
        critic_steps: 1,
        ..TrainConfig::default()
    };
    let seeds = [0, 1, 2, 3, 4];
    let a = run_task_suite(&suite, &cfg, 2, &seeds, &[Variant::Base], ScoreScaling::MinMax).unwrap();
    for task in ["High-2", "Low-2"] {
        assert_eq!(a.rows.iter().filter(|r| r.task == task).count(), 5);
        assert!(a.summary.iter().any(|s| s.task == task && s.runs == 5));
    }
    assert!(a.to_csv().starts_with("task,seed,m,mode,f1,auc\n"));
    let b = run_task_suite(&suite, &cfg, 2, &seeds, &[Variant::Base], ScoreScaling::MinMax).unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
    assert_eq!(a.summary_json(), b.summary_json());
}

fn labeled_scores() -> impl Strategy<Value = (Vec<Label>, Vec<f64>)> {
    prop::collection::vec((any::<bool>(), 0.0..1.0f64), 2..40).prop_map(|v| {
        let mut labels: Vec<Label> = v.iter().map(|(b, _)| if *b { Label::Bot } else { Label::Human }).collect();
        labels[0] = Label::Bot;
        labels[1] = Label::Human;
        (labels, v.iter().map(|(_, s)| *s).collect())
    })
}

proptest! {
    #[test]
    fn auc_is_invariant_under_increasing_transforms((labels, scores) in labeled_scores()) {
        let a = auc_roc(&labels, &scores).unwrap();
        let t: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
        prop_assert!((a - auc_roc(&labels, &t).unwrap()).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn refine_is_monotone(
        probs in prop::collection::vec(0.0..1.0f64, 3..20),
        raw in prop::collection::vec(0.0..2.0f64, 3..20),
        lambda in 0.0..=1.0f64,
        i in any::<prop::sample::Index>(),
        dp in 0.0..0.5f64,
    ) {
        let n = probs.len().min(raw.len());
        let (probs, raw) = (&probs[..n], &raw[..n]);
        let i = i.index(n);
        let base = refine(probs, raw, lambda, ScoreScaling::MinMax).unwrap();
        for r in &base {
            prop_assert!((0.0..=1.0).contains(r));
        }
        let mut up = probs.to_vec();
        up[i] = (up[i] + dp).min(1.0);
        prop_assert!(refine(&up, raw, lambda, ScoreScaling::MinMax).unwrap()[i] >= base[i]);
        let mut raised = raw.to_vec();
        raised[i] += dp;
        for scaling in [ScoreScaling::MinMax, ScoreScaling::Raw] {
            let a = refine(probs, raw, lambda, scaling).unwrap();
            let b = refine(probs, &raised, lambda, scaling).unwrap();
            prop_assert!(b[i] >= a[i] - 1e-15);
        }
    }
}
