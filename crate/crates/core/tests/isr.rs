//! Reduction schedules, factorization and the evaluation sweep.

use efaseg::flops::model_cost;
use efaseg::harness::{evaluate, generate_dataset};
use efaseg::isr::{
    appendix_c_schedules, effective_ratios, format_schedule, parse_schedule, parse_schedule_list, render_sweep,
    robustness_schedules, sweep, Phase, Ratios, ReductionSchedule, DEFAULT_TRAIN, OPTIMAL_INFERENCE,
};
use efaseg::model::{EdaFormer, ModelConfig};
use efaseg::Error;
use proptest::prelude::*;

#[test]
fn effective_ratios_multiply_per_stage() {
    let s = ReductionSchedule::new(DEFAULT_TRAIN, Ratios { encoder: [2, 2, 1, 1], decoder: [2, 2, 2] }).unwrap();
    assert_eq!(effective_ratios(&s, Phase::Inference).unwrap(), ([16, 8, 2, 1], [2, 4, 8]));
    assert_eq!(effective_ratios(&s, Phase::Train).unwrap(), ([8, 4, 2, 1], [1, 2, 4]));
    let id = ReductionSchedule::training(DEFAULT_TRAIN).unwrap();
    assert!(id.is_identity());
    assert_eq!(id.effective_ratios(Phase::Inference).unwrap(), DEFAULT_TRAIN);
}

#[test]
fn non_positive_entries_are_config_errors() {
    let zero = Ratios { encoder: [8, 4, 0, 1], decoder: [1, 2, 4] };
    assert!(matches!(ReductionSchedule::new(zero, Ratios::ONES), Err(Error::Config(_))));
    assert!(matches!(ReductionSchedule::new(DEFAULT_TRAIN, zero), Err(Error::Config(_))));
    let stale = ReductionSchedule { train: DEFAULT_TRAIN, multipliers: zero };
    assert!(matches!(stale.effective_ratios(Phase::Inference), Err(Error::Config(_))));
    assert!(Ratios::new([1, 1, 1, 1], [1, 0, 1]).is_err());
}

#[test]
fn parsing_and_formatting() {
    let s = parse_schedule("[16,8,2,1]-[2,4,8]").unwrap();
    assert_eq!(s.train, OPTIMAL_INFERENCE);
    assert_eq!(format_schedule(&s, Phase::Train).unwrap(), "[16,8,2,1]-[2,4,8]");
    let f = ReductionSchedule::training(DEFAULT_TRAIN).unwrap().with_target(s.train).unwrap();
    assert_eq!(f.multipliers, Ratios { encoder: [2, 2, 1, 1], decoder: [2, 2, 2] });
    assert_eq!(parse_schedule("[1,1,1,1]-[1,1,1]").unwrap().train, Ratios::ONES);
    assert_eq!(parse_schedule(" [ 8, 4,2,1 ]-[ 1,2,4 ] ").unwrap().train, DEFAULT_TRAIN);
    for bad in ["[8,4]-[1]", "", "[8,4,2,1]", "[8,4,2,1]-[1,2,4] x", "[8,4,2,1]-[1,2,-4]", "(8,4,2,1)-[1,2,4]"] {
        assert!(matches!(parse_schedule(bad), Err(Error::Parse { .. })), "{bad:?}");
    }
    match parse_schedule("[8,4,2,1]-[1,2,4,8]") {
        Err(Error::Parse { pos, .. }) => assert_eq!(pos, 16),
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_lists_skip_comments_and_blank_lines() {
    let text = "# sweep\n[8,4,2,1]-[1,2,4]\n\n[16,8,2,1]-[2,4,8]  # optimal\n";
    assert_eq!(parse_schedule_list(text).unwrap(), vec![DEFAULT_TRAIN, OPTIMAL_INFERENCE]);
    assert!(parse_schedule_list("").unwrap().is_empty());
    assert!(parse_schedule_list("[8,4,2,1]-[1,2]").is_err());
}

#[test]
fn factorization_requires_integer_multiples() {
    let base = ReductionSchedule::training(DEFAULT_TRAIN).unwrap();
    let uneven_row = Ratios { encoder: [8, 4, 2, 1], decoder: [3, 6, 9] };
    assert!(matches!(base.with_target(uneven_row), Err(Error::Config(_))));
    let below = Ratios { encoder: [4, 4, 2, 1], decoder: [1, 2, 4] };
    assert!(matches!(base.with_target(below), Err(Error::Config(_))));
    for target in appendix_c_schedules().into_iter().chain(robustness_schedules()) {
        let s = base.with_target(target).unwrap();
        assert_eq!(s.effective_ratios(Phase::Inference).unwrap(), target);
    }
}

#[test]
fn appendix_c_list() {
    let rows = appendix_c_schedules();
    assert_eq!(rows.len(), 20);
    assert_eq!(rows[0], DEFAULT_TRAIN);
    assert!(rows.contains(&OPTIMAL_INFERENCE));
    assert_eq!(rows[19].to_string(), "[16,8,4,2]-[2,4,8]");
}

fn ratios_strategy() -> impl Strategy<Value = Ratios> {
    (prop::array::uniform4(1usize..64), prop::array::uniform3(1usize..64))
        .prop_map(|(encoder, decoder)| Ratios { encoder, decoder })
}

proptest! {
    #[test]
    fn text_round_trip(r in ratios_strategy()) {
        let s = ReductionSchedule::training(r).unwrap();
        let text = format_schedule(&s, Phase::Train).unwrap();
        prop_assert_eq!(parse_schedule(&text).unwrap(), s);
    }

    #[test]
    fn factorization_round_trip(t in ratios_strategy(), a in ratios_strategy()) {
        let s = ReductionSchedule::new(t, a).unwrap();
        let target = s.effective_ratios(Phase::Inference).unwrap();
        prop_assert_eq!(ReductionSchedule::training(t).unwrap().with_target(target).unwrap(), s);
    }
}

#[test]
fn attention_macs_fall_as_any_single_multiplier_rises() {
    let cfg = ModelConfig::nano(3);
    let base = cfg.schedule();
    // At 128×128 every stage grid is at least 4×4.
    let (h, w) = (128, 128);
    for stage in 0..7 {
        let mut prev = u64::MAX;
        for a in 1..=4 {
            let mut m = [1usize; 7];
            m[stage] = a;
            let s = ReductionSchedule {
                multipliers: Ratios { encoder: [m[0], m[1], m[2], m[3]], decoder: [m[4], m[5], m[6]] },
                ..base
            };
            let macs = model_cost(&cfg, &s, Phase::Inference, h, w).unwrap().attention_macs();
            assert!(macs <= prev, "stage {stage} a={a}");
            if a == 2 {
                assert!(macs < prev, "stage {stage}: doubling the ratio must remove tokens");
            }
            prev = macs;
        }
    }
}

fn small_setup() -> (EdaFormer, Vec<efaseg::harness::SyntheticScene>) {
    let model = EdaFormer::new(ModelConfig::nano(3), 11).unwrap();
    let data = generate_dataset(4, 64, 64, 3, 5).unwrap();
    (model, data)
}

#[test]
fn sweep_reports_baseline_then_requested_rows_without_touching_weights() {
    let (model, data) = small_setup();
    let before = model.to_checkpoint(0, 0).digest().unwrap();
    let schedules = appendix_c_schedules();
    let report = sweep(&model, &schedules, &data).unwrap();
    assert_eq!(model.to_checkpoint(0, 0).digest().unwrap(), before);

    assert_eq!(report.rows.len(), 20);
    assert_eq!(report.baseline.schedule, DEFAULT_TRAIN.to_string());
    for (row, s) in report.rows.iter().zip(&schedules) {
        assert_eq!(row.schedule, s.to_string());
        assert!((0.0..=1.0).contains(&row.miou));
        assert!(row.attention_macs <= report.baseline.attention_macs);
    }
    // The first listed schedule is the training schedule itself.
    assert_eq!(report.rows[0].miou, report.baseline.miou);
    assert_eq!(report.rows[0].miou_delta, 0.0);
    assert_eq!(report.rows[0].attention_macs_delta, 0.0);

    let train_eval = evaluate(&model, &data, &model.config.schedule(), Phase::Train).unwrap();
    assert_eq!(report.baseline.miou, train_eval.miou);
    assert_eq!(report.baseline.pixel_accuracy, train_eval.pixel_accuracy);

    let text = render_sweep(&report);
    assert_eq!(text.lines().count(), 2 + 21);
    assert!(text.contains("[16,8,2,1]-[2,4,8]"));
}

#[test]
fn sweep_errors() {
    let (model, data) = small_setup();
    let bad = Ratios { encoder: [4, 4, 2, 1], decoder: [1, 2, 4] };
    assert!(matches!(sweep(&model, &[bad], &data), Err(Error::Config(_))));
    assert!(matches!(sweep(&model, &[OPTIMAL_INFERENCE], &[]), Err(Error::Usage(_))));
    let empty = sweep(&model, &[], &data).unwrap();
    assert!(empty.rows.is_empty());
}
