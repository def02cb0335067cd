use std::path::Path;

use dpft_accountant::{epsilon, MechanismSpec, Method};
use dpft_core::checkpoint::{load_checkpoint, save_checkpoint};
use dpft_core::model::{build_model, ModelConfig};
use dpft_core::optim::OptimConfig;
use dpft_core::peft::plugin::import_adapter;
use dpft_core::peft::{planned_count, PeftSpec};
use dpft_core::rng;
use dpft_harness::data::{draw, oracle_label, MOTIF};
use dpft_harness::report::{collect, read_metrics, report, REPORT_CSV};
use dpft_harness::train::{METRICS_FILE, RUN_FILE};
use dpft_harness::{
    desk_config, evaluate, finetune, generate_dataset, generate_split, pretrain, ExperimentConfig, HarnessError,
    PrivacyConfig, RgpConfig, RunMethod, Split, Task,
};

fn small(dir: &Path) -> ExperimentConfig {
    let mut cfg = desk_config(dir);
    cfg.model = ModelConfig { d_model: 16, n_heads: 2, n_layers: 1, d_ffn: 32, max_seq_len: 8, ..ModelConfig::tiny(3) };
    cfg.n_public = 300;
    cfg.n_private = 200;
    cfg.n_test = 100;
    cfg.epochs = 2;
    cfg.pretrain.epochs = 1;
    cfg.optimizer = OptimConfig::adamw(1e-2, 0.0);
    cfg
}

fn private(sigma: f64, batch: usize) -> PrivacyConfig {
    PrivacyConfig {
        clip_norm: 1.0,
        noise_multiplier: Some(sigma),
        target_epsilon: None,
        delta: 1e-5,
        expected_batch: batch,
        accountant: Method::Prv,
    }
}

// ---- datasets ----

#[test]
fn datasets_are_deterministic_per_seed_and_split() {
    for task in [Task::PatternClassify, Task::Majority, Task::HeldOutEval] {
        let a = generate_split(task, Split::Private, 500, 12, 16, 4).unwrap();
        let b = generate_split(task, Split::Private, 500, 12, 16, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, generate_split(task, Split::Private, 500, 12, 16, 5).unwrap());
        assert_ne!(a, generate_split(task, Split::Test, 500, 12, 16, 4).unwrap());
        let f = a.positive_fraction();
        assert!((0.4..=0.6).contains(&f), "{task:?}: {f}");
    }
    assert_eq!(
        generate_dataset(Task::Majority, 50, 8, 8, 1).unwrap(),
        generate_split(Task::Majority, Split::Public, 50, 8, 8, 1).unwrap()
    );
}

#[test]
fn planting_the_motif_everywhere_labels_everything_positive() {
    let mut r = rng::stream(1, "t");
    for task in [Task::PatternClassify, Task::HeldOutEval] {
        let d = draw(task, Split::Public, 300, 10, 12, 1.0, &mut r);
        assert!(d.labels.iter().all(|&l| l == 1));
        let d = draw(task, Split::Public, 300, 10, 12, 0.0, &mut r);
        assert!(d.labels.iter().all(|&l| l == 0));
    }
}

#[test]
fn motif_scan_is_a_perfect_classifier() {
    let d = generate_split(Task::PatternClassify, Split::Test, 10_000, 16, 64, 0).unwrap();
    let hits = (0..d.len())
        .filter(|&i| {
            let row = &d.inputs.ids[i * 16..(i + 1) * 16];
            // Independent scan, not the library's labelling rule.
            let found = (0..14).any(|s| row[s] == MOTIF[0] && row[s + 1] == MOTIF[1] && row[s + 2] == MOTIF[2]);
            found as usize == d.labels[i]
        })
        .count();
    assert_eq!(hits, 10_000);
}

#[test]
fn majority_label_is_parity_of_the_most_frequent_token() {
    assert_eq!(oracle_label(Task::Majority, &[3, 3, 2, 5], 8), 1);
    assert_eq!(oracle_label(Task::Majority, &[4, 4, 4, 1, 1], 8), 0);
    // A tie goes to the smaller token id.
    assert_eq!(oracle_label(Task::Majority, &[5, 2, 5, 2], 8), 0);
    assert_eq!(oracle_label(Task::Majority, &[7, 1, 1, 7], 8), 1);
}

#[test]
fn held_out_split_moves_the_motif_to_the_second_half() {
    let seq = 12;
    let half = (seq - 3) / 2;
    let train = generate_split(Task::HeldOutEval, Split::Private, 400, seq, 32, 2).unwrap();
    let test = generate_split(Task::HeldOutEval, Split::Test, 400, seq, 32, 2).unwrap();
    let starts = |ids: &[usize]| (0..seq - 2).filter(|&s| ids[s..s + 3] == MOTIF).collect::<Vec<_>>();
    let mut test_early = 0;
    for i in 0..400 {
        let s = starts(&train.inputs.ids[i * seq..(i + 1) * seq]);
        if train.labels[i] == 1 {
            assert!(s[0] <= half, "{s:?}");
        } else {
            assert!(s.is_empty());
        }
        let s = starts(&test.inputs.ids[i * seq..(i + 1) * seq]);
        if test.labels[i] == 1 {
            assert!(s.iter().any(|&x| x > half), "{s:?}");
            test_early += (s[0] <= half) as usize;
        }
    }
    // Chance occurrences of a 3-token motif over 32 tokens are rare.
    assert!(test_early < 10, "{test_early}");
}

#[test]
fn unbalanceable_requests_fail() {
    match generate_split(Task::PatternClassify, Split::Public, 1, 8, 8, 0) {
        Err(HarnessError::Config(m)) => assert!(m.contains("100 attempts"), "{m}"),
        other => panic!("expected a config error, got {other:?}"),
    }
    assert!(generate_split(Task::PatternClassify, Split::Public, 10, 3, 8, 0).is_err());
    assert!(generate_split(Task::PatternClassify, Split::Public, 10, 8, 3, 0).is_err());
}

// ---- pre-training ----

#[test]
fn zero_epoch_pretraining_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.pretrain.epochs = 0;
    let out = pretrain(&cfg).unwrap();
    let init = build_model(&cfg.model).unwrap();
    assert_eq!(load_checkpoint(&out.checkpoint).unwrap(), init);
    assert!(out.records.is_empty());
    assert!((0.0..=1.0).contains(&out.test_accuracy));
}

#[test]
fn pretraining_is_reproducible() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let a = pretrain(&small(d1.path())).unwrap();
    let b = pretrain(&small(d2.path())).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.records, b.records);
    assert_ne!(a.model, build_model(&small(d1.path()).model).unwrap());
    assert_eq!(std::fs::read(&a.checkpoint).unwrap(), std::fs::read(&b.checkpoint).unwrap());
}

#[test]
fn pretraining_learns_the_motif_task() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.n_public = 3000;
    cfg.n_test = 500;
    cfg.pretrain.epochs = 4;
    let out = pretrain(&cfg).unwrap();
    assert!(out.test_accuracy > 0.8, "{}", out.test_accuracy);
}

#[test]
fn divergence_is_a_numeric_error_naming_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.pretrain.optimizer = OptimConfig::sgd(1e300);
    match pretrain(&cfg) {
        Err(HarnessError::Numeric(m)) => {
            assert!(m.contains("last good step"), "{m}");
            assert_eq!(HarnessError::Numeric(m).exit_code(), 3);
        }
        other => panic!("expected divergence, got {:?}", other.map(|o| o.test_accuracy)),
    }
}

// ---- fine-tuning ----

#[test]
fn private_epsilon_is_non_decreasing_and_matches_the_accountant() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.peft = Some(PeftSpec::lora(2));
    cfg.dp = Some(private(1.1, 40));
    cfg.epochs = 3;
    let base = build_model(&cfg.model).unwrap();
    let out = finetune(&cfg, base).unwrap();
    assert_eq!(out.records.len(), 3);
    let q = 40.0 / 200.0;
    let mut last = 0.0;
    for r in &out.records {
        let eps = r.epsilon_spent.unwrap();
        assert!(eps >= last);
        last = eps;
        let want = epsilon(&MechanismSpec::new(q, 1.1, r.step).unwrap(), 1e-5, Method::Prv).unwrap();
        assert_eq!(eps, want.epsilon);
        assert!((0.0..=1.0).contains(&r.eval_accuracy));
    }
    assert_eq!(out.info.steps, 15);
    assert_eq!(out.info.epsilon, Some(last));
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.records);
}

#[test]
fn calibrated_run_reports_epsilon_within_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.peft = Some(PeftSpec::lora(2));
    cfg.dp = Some(PrivacyConfig { noise_multiplier: None, target_epsilon: Some(6.7), ..private(1.0, 40) });
    let out = finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
    let eps = out.info.epsilon.unwrap();
    assert!(eps <= 6.7 + 0.01 && eps > 6.6, "{eps}");
    assert!(out.info.private);
}

#[test]
fn fine_tuning_is_byte_for_byte_reproducible() {
    for method in [RunMethod::Lora, RunMethod::Rgp, RunMethod::Full] {
        let run = |dir: &Path| {
            let mut cfg = small(dir);
            cfg.dp = Some(private(1.0, 40));
            match method {
                RunMethod::Lora => cfg.peft = Some(PeftSpec::lora(2)),
                RunMethod::Rgp => cfg.rgp = Some(RgpConfig { rank: 2, power_iters: 2 }),
                _ => {}
            }
            finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
            (std::fs::read(dir.join(METRICS_FILE)).unwrap(), std::fs::read(dir.join(RUN_FILE)).unwrap())
        };
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        assert_eq!(run(d1.path()), run(d2.path()), "{method:?}");
    }
}

#[test]
fn peft_fine_tuning_leaves_the_base_untouched() {
    for spec in [PeftSpec::lora(2), PeftSpec::adapter(4), PeftSpec::compacter(4, 2, 1)] {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small(dir.path());
        cfg.peft = Some(spec.clone());
        cfg.dp = Some(private(1.0, 40));
        let base = build_model(&cfg.model).unwrap();
        let out = finetune(&cfg, base.clone()).unwrap();
        let back = import_adapter(base.clone(), &out.artifact).unwrap();
        // The plug-in reproduces the fine-tuned network exactly.
        let test = generate_split(cfg.task, Split::Test, cfg.n_test, 8, 64, cfg.seed).unwrap();
        assert_eq!(evaluate(&back, &test).unwrap(), out.info.test_accuracy);
        for p in base.params.iter() {
            let now = back.base.params.get(&p.name).unwrap();
            let is_ln = p.name.contains("ln");
            let trained_ln = is_ln && spec.method != dpft_core::peft::Method::Lora;
            if !trained_ln {
                assert!(
                    p.value.data().iter().zip(now.value.data()).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "{:?} changed {}",
                    spec.method,
                    p.name
                );
            }
        }
        assert_eq!(out.info.trainable_params, planned_count(&cfg.model, Some(&spec)).unwrap().count);
    }
}

#[test]
fn non_private_runs_have_no_epsilon() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.peft = Some(PeftSpec::lora(2));
    let out = finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
    assert!(!out.info.private);
    assert!(out.info.epsilon.is_none() && out.info.sigma.is_none());
    assert!(out.records.iter().all(|r| r.epsilon_spent.is_none()));
    // ⌈200 / 32⌉ shuffled minibatches per epoch
    assert_eq!(out.info.steps, 2 * 7);
}

#[test]
fn rgp_runs_report_stable_ranks_and_save_a_model() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.rgp = Some(RgpConfig { rank: 2, power_iters: 2 });
    cfg.dp = Some(private(1.0, 40));
    let out = finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
    let ranks = out.info.rgp_stable_rank.as_ref().unwrap();
    assert_eq!(ranks.len(), 6);
    assert!(ranks.values().all(|&s| s >= 1.0 - 1e-9));
    assert_eq!(load_checkpoint(&out.artifact).unwrap().config, cfg.model);
}

#[test]
fn incompatible_checkpoint_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let other = build_model(&ModelConfig { d_ffn: 48, ..cfg.model.clone() }).unwrap();
    let err = finetune(&cfg, other).unwrap_err();
    assert!(matches!(err, HarnessError::Io(_)), "{err:?}");
    assert_eq!(err.exit_code(), 4);
    // A different init seed is the same architecture.
    let reseeded = build_model(&ModelConfig { seed: 99, ..cfg.model.clone() }).unwrap();
    assert!(finetune(&cfg, reseeded).is_ok());
}

#[test]
fn timing_is_only_recorded_on_request() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small(dir.path());
    cfg.epochs = 1;
    let out = finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
    assert!(out.records[0].wall_ms.is_none());
    assert!(!std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap().contains("wall_ms"));
    cfg.record_timing = true;
    let out = finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
    assert!(out.records[0].wall_ms.is_some());
}

// ---- configs ----

#[test]
fn config_round_trips_and_rejects_unknown_keys() {
    let mut cfg = desk_config("runs/x");
    cfg.peft = Some(PeftSpec::lora(4));
    cfg.dp = Some(private(0.9, 100));
    let text = cfg.to_json();
    assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
    let typo = text.replacen("\"clip_norm\"", "\"clip_nrom\"", 1);
    assert!(matches!(ExperimentConfig::from_json(&typo), Err(HarnessError::Config(_))));
}

#[test]
fn config_validation() {
    let check = |f: &dyn Fn(&mut ExperimentConfig)| {
        let mut cfg = desk_config("x");
        f(&mut cfg);
        match cfg.validate() {
            Err(e) => e.exit_code(),
            Ok(()) => 0,
        }
    };
    assert_eq!(check(&|_| {}), 0);
    assert_eq!(check(&|c| c.n_test = 0), 2);
    assert_eq!(check(&|c| c.model.n_classes = 3), 2);
    assert_eq!(check(&|c| c.dp = Some(private(1.0, 5000))), 2);
    assert_eq!(check(&|c| c.dp = Some(PrivacyConfig { target_epsilon: Some(3.0), ..private(1.0, 10) })), 2);
    assert_eq!(check(&|c| c.dp = Some(PrivacyConfig { noise_multiplier: None, ..private(1.0, 10) })), 2);
    assert_eq!(
        check(&|c| {
            c.peft = Some(PeftSpec::lora(2));
            c.rgp = Some(RgpConfig { rank: 2, power_iters: 1 });
        }),
        2
    );
    assert_eq!(check(&|c| c.rgp = Some(RgpConfig { rank: 33, power_iters: 1 })), 2);
    assert_eq!(
        check(&|c| {
            c.dp = Some(private(1.0, 10));
            c.epochs = 0;
        }),
        2
    );
}

// ---- reports ----

fn finished_run(dir: &Path, peft: Option<PeftSpec>, dp: bool) -> ExperimentConfig {
    let mut cfg = small(dir);
    cfg.epochs = 1;
    cfg.peft = peft;
    if dp {
        cfg.dp = Some(private(1.0, 40));
    }
    finetune(&cfg, build_model(&cfg.model).unwrap()).unwrap();
    cfg
}

#[test]
fn empty_directory_gives_an_empty_report() {
    let dir = tempfile::tempdir().unwrap();
    assert!(report(dir.path()).unwrap().is_empty());
    let csv = std::fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1);
}

#[test]
fn report_rows_are_sorted_and_carry_trainable_fractions() {
    let dir = tempfile::tempdir().unwrap();
    let lora = finished_run(&dir.path().join("b-run"), Some(PeftSpec::lora(2)), true);
    let adapter = finished_run(&dir.path().join("a-run"), Some(PeftSpec::adapter(2)), false);
    let rows = report(dir.path()).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].method, RunMethod::Adapter);
    assert_eq!(rows[1].method, RunMethod::Lora);
    assert_eq!(rows[0].trainable_fraction, planned_count(&adapter.model, adapter.peft.as_ref()).unwrap().fraction);
    assert_eq!(rows[1].trainable_fraction, planned_count(&lora.model, lora.peft.as_ref()).unwrap().fraction);
    assert!(rows[0].epsilon.is_none() && !rows[0].private);
    assert!(rows[1].epsilon.unwrap() > 0.0);
    assert_eq!(rows[1].delta, Some(1e-5));
    let csv = std::fs::read_to_string(dir.path().join(REPORT_CSV)).unwrap();
    assert!(csv.lines().nth(1).unwrap().starts_with("a-run,adapter,false,"));
}

#[test]
fn malformed_metrics_line_is_reported_by_number() {
    let dir = tempfile::tempdir().unwrap();
    finished_run(dir.path(), None, false);
    let path = dir.path().join(METRICS_FILE);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"epoch\": oops}\n");
    std::fs::write(&path, text).unwrap();
    match collect(dir.path()) {
        Err(HarnessError::Io(m)) => assert!(m.contains("metrics.jsonl:2:"), "{m}"),
        other => panic!("expected a parse error, got {other:?}"),
    }
}

#[test]
fn fine_tuned_checkpoint_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(dir.path());
    let base = build_model(&cfg.model).unwrap();
    let path = dir.path().join("base.dpft");
    save_checkpoint(&base, &path).unwrap();
    let out = dpft_harness::finetune_from_checkpoint(&cfg, &path).unwrap();
    assert_eq!(out.info.method, RunMethod::Full);
    assert_eq!(out.info.trainable_fraction, 1.0);
}
