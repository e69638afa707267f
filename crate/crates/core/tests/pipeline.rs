use metadiag::data::{generate_family, SyntheticWorldConfig, TaskUnit};
use metadiag::eval::{
    ensure_split, fit_unit, initial_params, metric_rows, read_metrics_csv, run_continual_from,
    write_metrics_csv, Metric, PipelineConfig,
};
use metadiag::meta::MetaConfig;
use metadiag::params::ParamSet;
use metadiag::ppm::ImportanceMap;

fn small_config() -> PipelineConfig {
    PipelineConfig {
        meta: MetaConfig {
            meta_epochs: 40,
            samples_per_unit: 64,
            fine_tune_steps: 20,
            ..MetaConfig::default()
        },
        sequence_steps: 20,
        ..PipelineConfig::default()
    }
}

fn units(n: usize, seed: u64, config: &PipelineConfig) -> Vec<TaskUnit> {
    let world = SyntheticWorldConfig {
        num_students: 20,
        num_questions: 25,
        num_skills: 5,
        records_target: 400,
        rng_seed: seed,
        ..Default::default()
    };
    let fam: Vec<TaskUnit> = generate_family(&world, n)
        .unwrap()
        .into_iter()
        .map(|u| u.unit)
        .collect();
    ensure_split(&fam, &config.meta).unwrap()
}

#[test]
fn repeating_one_task_neither_forgets_nor_gains_much() {
    let config = small_config();
    let pool = units(3, 5, &config);
    let task = pool[2].clone();
    let sequence: Vec<TaskUnit> = (0..4)
        .map(|i| TaskUnit {
            id: format!("repeat_{i}"),
            ..task.clone()
        })
        .collect();
    let arch = config.model.architecture(pool.iter()).unwrap();
    let init = initial_params(&pool[..2], &arch, &config).unwrap();
    let out = run_continual_from(&init, &pool[..2], &sequence, &config, true, Metric::Acc).unwrap();
    assert!(out.bwt.abs() <= 0.02, "bwt {}", out.bwt);
}

#[test]
fn fitted_state_round_trips_through_disk() {
    let config = small_config();
    let pool = units(3, 8, &config);
    let arch = config.model.architecture(pool.iter()).unwrap();
    let init = initial_params(&pool[..2], &arch, &config).unwrap();
    let imp = metadiag::eval::pool_importance(&init, &pool[..2], 32)
        .unwrap()
        .unwrap();
    let fitted = fit_unit(&init, &pool[2], &config, Some(&imp)).unwrap();
    let dir = tempfile::tempdir().unwrap();

    fitted.kb.save(&dir.path().join("kb.bin")).unwrap();
    fitted.kb.save_json(&dir.path().join("kb.json")).unwrap();
    assert_eq!(
        ParamSet::load(&dir.path().join("kb.bin")).unwrap(),
        fitted.kb
    );
    assert_eq!(
        ParamSet::load_json(&dir.path().join("kb.json")).unwrap(),
        fitted.kb
    );

    imp.save(&dir.path().join("imp.bin")).unwrap();
    assert_eq!(
        ImportanceMap::load(&dir.path().join("imp.bin")).unwrap(),
        imp
    );

    let heads = fitted.heads.as_ref().unwrap();
    let text = serde_json::to_string(heads).unwrap();
    assert_eq!(
        &serde_json::from_str::<metadiag::eval::Heads>(&text).unwrap(),
        heads
    );

    let preds = fitted.predict(&pool[2], &pool[2].query).unwrap();
    let rows = metric_rows("r1", "full", &pool[2].id, &preds);
    let path = dir.path().join("metrics.csv");
    write_metrics_csv(&rows, &path).unwrap();
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
}
