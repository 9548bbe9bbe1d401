use std::fs;

use mcpersona::data::io::{load_scenario, save_scenario};
use mcpersona::data::{build_all, generate_synthetic_scenario, DataConfig, JointMode, ScenarioSpec, TemplatePool};
use mcpersona::eval::{compose_suite, evaluate, grounding_banks};
use mcpersona::grounding::GroundingConfig;
use mcpersona::persist::{
    bundled_base, decode_base, encode_base, load_banks, load_base, load_checkpoint, save_banks, save_base,
    save_checkpoint,
};
use mcpersona::trainer::{train, InitMode, TrainConfig};

#[test]
fn checkpoint_round_trip_reproduces_scores_bit_for_bit() {
    let (model, tcfg) = bundled_base().unwrap();
    let tower = tcfg.build(model.dim());
    let scenario = generate_synthetic_scenario(&ScenarioSpec::new(2, 2, 21)).unwrap();
    let samples: Vec<_> = build_all(&scenario, &TemplatePool::default(), &DataConfig { joint_mode: JointMode::Base, seed: 0 })
        .unwrap()
        .into_iter()
        .step_by(8)
        .collect();
    let cfg = TrainConfig { epochs: 1, k: 4, n: 2, init: InitMode::Kmeans, ..Default::default() };
    let ckpt = train(&model, &tower, &scenario, &samples, &cfg).unwrap();
    let suite = compose_suite(&scenario).unwrap();
    let gcfg = GroundingConfig::default();
    let (mem, mem_audit) = evaluate(&model, &tower, &scenario, &ckpt.theta, &suite, &gcfg, 2, 0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&ckpt, dir.path(), "seed-0").unwrap();
    save_scenario(&scenario, &dir.path().join("scenario")).unwrap();
    let loaded = load_checkpoint(dir.path(), "seed-0").unwrap();
    assert_eq!(loaded, ckpt);
    let scenario2 = load_scenario(&dir.path().join("scenario")).unwrap();
    let (disk, disk_audit) = evaluate(&model, &tower, &scenario2, &loaded.theta, &suite, &gcfg, 2, 0).unwrap();
    assert_eq!(serde_json::to_string(&mem).unwrap(), serde_json::to_string(&disk).unwrap());
    assert_eq!(mem.recognition_overall.to_bits(), disk.recognition_overall.to_bits());
    assert_eq!(mem_audit, disk_audit);
}

#[test]
fn banks_and_base_round_trip() {
    let (model, tcfg) = bundled_base().unwrap();
    let tower = tcfg.build(model.dim());
    let scenario = generate_synthetic_scenario(&ScenarioSpec::new(3, 2, 2)).unwrap();
    let banks = grounding_banks(&tower, &scenario, 2).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_banks(&banks, dir.path(), "banks").unwrap();
    assert_eq!(load_banks(dir.path(), "banks").unwrap(), banks);

    let path = dir.path().join("base.bin");
    save_base(&model, &tcfg, &path).unwrap();
    let (again, tcfg2) = load_base(&path).unwrap();
    assert_eq!(again, model);
    assert_eq!(tcfg2, tcfg);
    assert_eq!(encode_base(&again, &tcfg2), fs::read(&path).unwrap());
    // no partial files are left behind
    let names: Vec<_> = fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert!(names.iter().all(|n| !n.to_string_lossy().ends_with(".partial")));
}

#[test]
fn corrupted_files_are_rejected() {
    let (model, tcfg) = bundled_base().unwrap();
    let mut bytes = encode_base(&model, &tcfg);
    assert!(decode_base(&bytes[..bytes.len() - 3]).is_err());
    bytes[0] ^= 0xFF;
    assert!(decode_base(&bytes).is_err());

    let dir = tempfile::tempdir().unwrap();
    assert!(load_checkpoint(dir.path(), "missing").is_err());
    assert!(load_banks(dir.path(), "missing").is_err());
    let scenario = generate_synthetic_scenario(&ScenarioSpec::new(1, 1, 0)).unwrap();
    let tower = tcfg.build(model.dim());
    let samples = build_all(&scenario, &TemplatePool::default(), &DataConfig { joint_mode: JointMode::Base, seed: 0 }).unwrap();
    let cfg = TrainConfig { epochs: 1, k: 2, n: 1, ..Default::default() };
    let ckpt = train(&model, &tower, &scenario, &samples[..3], &cfg).unwrap();
    save_checkpoint(&ckpt, dir.path(), "c").unwrap();
    let bin = dir.path().join("c.bin");
    let data = fs::read(&bin).unwrap();
    fs::write(&bin, &data[..data.len() - 4]).unwrap();
    assert!(load_checkpoint(dir.path(), "c").is_err());
    fs::write(&bin, &data).unwrap();
    let json = dir.path().join("c.json");
    let text = fs::read_to_string(&json).unwrap();
    fs::write(&json, text.replace("mcpersona-checkpoint", "something-else")).unwrap();
    assert!(load_checkpoint(dir.path(), "c").is_err());
}
