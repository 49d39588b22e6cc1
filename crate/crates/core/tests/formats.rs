use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use adavi_core::checkpoint::{Checkpoint, Entry};
use adavi_core::config::{parse_config, parse_train_config, zoo_config};
use adavi_core::dataset::{dataset_to_json, load_dataset, parse_dataset, save_dataset};
use adavi_core::family::DualFamily;
use adavi_core::params::ParamGroup;
use adavi_core::rng::{streams, Rng, RngPosition};
use adavi_core::train::{simulate_dataset, train, Dataset, LossKind, Stage};
use adavi_core::{Error, Tensor};
use proptest::prelude::*;

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn seeds(dir: &str) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<_> = fs::read_dir(workspace().join("fuzz/corpus").join(dir))
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&p).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds in {dir}");
    out
}

fn expect_ok(name: &str) -> bool {
    !(name.contains("bad") || name.contains("truncated"))
}

#[test]
fn fuzz_seeds_decode_as_labelled() {
    for (name, bytes) in seeds("model_config") {
        let r = parse_config(std::str::from_utf8(&bytes).unwrap()).and_then(|c| c.validate());
        assert_eq!(r.is_ok(), expect_ok(&name), "{name}: {r:?}");
    }
    for (name, bytes) in seeds("train_config") {
        let r = parse_train_config(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(r.is_ok(), expect_ok(&name), "{name}: {r:?}");
    }
    for (name, bytes) in seeds("dataset") {
        let r = parse_dataset(std::str::from_utf8(&bytes).unwrap());
        assert_eq!(r.is_ok(), expect_ok(&name), "{name}: {r:?}");
    }
    for (name, bytes) in seeds("checkpoint") {
        match Checkpoint::from_bytes(&bytes) {
            Ok(ck) => {
                assert!(expect_ok(&name), "{name} decoded");
                assert_eq!(ck.to_bytes(), bytes);
            }
            Err(e) => assert!(!expect_ok(&name), "{name}: {e}"),
        }
    }
}

#[test]
fn shipped_model_files_match_the_zoo() {
    for model in ["gre", "nc", "gm"] {
        let text = fs::read_to_string(workspace().join(format!("models/{model}.json"))).unwrap();
        let cfg = parse_config(&text).unwrap();
        let zoo = zoo_config(model).unwrap();
        assert_eq!(cfg, zoo);
        assert_eq!(cfg.digest(), zoo.digest());
        assert_eq!(parse_config(&cfg.to_json()).unwrap(), cfg);
    }
}

#[test]
fn digest_ignores_the_schedule_but_not_the_architecture() {
    let base = zoo_config("gre").unwrap();
    let mut schedule = base.clone();
    schedule.train.stages = vec![Stage::new(LossKind::Map, 1)];
    assert_eq!(base.digest(), schedule.digest());
    let mut arch = base.clone();
    arch.arch.encoder.embedding += 1;
    assert_ne!(base.digest(), arch.digest());
}

#[test]
fn config_schema_errors_name_the_offending_key() {
    let mut v: serde_json::Value = serde_json::from_str(&zoo_config("gre").unwrap().to_json()).unwrap();
    v["train"]["minibatch"] = serde_json::json!("eight");
    match parse_config(&v.to_string()) {
        Err(Error::Schema { path, .. }) => assert_eq!(path, "train.minibatch"),
        other => panic!("{other:?}"),
    }
    v["train"]["minibatch"] = serde_json::json!(8);
    v["version"] = serde_json::json!(2);
    assert!(matches!(parse_config(&v.to_string()), Err(Error::Schema { path, .. }) if path == "version"));
}

fn tiny_gre() -> (adavi_core::config::ModelConfig, Dataset) {
    let mut cfg = zoo_config("gre").unwrap();
    cfg.train.dataset_size = 16;
    cfg.train.stages = vec![Stage::new(LossKind::ReverseKl, 1)];
    let desc = cfg.validate().unwrap();
    let data = simulate_dataset(&cfg.template, &desc, 16, false, &mut Rng::with_stream(4, streams::SIMULATE)).unwrap();
    (cfg, data)
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let (cfg, data) = tiny_gre();
    let run = || {
        let mut fam = DualFamily::build(&cfg.template, &cfg.arch, cfg.train.seed).unwrap();
        let m = train(&mut fam, &data, &cfg.train, &mut ()).unwrap();
        let losses: Vec<Option<f64>> = m.records.iter().map(|r| r.loss).collect();
        (losses, Checkpoint::capture(&fam.store, &cfg.digest(), RngPosition { seed: 0, stream: 0, word_pos: 0 }, None))
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca.to_bytes(), cb.to_bytes());
}

#[test]
fn restored_checkpoint_reproduces_posterior_draws() {
    let (cfg, data) = tiny_gre();
    let mut fam = DualFamily::build(&cfg.template, &cfg.arch, cfg.train.seed).unwrap();
    train(&mut fam, &data, &cfg.train, &mut ()).unwrap();
    let rng = Rng::with_stream(11, streams::INFER);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("gre.ckpt");
    Checkpoint::capture(&fam.store, &cfg.digest(), rng.position(), None).save(&path).unwrap();

    let ck = Checkpoint::load(&path).unwrap();
    let mut fresh = DualFamily::build(&cfg.template, &cfg.arch, 99).unwrap();
    ck.restore(&mut fresh.store, &cfg.digest()).unwrap();
    let x = data.example(0).unwrap();
    let a = fam.sample_posterior(&x, 8, &mut rng.clone()).unwrap();
    let b = fresh.sample_posterior(&x, 8, &mut Rng::from_position(ck.rng)).unwrap();
    assert_eq!(a.values, b.values);
    assert_eq!(a.log_q, b.log_q);

    let nc = zoo_config("nc").unwrap();
    let mut other = DualFamily::build(&nc.template, &nc.arch, 0).unwrap();
    assert!(matches!(ck.restore(&mut other.store, &nc.digest()), Err(Error::Digest { .. })));
    assert!(matches!(ck.restore(&mut other.store, &cfg.digest()), Err(Error::Checkpoint(_))));
}

#[test]
fn dataset_files_round_trip_on_disk() {
    let (cfg, _) = tiny_gre();
    let desc = cfg.validate().unwrap();
    let data = simulate_dataset(&cfg.template, &desc, 3, true, &mut Rng::new(8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.json");
    save_dataset(&path, "GRE", &data).unwrap();
    let back = load_dataset(&path).unwrap();
    assert_eq!(back.data, data);
    let mut v: serde_json::Value = serde_json::from_str(&dataset_to_json("GRE", &data).unwrap()).unwrap();
    v["theta"]["mu"]["shape"] = serde_json::json!([2, 2]);
    v["theta"]["mu"]["data"] = serde_json::json!([0.0, 0.0, 0.0, 0.0]);
    assert!(matches!(parse_dataset(&v.to_string()), Err(Error::Schema { path, .. }) if path == "theta.mu"));
}

fn entry() -> impl Strategy<Value = Entry> {
    (
        "[a-z.^,]{1,12}",
        0usize..5,
        prop::collection::vec(0usize..4, 0..3),
    )
        .prop_flat_map(|(name, g, shape)| {
            let n: usize = shape.iter().product();
            prop::collection::vec(any::<f64>(), n).prop_map(move |data| Entry {
                name: name.clone(),
                group: ParamGroup::ALL[g],
                value: Tensor::new(shape.clone(), data).unwrap(),
            })
        })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        "[0-9a-f]{0,64}",
        any::<(u64, u64, u64)>(),
        prop::collection::vec(entry(), 0..5),
        any::<Option<u64>>(),
    )
        .prop_map(|(digest, (seed, stream, word), params, step)| {
            let optimizer = step.map(|step| adavi_core::checkpoint::OptimizerState {
                step,
                m: params.iter().map(|e| e.value.data().iter().map(|x| x * 0.5).collect()).collect(),
                v: params.iter().map(|e| e.value.data().iter().map(|x| x * x).collect()).collect(),
            });
            Checkpoint {
                version: adavi_core::checkpoint::FORMAT_VERSION,
                digest,
                rng: RngPosition {
                    seed,
                    stream,
                    word_pos: word as u128,
                },
                params,
                optimizer,
            }
        })
}

proptest! {
    #[test]
    fn checkpoint_bytes_round_trip(ck in checkpoint()) {
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back.params.len(), ck.params.len());
    }

    #[test]
    fn checkpoint_prefixes_never_decode(ck in checkpoint(), cut in 0.0f64..1.0) {
        let bytes = ck.to_bytes();
        let n = ((bytes.len() as f64) * cut) as usize;
        prop_assert!(Checkpoint::from_bytes(&bytes[..n]).is_err());
    }

    #[test]
    fn dataset_json_round_trips(
        m in 1usize..4,
        vals in prop::collection::vec(-1e12f64..1e12, 12),
    ) {
        let x = Tensor::new(vec![m, 2], vals[..2 * m].to_vec()).unwrap();
        let theta = BTreeMap::from([("mu".to_string(), Tensor::new(vec![m, 2], vals[6..6 + 2 * m].to_vec()).unwrap())]);
        let data = Dataset { x, theta: Some(theta) };
        let back = parse_dataset(&dataset_to_json("GRE", &data).unwrap()).unwrap();
        prop_assert_eq!(back.data, data);
    }
}
