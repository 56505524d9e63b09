use brainvis_core::align::{decode_fixtures, encode_fixtures, FixtureSet, SemanticTargets};
use brainvis_core::checkpoint::{
    decode_checkpoint, encode_checkpoint, load_stage, save_checkpoint, CheckpointArchive, Stage,
};
use brainvis_core::data::{decode_dataset, encode_dataset, Dataset, DatasetHeader, EegRecord};
use brainvis_core::optim::ParamStore;
use brainvis_core::{Error, Tensor};
use proptest::prelude::*;

fn dataset() -> impl Strategy<Value = Dataset> {
    (1usize..4, 1usize..12, 1usize..5, 0usize..5, any::<bool>()).prop_flat_map(|(c, l, k, n, normalized)| {
        let rec = (
            prop::collection::vec(-1e3f32..1e3, c * l),
            0..k as u32,
            any::<u32>(),
            any::<u32>(),
        )
            .prop_map(move |(data, class, subject, image)| EegRecord::new(c, l, data, class, subject, image).unwrap());
        prop::collection::vec(rec, n).prop_map(move |records| {
            let header = DatasetHeader {
                channels: c,
                samples: l,
                n_classes: k,
                normalized,
            };
            Dataset::new(header, records).unwrap()
        })
    })
}

fn nonzero(e: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-2f32..2.0, e).prop_map(|mut v| {
        v[0] += 3.0;
        v
    })
}

fn fixtures() -> impl Strategy<Value = FixtureSet> {
    (1usize..6).prop_flat_map(|e| {
        prop::collection::btree_map((0u32..5, 0u32..50), (nonzero(e), nonzero(e)), 0..6).prop_map(move |m| {
            let mut f = FixtureSet::new(e);
            for ((k, i), (c_label, c_cap)) in m {
                f.insert(k, i, SemanticTargets { c_label, c_cap }).unwrap();
            }
            f
        })
    })
}

fn store() -> impl Strategy<Value = ParamStore<f32>> {
    let param = (1usize..4, 1usize..4).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(-5f32..5.0, r * c),
            prop::collection::vec(-1f32..1.0, r * c),
            prop::collection::vec(0f32..1.0, r * c),
            any::<bool>(),
        )
            .prop_map(move |(v, m, s, tr)| {
                (
                    Tensor::new([r, c], v).unwrap(),
                    Tensor::new([r, c], m).unwrap(),
                    Tensor::new([r, c], s).unwrap(),
                    tr,
                )
            })
    });
    (prop::collection::btree_map("[a-z]{1,6}(\\.[a-z0-9]{1,4}){0,2}", param, 0..6), any::<u64>()).prop_map(
        |(params, step)| {
            let mut s = ParamStore::new();
            for (name, (v, m, sq, tr)) in params {
                s.insert(&name, v).unwrap();
                let p = s.param_mut(&name).unwrap();
                p.m = m;
                p.v = sq;
                p.trainable = tr;
            }
            s.set_step(step);
            s
        },
    )
}

fn stage() -> impl Strategy<Value = Stage> {
    prop::sample::select(Stage::ALL.to_vec())
}

fn assert_rejected(bytes: &[u8], decode: impl Fn(&[u8]) -> Result<(), Error>) {
    for i in 0..bytes.len() {
        let mut bad = bytes.to_vec();
        bad[i] ^= 0x5a;
        assert!(decode(&bad).is_err(), "flipped byte {i} accepted");
    }
    for n in 0..bytes.len() {
        assert!(decode(&bytes[..n]).is_err(), "truncation to {n} accepted");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dataset_round_trip_is_bit_identical(ds in dataset()) {
        let bytes = encode_dataset(&ds).unwrap();
        let back = decode_dataset(&bytes).unwrap();
        prop_assert_eq!(&back, &ds);
        prop_assert_eq!(encode_dataset(&back).unwrap(), bytes);
    }

    #[test]
    fn fixture_round_trip_is_bit_identical(f in fixtures()) {
        let bytes = encode_fixtures(&f).unwrap();
        let back = decode_fixtures(&bytes).unwrap();
        prop_assert_eq!(&back, &f);
        prop_assert_eq!(encode_fixtures(&back).unwrap(), bytes);
    }

    #[test]
    fn checkpoint_round_trip_keeps_optimizer_state(s in store(), st in stage()) {
        let a = CheckpointArchive::from_store(st, &s, serde_json::Value::Null);
        let bytes = encode_checkpoint(&a).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        prop_assert_eq!(&back, &a);
        prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        let restored = back.to_store().unwrap();
        prop_assert_eq!(restored.step(), s.step());
        prop_assert_eq!(restored.len(), s.len());
        for (name, p) in s.iter() {
            let q = restored.param(name).unwrap();
            prop_assert_eq!(&q.value, &p.value);
            prop_assert_eq!(&q.m, &p.m);
            prop_assert_eq!(&q.v, &p.v);
            prop_assert_eq!(q.trainable, p.trainable);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn any_corruption_is_rejected(ds in dataset(), f in fixtures(), s in store(), st in stage()) {
        assert_rejected(&encode_dataset(&ds).unwrap(), |b| decode_dataset(b).map(drop));
        assert_rejected(&encode_fixtures(&f).unwrap(), |b| decode_fixtures(b).map(drop));
        let a = CheckpointArchive::from_store(st, &s, serde_json::Value::Null);
        assert_rejected(&encode_checkpoint(&a).unwrap(), |b| decode_checkpoint(b).map(drop));
    }
}

#[test]
fn payload_corruption_reports_the_checksum() {
    let mut s = ParamStore::new();
    s.insert("w", Tensor::new([2], vec![1.0f32, 2.0]).unwrap()).unwrap();
    let a = CheckpointArchive::from_store(Stage::Align, &s, serde_json::Value::Null);
    let mut bytes = encode_checkpoint(&a).unwrap();
    let two = 2.0f32.to_le_bytes();
    let at = bytes.windows(4).position(|w| w == two).unwrap();
    bytes[at] ^= 1;
    assert!(matches!(decode_checkpoint(&bytes), Err(Error::Checksum { .. })));

    let mut wrong_magic = encode_checkpoint(&a).unwrap();
    wrong_magic[..4].copy_from_slice(b"BVD1");
    assert!(matches!(decode_checkpoint(&wrong_magic), Err(Error::BadMagic { .. })));
}

#[test]
fn stage_loading_follows_the_graph() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bvc");
    assert!(matches!(load_stage(&path, Stage::Lmm), Err(Error::MissingStage { ref needed, .. }) if needed == "lmm"));

    let a = CheckpointArchive::from_store(Stage::JointFt, &ParamStore::new(), serde_json::json!({"seed": 3}));
    save_checkpoint(&path, &a).unwrap();
    match load_stage(&path, Stage::Lmm) {
        Err(Error::StageMismatch { expected, found, .. }) => {
            assert_eq!(expected, "lmm");
            assert_eq!(found, "joint_ft");
        }
        other => panic!("expected a stage mismatch, got {other:?}"),
    }
    let ok = load_stage(&path, Stage::JointFt).unwrap();
    assert_eq!(ok.config, serde_json::json!({"seed": 3}));
}
