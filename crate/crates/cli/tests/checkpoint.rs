use std::collections::BTreeMap;

use lkdn::checkpoint::{Checkpoint, OptimizerState};
use lkdn::error::CliError;
use lkdn_core::optim::OptimizerKind;
use lkdn_core::{LkdnConfig, Shape, Tensor};
use proptest::prelude::*;

fn sample(values: Vec<f32>) -> Checkpoint {
    let n = values.len();
    let mut params = BTreeMap::new();
    params.insert("a.weight".to_string(), Tensor::new(Shape::new(n, 1, 1, 1), values.clone()).unwrap());
    params.insert("b.bias".to_string(), Tensor::full(Shape::new(2, 1, 1, 1), -0.0));
    let mut ckpt = Checkpoint::new(LkdnConfig::lkdn_s(3), params.clone());
    ckpt.step = 1234;
    ckpt.ema = Some(params.iter().map(|(k, v)| (k.clone(), v.map(|x| x * 0.5))).collect());
    ckpt.optimizer = Some(OptimizerState {
        kind: OptimizerKind::Adan,
        step: 1234,
        tensors: params.iter().map(|(k, v)| (format!("m.{k}"), v.clone())).collect(),
    });
    ckpt.meta.insert("seed".into(), "7".into());
    ckpt
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_is_bitwise(bits in prop::collection::vec(any::<u32>(), 1..40)) {
        let values: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
        let ckpt = sample(values);
        let bytes = ckpt.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let orig: Vec<u32> = ckpt.params["a.weight"].data().iter().map(|v| v.to_bits()).collect();
        let read: Vec<u32> = back.params["a.weight"].data().iter().map(|v| v.to_bits()).collect();
        prop_assert_eq!(orig, read);
        prop_assert_eq!(back.config, ckpt.config);
        prop_assert_eq!(back.step, 1234);
    }
}

#[test]
fn corrupted_payload_is_rejected() {
    let mut bytes = sample(vec![1.0, 2.0, 3.0]).to_bytes().unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.contains("checksum"), "{err}");
}

#[test]
fn truncated_and_foreign_files_are_rejected() {
    let bytes = sample(vec![1.0, 2.0]).to_bytes().unwrap();
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
    assert!(Checkpoint::from_bytes(b"hello\npayload\n").is_err());
    let text = String::from_utf8_lossy(&bytes).replacen("lkdn-checkpoint 1", "lkdn-checkpoint 9", 1);
    let err = Checkpoint::from_bytes(text.as_bytes()).unwrap_err();
    assert!(err.contains("version"), "{err}");
}

#[test]
fn save_replaces_atomically_and_load_reports_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    let ckpt = sample(vec![0.5; 4]);
    ckpt.save(&path).unwrap();
    ckpt.save(&path).unwrap();
    assert!(!dir.path().join("c.partial").exists());
    assert_eq!(Checkpoint::load(&path).unwrap(), ckpt);

    std::fs::write(&path, b"garbage").unwrap();
    let err = Checkpoint::load(&path).unwrap_err();
    assert!(matches!(err, CliError::Format { .. }));
    assert_eq!(err.exit_code(), 2);
    let missing = Checkpoint::load(&dir.path().join("nope.ckpt")).unwrap_err();
    assert_eq!(missing.exit_code(), 2);
}

#[test]
fn inference_prefers_ema() {
    let ckpt = sample(vec![4.0]);
    assert_eq!(ckpt.inference_params()["a.weight"].data(), &[2.0]);
    let plain = Checkpoint::new(ckpt.config, ckpt.params.clone());
    assert_eq!(plain.inference_params()["a.weight"].data(), &[4.0]);
}
