use lipo_amm::checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, DType, Tensor};
use lipo_amm::Error;
use proptest::prelude::*;

fn dtype() -> impl Strategy<Value = DType> {
    prop_oneof![Just(DType::F16), Just(DType::F32), Just(DType::F64)]
}

fn tensor() -> impl Strategy<Value = Tensor> {
    (dtype(), proptest::collection::vec(0usize..4, 0..4)).prop_flat_map(|(d, shape)| {
        let n = shape.iter().product::<usize>();
        proptest::collection::vec(-1e3f64..1e3, n)
            .prop_map(move |v| Tensor::new(d, shape.clone(), v).unwrap())
    })
}

fn checkpoint() -> impl Strategy<Value = Checkpoint> {
    (
        proptest::collection::btree_map("[a-z]{1,4}(\\.[a-z0-9]{1,3}){0,2}", tensor(), 0..5),
        proptest::collection::btree_map("[a-z_]{1,6}", "[ -~]{0,10}", 0..3),
    )
        .prop_map(|(tensors, meta)| {
            let mut c = Checkpoint::new();
            for (name, t) in tensors {
                c.insert(name, t).unwrap();
            }
            for (k, v) in meta {
                c.set_metadata(k, v);
            }
            c
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn file_round_trip(c in checkpoint()) {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        write_checkpoint(&c, &a).unwrap();
        let back = read_checkpoint(&a).unwrap();
        prop_assert_eq!(&back, &c);
        write_checkpoint(&back, &b).unwrap();
        prop_assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn truncation_is_rejected(c in checkpoint(), cut in 1usize..64) {
        let bytes = c.to_bytes();
        let keep = bytes.len().saturating_sub(cut);
        prop_assert!(Checkpoint::from_bytes(&bytes[..keep]).is_err());
    }
}

#[test]
fn missing_file_names_path() {
    let err = read_checkpoint("/definitely/not/here.safetensors").unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/definitely/not/here.safetensors"));
}

#[test]
fn f16_values_are_quantized_on_insert() {
    let t = Tensor::new(DType::F16, vec![2], vec![0.1, 1.0 / 3.0]).unwrap();
    assert_eq!(t.values()[0], half::f16::from_f64(0.1).to_f64());
    let mut c = Checkpoint::new();
    c.insert("x", t.clone()).unwrap();
    assert_eq!(
        Checkpoint::from_bytes(&c.to_bytes()).unwrap().get("x"),
        Some(&t)
    );
}

#[test]
fn header_with_duplicate_names_is_rejected() {
    let header = r#"{"x":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"x":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&[0u8; 8]);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::DuplicateName(_))
    ));
}

#[test]
fn unknown_dtype_is_rejected() {
    let header = r#"{"x":{"dtype":"BF16","shape":[1],"data_offsets":[0,2]}}"#;
    let mut bytes = (header.len() as u64).to_le_bytes().to_vec();
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&[0u8; 2]);
    assert!(matches!(
        Checkpoint::from_bytes(&bytes),
        Err(Error::UnsupportedDtype { .. })
    ));
}
