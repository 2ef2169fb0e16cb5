use proptest::prelude::*;
use sitskit::tensor_io::{load_tensor, save_tensor, DType, TensorContainer, TensorData};

fn tensor_strategy() -> impl Strategy<Value = TensorContainer> {
    let shape = prop::collection::vec(1usize..5, 1..=4);
    (shape, 0u8..4).prop_flat_map(|(shape, code)| {
        let n: usize = shape.iter().product();
        let data = match code {
            0 => prop::collection::vec(any::<u32>().prop_map(f32::from_bits), n)
                .prop_map(TensorData::F32)
                .boxed(),
            1 => prop::collection::vec(any::<i32>(), n).prop_map(TensorData::I32).boxed(),
            2 => prop::collection::vec(any::<u16>(), n).prop_map(TensorData::U16).boxed(),
            _ => prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8).boxed(),
        };
        data.prop_map(move |d| TensorContainer::new(shape.clone(), d).unwrap())
    })
}

proptest! {
    #[test]
    fn file_round_trip_keeps_every_bit(t in tensor_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.stsr");
        save_tensor(&t, &path).unwrap();
        let back = load_tensor(&path).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.to_bytes(), t.to_bytes());
        prop_assert_eq!(std::fs::read(&path).unwrap().len(),
            8 + 8 * t.ndim() + t.shape().iter().product::<usize>() * t.dtype().size());
    }

    #[test]
    fn truncated_files_are_rejected(t in tensor_strategy(), cut in 0usize..1000) {
        let bytes = t.to_bytes();
        let cut = cut % bytes.len();
        prop_assert!(TensorContainer::from_bytes(&bytes[..cut]).is_err());
    }
}

#[test]
fn layout_matches_hand_encoding() {
    let t = TensorContainer::i32(vec![2, 3], vec![0, -1, 2, -3, 4, i32::MAX]).unwrap();
    let mut want = b"STSR".to_vec();
    want.extend([1, 1, 2, 0]);
    want.extend(2u64.to_le_bytes());
    want.extend(3u64.to_le_bytes());
    for v in [0, -1, 2, -3, 4, i32::MAX] {
        want.extend(i32::to_le_bytes(v));
    }
    assert_eq!(t.to_bytes(), want);

    let single = TensorContainer::f32(vec![1], vec![1.5]).unwrap().to_bytes();
    assert_eq!(single.len(), 20);
    assert_eq!(&single[16..], &1.5f32.to_le_bytes());
}

#[test]
fn dtype_codes() {
    for (code, dtype, size) in [
        (0, DType::F32, 4),
        (1, DType::I32, 4),
        (2, DType::U16, 2),
        (3, DType::U8, 1),
    ] {
        assert_eq!(DType::from_code(code), Some(dtype));
        assert_eq!(dtype.size(), size);
    }
    assert_eq!(DType::from_code(4), None);
}

#[test]
fn malformed_headers() {
    let good = TensorContainer::u8(vec![2, 2], vec![1, 2, 3, 4]).unwrap().to_bytes();
    let corrupt = |i: usize, v: u8| {
        let mut b = good.clone();
        b[i] = v;
        TensorContainer::from_bytes(&b).unwrap_err().kind()
    };
    assert_eq!(corrupt(0, b'X'), "format");
    assert_eq!(corrupt(4, 2), "format");
    assert_eq!(corrupt(5, 9), "format");
    assert_eq!(corrupt(6, 0), "format");
    assert_eq!(corrupt(7, 1), "format");
    // zero extent
    assert_eq!(corrupt(8, 0), "format");

    let mut long = good.clone();
    long.push(0);
    assert_eq!(TensorContainer::from_bytes(&long).unwrap_err().kind(), "corrupt");
    assert_eq!(
        TensorContainer::from_bytes(&good[..good.len() - 1]).unwrap_err().kind(),
        "corrupt"
    );
}

#[test]
fn load_errors_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("broken.stsr");
    std::fs::write(&path, b"NOPE0000").unwrap();
    let e = load_tensor(&path).unwrap_err();
    assert_eq!(e.kind(), "format");
    assert!(e.to_string().contains("broken.stsr"));
    let missing = load_tensor(dir.path().join("absent.stsr")).unwrap_err();
    assert_eq!(missing.kind(), "io");
}

#[test]
fn constructors_check_shape() {
    assert!(TensorContainer::f32(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(TensorContainer::f32(vec![], vec![]).is_err());
    assert!(TensorContainer::u8(vec![0, 2], vec![]).is_err());
    assert!(TensorContainer::u16(vec![1; 9], vec![0]).is_err());
    assert!(TensorContainer::u16(vec![1; 8], vec![0]).is_ok());
}
