//! EQT1 tensor files and checkpoints.

use eqimaging::io::{load_checkpoint, read_tensor, save_checkpoint, tensor_from_bytes, tensor_to_bytes, write_tensor};
use eqimaging::reconstruct::{ModelSpec, ReconstructionModel};
use eqimaging::Tensor;
use proptest::collection::vec;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensors_round_trip_bit_exactly(shape in vec(1usize..5, 0..4), seed in any::<u64>()) {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|i| f64::from_bits(seed.rotate_left(i as u32) ^ 0x3ff0_0000_0000_0000) - 1.5).collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let bytes = tensor_to_bytes(&t);
        let (back, used) = tensor_from_bytes::<f64>(&bytes).unwrap();
        prop_assert_eq!(used, bytes.len());
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let single = t.cast::<f32>();
        let (back32, _) = tensor_from_bytes::<f32>(&tensor_to_bytes(&single)).unwrap();
        prop_assert_eq!(back32, single);
    }

    #[test]
    fn truncated_tensors_are_rejected(cut in 0usize..40) {
        let t = Tensor::from_slice(&[1.0, 2.0, 3.0]);
        let bytes = tensor_to_bytes(&t);
        prop_assume!(cut < bytes.len());
        prop_assert!(tensor_from_bytes::<f64>(&bytes[..cut]).is_err());
    }
}

#[test]
fn files_and_checkpoints_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64 * 0.1);
    write_tensor(dir.path().join("t.eqt"), &t).unwrap();
    assert_eq!(read_tensor::<f64>(dir.path().join("t.eqt")).unwrap(), t);

    let mut bytes = std::fs::read(dir.path().join("t.eqt")).unwrap();
    bytes.push(0);
    std::fs::write(dir.path().join("extra.eqt"), &bytes).unwrap();
    assert!(read_tensor::<f64>(dir.path().join("extra.eqt")).is_err());

    let spec = ModelSpec::parse("kind=unrolled;iters=2;net=gcnn:c4:layers=2:channels=2;mix=learned").unwrap();
    let model = ReconstructionModel::<f64>::new(spec, 8, 8, 17).unwrap();
    save_checkpoint(dir.path().join("m.ckpt"), &model).unwrap();
    let back = load_checkpoint::<f64>(dir.path().join("m.ckpt")).unwrap();
    assert_eq!(back.spec(), model.spec());
    assert_eq!(back.params(), model.params());
    assert_eq!(back.param_names(), model.param_names());
    assert_eq!((back.seed(), back.grid()), (17, (8, 8)));
}
