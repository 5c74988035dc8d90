//! Property tests for the container format and the tensor-kernel
//! invariants that every downstream module leans on.

use proptest::prelude::*;

use stylevec_core::checkpoint::{
    checkpoint_from_bytes, checkpoint_to_bytes, validate_header, Checkpoint, TensorKey,
};
use stylevec_core::tensor::{cast, elementwise_sub, Dtype, Tensor};

fn dtype_strategy() -> impl Strategy<Value = Dtype> {
    prop_oneof![Just(Dtype::F32), Just(Dtype::F16), Just(Dtype::BF16)]
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0usize..5, 0..3)
}

// Arbitrary raw bytes: round-tripping must preserve every bit pattern,
// including NaNs and infinities.
fn tensor_strategy() -> impl Strategy<Value = Tensor> {
    (dtype_strategy(), shape_strategy()).prop_flat_map(|(dtype, shape)| {
        let len = shape.iter().product::<usize>() * dtype.byte_width();
        prop::collection::vec(any::<u8>(), len..=len)
            .prop_map(move |data| Tensor::new(dtype, shape.clone(), data).unwrap())
    })
}

fn key_strategy() -> impl Strategy<Value = TensorKey> {
    "[a-z][a-z0-9._]{0,24}".prop_map(|s| TensorKey::new(s).unwrap())
}

fn checkpoint_strategy() -> impl Strategy<Value = Checkpoint> {
    (
        prop::collection::btree_map(key_strategy(), tensor_strategy(), 0..8),
        prop::collection::btree_map("[a-z]{1,8}", "[ -~]{0,16}", 0..4),
    )
        .prop_map(|(entries, metadata)| {
            let mut ckpt: Checkpoint = entries.into_iter().collect();
            for (k, v) in metadata {
                ckpt.set_metadata(k, v);
            }
            ckpt
        })
}

proptest! {
    #[test]
    fn write_read_round_trip_is_bit_identical(ckpt in checkpoint_strategy()) {
        let bytes = checkpoint_to_bytes(&ckpt);
        let back = checkpoint_from_bytes(&bytes).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn canonical_files_are_fixed_points(ckpt in checkpoint_strategy()) {
        let first = checkpoint_to_bytes(&ckpt);
        let second = checkpoint_to_bytes(&checkpoint_from_bytes(&first).unwrap());
        prop_assert_eq!(first, second);
    }

    #[test]
    fn canonical_files_validate_clean(ckpt in checkpoint_strategy()) {
        let report = validate_header(&checkpoint_to_bytes(&ckpt)).unwrap();
        prop_assert!(report.is_canonical());
        prop_assert_eq!(report.tensor_count, ckpt.len());
    }

    #[test]
    fn sub_self_is_exactly_zero(
        dtype in dtype_strategy(),
        vals in prop::collection::vec(-1e4f32..1e4, 0..64),
    ) {
        let t = Tensor::from_f32(dtype, vec![vals.len()], &vals).unwrap();
        let d = elementwise_sub(&t, &t).unwrap();
        prop_assert!(d.is_all_zero());
    }

    #[test]
    fn cast_is_idempotent_for_any_bits(t in tensor_strategy(), target in dtype_strategy()) {
        let once = cast(&t, target);
        let twice = cast(&once, target);
        prop_assert_eq!(&once.raw_data().to_vec(), &twice.raw_data().to_vec());
    }
}

// Any format drift breaks golden files and content hashes downstream, so
// the exact bytes of a known checkpoint are frozen here: 8-byte LE header
// length, lexicographically sorted compact JSON padded with spaces to an
// 8-byte boundary, then gapless little-endian data in key order.
#[test]
fn canonical_bytes_are_frozen() {
    let mut ckpt = Checkpoint::new();
    ckpt.insert(
        TensorKey::new("b.weight").unwrap(),
        Tensor::from_f32(Dtype::F16, vec![3], &[1.0, -2.5, 0.125]).unwrap(),
    );
    ckpt.insert(
        TensorKey::new("a.weight").unwrap(),
        Tensor::from_f32(Dtype::F32, vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap(),
    );
    ckpt.set_metadata("note", "golden");

    let bytes = checkpoint_to_bytes(&ckpt);
    let header = concat!(
        r#"{"__metadata__":{"note":"golden"},"#,
        r#""a.weight":{"data_offsets":[0,16],"dtype":"F32","shape":[2,2]},"#,
        r#""b.weight":{"data_offsets":[16,22],"dtype":"F16","shape":[3]}} "#,
    );
    let mut want = (header.len() as u64).to_le_bytes().to_vec();
    want.extend_from_slice(header.as_bytes());
    for v in [1.0f32, 2.0, 3.0, 4.0] {
        want.extend_from_slice(&v.to_le_bytes());
    }
    for v in [1.0f32, -2.5, 0.125] {
        want.extend_from_slice(&half::f16::from_f32(v).to_le_bytes());
    }
    assert_eq!(bytes, want);
}

proptest! {
    // Arbitrary input bytes must never panic the parser, only return an
    // error or a checkpoint.
    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let _ = checkpoint_from_bytes(&bytes);
        let _ = validate_header(&bytes);
    }
}

// Crafted malformed headers must be rejected with the documented error
// classes rather than panicking or truncating.
mod malformed {
    use stylevec_core::checkpoint::{checkpoint_from_bytes, CheckpointError};

    fn file_with(header: &[u8], data_len: usize) -> Vec<u8> {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        bytes.extend_from_slice(&vec![0u8; data_len]);
        bytes
    }

    #[test]
    fn rejects_each_crafted_violation() {
        let cases: Vec<(&str, Vec<u8>)> = vec![
            ("empty file", Vec::new()),
            ("short length prefix", vec![1, 2, 3]),
            ("length prefix past eof", {
                let mut b = (1u64 << 40).to_le_bytes().to_vec();
                b.extend_from_slice(b"{}");
                b
            }),
            ("invalid utf8", file_with(&[0xff, 0xfe, b'{', b'}'], 0)),
            ("invalid json", file_with(b"{not json", 0)),
            ("non-object root", file_with(b"[1,2]", 0)),
            ("entry not an object", file_with(br#"{"w": 7}"#, 0)),
            (
                "missing dtype",
                file_with(br#"{"w":{"shape":[1],"data_offsets":[0,4]}}"#, 4),
            ),
            (
                "non-integer shape",
                file_with(
                    br#"{"w":{"dtype":"F32","shape":[1.5],"data_offsets":[0,4]}}"#,
                    4,
                ),
            ),
            (
                "negative shape",
                file_with(
                    br#"{"w":{"dtype":"F32","shape":[-1],"data_offsets":[0,4]}}"#,
                    4,
                ),
            ),
            (
                "offsets reversed",
                file_with(
                    br#"{"w":{"dtype":"F32","shape":[1],"data_offsets":[4,0]}}"#,
                    4,
                ),
            ),
            (
                "offsets past data end",
                file_with(
                    br#"{"w":{"dtype":"F32","shape":[2],"data_offsets":[0,8]}}"#,
                    4,
                ),
            ),
            (
                "size disagrees with shape",
                file_with(
                    br#"{"w":{"dtype":"F32","shape":[3],"data_offsets":[0,8]}}"#,
                    8,
                ),
            ),
            (
                "overlapping ranges",
                file_with(
                    br#"{"a":{"dtype":"F32","shape":[2],"data_offsets":[0,8]},"b":{"dtype":"F32","shape":[2],"data_offsets":[4,12]}}"#,
                    12,
                ),
            ),
            (
                "metadata not an object",
                file_with(br#"{"__metadata__": "hi"}"#, 0),
            ),
            (
                "metadata value not a string",
                file_with(br#"{"__metadata__": {"k": 3}}"#, 0),
            ),
            (
                "empty tensor name",
                file_with(br#"{"":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}"#, 4),
            ),
        ];
        for (name, bytes) in &cases {
            match checkpoint_from_bytes(bytes) {
                Err(CheckpointError::MalformedHeader(_)) => {}
                other => panic!("case {name:?}: expected MalformedHeader, got {other:?}"),
            }
        }
    }

    #[test]
    fn rejects_unsupported_dtypes_distinctly() {
        for dtype in ["F64", "I64", "U8", "BOOL", "F8_E4M3"] {
            let header =
                format!(r#"{{"w":{{"dtype":"{dtype}","shape":[1],"data_offsets":[0,8]}}}}"#);
            let bytes = file_with(header.as_bytes(), 8);
            match checkpoint_from_bytes(&bytes) {
                Err(CheckpointError::UnsupportedDtype { .. }) => {}
                other => panic!("dtype {dtype}: expected UnsupportedDtype, got {other:?}"),
            }
        }
    }
}
