use elastic_dllm::model::{init_weights, ModelConfig, ModelError, ModelWeights};

fn small() -> ModelWeights<f32> {
    init_weights(&ModelConfig {
        vocab_size: 20,
        d_model: 8,
        num_heads: 2,
        num_layers: 1,
        d_ff: 16,
        init_seed: 5,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

#[test]
fn header_is_readable_by_hand() {
    let w = small();
    let b = w.to_bytes();
    assert_eq!(&b[..4], b"EDLM");
    assert_eq!(u32_at(&b, 4), 1);
    let dims: Vec<u32> = (0..5).map(|k| u32_at(&b, 8 + 4 * k)).collect();
    assert_eq!(dims, vec![20, 8, 2, 1, 16]);
    assert_eq!(f64::from_le_bytes(b[28..36].try_into().unwrap()), 10000.0);
    assert_eq!(u64::from_le_bytes(b[36..44].try_into().unwrap()), 5);
    let ids: Vec<u32> = (0..4).map(|k| u32_at(&b, 44 + 4 * k)).collect();
    assert_eq!(ids, vec![0, 1, 2, 3]);
    // The first tensor is the embedding, row-major.
    let first = f32::from_le_bytes(b[60..64].try_into().unwrap());
    assert_eq!(first, w.embedding[[0, 0]]);
    assert_eq!(b.len(), 60 + 4 * w.parameter_count() + 32);
}

#[test]
fn file_round_trip_is_exact() {
    let w = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    w.save(&path).unwrap();
    let back = ModelWeights::load(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back.checksum(), w.checksum());
    assert_eq!(std::fs::read(&path).unwrap(), w.to_bytes());
}

#[test]
fn damaged_files_are_rejected() {
    let good = small().to_bytes();
    let mut flipped = good.clone();
    flipped[100] ^= 0x40;
    let mut magic = good.clone();
    magic[0] = b'X';
    for bad in [flipped, magic, good[..good.len() - 1].to_vec(), Vec::new()] {
        assert!(matches!(ModelWeights::from_bytes(&bad), Err(ModelError::BadWeights(_))));
    }
}
