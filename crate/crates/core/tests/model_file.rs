use std::fs;

use proptest::prelude::*;
use qllama::model::ModelConfig;
use qllama::modelio::{
    decode_header, gen_synthetic, layer_bytes, persistent_bytes, quantize_weights, read_layer, read_model,
    write_model, write_model_to, ModelLayout, SectionReader, HEADER_SIZE,
};
use qllama::Error;

/// Size of a model file, counted tensor by tensor.
fn closed_form(c: &ModelConfig) -> usize {
    let (d, h, l) = (c.dim, c.hidden_dim, c.n_layers);
    let kv = d / c.n_heads * c.n_kv_heads;
    let q = |numel: usize| numel + 4 * (numel / c.gs);
    let tables = if c.shared_classifier { 1 } else { 2 } * q(c.vocab_size * d);
    let layer = 2 * q(d * d) + 2 * q(kv * d) + 3 * q(h * d);
    256 + 4 * (2 * l * d + d) + tables + l * layer
}

#[test]
fn file_round_trips_to_the_quantized_weights() {
    let dir = tempfile::tempdir().unwrap();
    for shared in [false, true] {
        let c = ModelConfig { shared_classifier: shared, ..ModelConfig::tiny() };
        let w = gen_synthetic(&c, 2).unwrap();
        let path = dir.path().join(format!("m{shared}.bin"));
        write_model(&c, &w, &path).unwrap();
        let (persistent, layers) = quantize_weights(&c, &w).unwrap();

        let loaded = read_model(&path).unwrap();
        assert_eq!(loaded.config, c);
        assert_eq!(loaded.persistent, persistent);
        assert_eq!(loaded.layout, ModelLayout::new(&c));
        let mut r = SectionReader::open(&path).unwrap();
        for (l, want) in layers.iter().enumerate() {
            assert_eq!(&read_layer(&mut r, &c, &loaded.layout, l).unwrap(), want);
        }
        assert_eq!(fs::metadata(&path).unwrap().len() as usize, closed_form(&c));
    }
}

#[test]
fn writing_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let c = ModelConfig::tiny();
    let w = gen_synthetic(&c, 3).unwrap();
    let (a, b) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
    write_model(&c, &w, &a).unwrap();
    write_model(&c, &w, &b).unwrap();
    let mut in_memory = Vec::new();
    write_model_to(&c, &w, &mut in_memory).unwrap();
    let bytes = fs::read(&a).unwrap();
    assert_eq!(bytes, fs::read(&b).unwrap());
    assert_eq!(bytes, in_memory);
}

#[test]
fn header_layout() {
    let c = ModelConfig::tiny();
    let mut bytes = Vec::new();
    write_model_to(&c, &gen_synthetic(&c, 4).unwrap(), &mut bytes).unwrap();
    assert_eq!(&bytes[..4], b"LAMF");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
    let ints: Vec<i32> = bytes[8..40].chunks(4).map(|b| i32::from_le_bytes(b.try_into().unwrap())).collect();
    assert_eq!(ints, [64, 128, 2, 4, 2, 512, 256, 32]);
    assert_eq!(bytes[40], 0);
    assert!(bytes[41..HEADER_SIZE].iter().all(|&b| b == 0));
    assert_eq!(decode_header(&bytes[..HEADER_SIZE]).unwrap(), c);
}

#[test]
fn corrupt_files_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let c = ModelConfig::tiny();
    let good = dir.path().join("good.bin");
    write_model(&c, &gen_synthetic(&c, 5).unwrap(), &good).unwrap();
    let bytes = fs::read(&good).unwrap();
    let broken = dir.path().join("broken.bin");

    let mut flipped = bytes.clone();
    flipped[0] ^= 0x20;
    fs::write(&broken, &flipped).unwrap();
    assert!(matches!(read_model(&broken), Err(Error::Format(_))));

    let mut version = bytes.clone();
    version[4] = 9;
    fs::write(&broken, &version).unwrap();
    assert!(matches!(read_model(&broken), Err(Error::Format(_))));

    let mut zero_layers = bytes.clone();
    zero_layers[16..20].copy_from_slice(&0i32.to_le_bytes());
    fs::write(&broken, &zero_layers).unwrap();
    assert!(read_model(&broken).is_err());

    fs::write(&broken, &bytes[..100]).unwrap();
    assert!(matches!(read_model(&broken), Err(Error::Io { .. })));

    // persistent tensors cut short
    fs::write(&broken, &bytes[..HEADER_SIZE + 64]).unwrap();
    assert!(read_model(&broken).is_err());

    assert!(read_model(dir.path().join("missing.bin")).is_err());
}

#[test]
fn tinyllama_section_sizes() {
    let c = ModelConfig::tinyllama();
    // 7 matrices of 44,040,192 INT8 values plus one FP32 scale per 256
    assert_eq!(layer_bytes(&c), 44_728_320);
    // embeddings and classifier of 65,536,000 values each, plus the norms
    assert_eq!(persistent_bytes(&c), 133_488_640);
    assert_eq!(ModelLayout::new(&c).file_size as usize, closed_form(&c));
    assert_eq!(closed_form(&c), 256 + 133_488_640 + 22 * 44_728_320);
}

fn config_strategy() -> impl Strategy<Value = ModelConfig> {
    (
        prop::sample::select(vec![8usize, 16, 32]),
        1usize..=4,
        prop::sample::select(vec![1usize, 2, 4]),
        1usize..=3,
        1usize..=4,
        1usize..=40,
        any::<bool>(),
    )
        .prop_flat_map(|(gs, heads_log, kv_heads, layers, hidden_mult, vocab, shared)| {
            let n_heads = 1 << (heads_log - 1);
            let n_kv_heads = kv_heads.min(n_heads);
            // head_dim a multiple of gs keeps kv_dim divisible by gs
            let dim = n_heads * gs * 2;
            Just(ModelConfig {
                dim,
                hidden_dim: gs * hidden_mult,
                n_layers: layers,
                n_heads,
                n_kv_heads,
                vocab_size: vocab,
                seq_len: 16,
                gs,
                shared_classifier: shared,
            })
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn file_size_matches_the_closed_form(c in config_strategy(), seed in any::<u64>()) {
        prop_assume!(c.validate().is_ok());
        let mut bytes = Vec::new();
        write_model_to(&c, &gen_synthetic(&c, seed).unwrap(), &mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), closed_form(&c));
        prop_assert_eq!(ModelLayout::new(&c).file_size as usize, closed_form(&c));
    }
}
