use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vidcompress::encoder::{decode_feature, encode_feature, random_video, read_feature, write_feature};
use vidcompress::{Branch, Checkpoint, Error, ModelConfig, VidCompress};

#[test]
fn feature_files_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (t, n, d) = (rng.random_range(1..6), [1, 4, 16][rng.random_range(0..3)], rng.random_range(1..6));
        let v = random_video::<f32>(t, n, d, &mut rng).unwrap();
        let back = decode_feature::<f32>(&encode_feature(&v)).unwrap();
        assert!(back.tensor().bit_eq(v.tensor()));
        let wide = random_video::<f64>(t, n, d, &mut rng).unwrap();
        assert!(decode_feature::<f64>(&encode_feature(&wide)).unwrap().tensor().bit_eq(wide.tensor()));
    }
}

#[test]
fn feature_file_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.vcft");
    let v = random_video::<f64>(3, 4, 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    write_feature(&path, &v).unwrap();
    assert!(read_feature::<f64>(&path).unwrap().tensor().bit_eq(v.tensor()));
    assert!(matches!(read_feature::<f64>(dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn feature_header_corruption() {
    let v = random_video::<f32>(2, 4, 3, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let bytes = encode_feature(&v);
    let cases: [(usize, u8, u64); 3] = [(0, b'X', 0), (4, 9, 4), (8, 7, 8)];
    for (at, value, offset) in cases {
        let mut bad = bytes.clone();
        bad[at] = value;
        match decode_feature::<f32>(&bad) {
            Err(Error::Format { offset: o, .. }) => assert_eq!(o, offset),
            other => panic!("byte {at}: {other:?}"),
        }
    }
    match decode_feature::<f32>(&bytes[..bytes.len() - 1]) {
        Err(Error::Truncated { expected, actual }) => assert_eq!((expected, actual + 1), (bytes.len() as u64, expected)),
        other => panic!("{other:?}"),
    }
}

#[test]
fn checkpoints_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let mut cfg = ModelConfig::default();
        cfg.compressor.dim = rng.random_range(1..4) * 2;
        cfg.compressor.grid = 4;
        cfg.compressor.num_blocks = 2;
        cfg.text.n_q = rng.random_range(1..4);
        cfg.text.learned_fusion = rng.random_bool(0.5);
        cfg.d_out = rng.random_range(1..5);
        cfg.branch = Branch::ALL[i % 3];
        let model = VidCompress::<f32>::new(cfg, rng.random()).unwrap();
        let bytes = model.to_checkpoint().unwrap().encode().unwrap();
        assert_eq!(VidCompress::from_checkpoint(&Checkpoint::decode(&bytes).unwrap()).unwrap(), model);
    }
}

#[test]
fn checkpoint_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.vcck");
    let mut cfg = ModelConfig::default();
    cfg.compressor.dim = 4;
    let model = VidCompress::<f64>::new(cfg, 5).unwrap();
    model.save(&path).unwrap();
    assert_eq!(VidCompress::<f64>::load(&path).unwrap(), model);
}
