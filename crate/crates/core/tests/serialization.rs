use evogen::featurize::{export_features, import_features, FeatureGrid};
use evogen::model::{Model, ModelConfig};
use evogen::msa::{parse_a3m, write_a3m};
use evogen::tensor::SeedStream;
use evogen::verify::random_msa;
use evogen::Error;
use proptest::prelude::*;

#[test]
fn a3m_insertions_survive_a_round_trip() {
    let text = ">query\nACDEF\n>hit one\nAC-dkEF\n>hit two\n-CDEFgg\n";
    let m = parse_a3m(text).unwrap();
    assert_eq!(m.row(1).deletions, vec![0, 0, 0, 2, 0]);
    // only insertion counts are kept, and trailing insertions precede no column
    let canonical = write_a3m(&m);
    assert_eq!(canonical, ">query\nACDEF\n>hit one\nAC-xxEF\n>hit two\n-CDEF\n");
    assert_eq!(write_a3m(&parse_a3m(&canonical).unwrap()), canonical);
}

#[test]
fn checkpoint_rejects_other_config_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = Model::init(ModelConfig::toy(), &SeedStream::new(1)).unwrap();
    model.save(&path).unwrap();
    let other = ModelConfig { c_s: 16, ..ModelConfig::toy() };
    assert!(matches!(Model::load(&path, Some(&other)), Err(Error::DigestMismatch)));
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Model::load(&path, None).is_err());
}

#[test]
fn checkpoint_reload_reproduces_generation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let model = Model::init(ModelConfig::toy(), &SeedStream::new(2)).unwrap();
    model.save(&path).unwrap();
    let back = Model::load(&path, Some(&ModelConfig::toy())).unwrap();
    let grid = evogen::featurize::tokenize(&random_msa(&mut SeedStream::new(3), 5, 9));
    let s = SeedStream::new(4);
    assert_eq!(model.generate_logits(&grid, 4, &s).unwrap(), back.generate_logits(&grid, 4, &s).unwrap());
    let mut again = Vec::new();
    back.save(&dir.path().join("again.bin")).unwrap();
    again.extend(std::fs::read(dir.path().join("again.bin")).unwrap());
    assert_eq!(again, std::fs::read(&path).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn a3m_round_trip(seed in any::<u64>(), depth in 1usize..12, len in 1usize..30) {
        let m = random_msa(&mut SeedStream::new(seed), depth, len);
        let text = write_a3m(&m);
        let back = parse_a3m(&text).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(write_a3m(&back), text);
    }

    #[test]
    fn feature_round_trip(seed in any::<u64>(), depth in 1usize..6, len in 1usize..20) {
        let mut r = SeedStream::new(seed);
        let mut g = FeatureGrid::from_msa(&random_msa(&mut r, depth, len));
        g.probs.iter_mut().for_each(|p| *p = r.uniform() as f32);
        let mut buf = Vec::new();
        export_features(&g, &mut buf).unwrap();
        let back = import_features(buf.as_slice()).unwrap();
        prop_assert!(back.probs.iter().zip(&g.probs).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(back, g);
    }
}
