use degm_core::data::{
    binarize, inverse_domain, load_idx, make_cross_domain_stream, synth_generate, Binarize, DomainSpec, Family,
    StreamSettings,
};
use degm_core::Error;

fn idx_images(n: u32, rows: u32, cols: u32, px: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for v in [n, rows, cols] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b.extend_from_slice(px);
    b
}

#[test]
fn idx_files_load_with_labels() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.idx");
    let lab = dir.path().join("lab.idx");
    std::fs::write(&img, idx_images(2, 1, 2, &[0, 255, 128, 64])).unwrap();
    std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 2, 3, 4]).unwrap();
    let ds = load_idx(&img, Some(&lab)).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.dim(), 2);
    assert_eq!(ds.images().data(), &[0.0, 1.0, 128.0 / 255.0, 64.0 / 255.0]);
    assert_eq!(ds.labels().unwrap(), &[3, 4]);

    std::fs::write(&lab, [0, 0, 8, 1, 0, 0, 0, 1, 3]).unwrap();
    assert!(matches!(load_idx(&img, Some(&lab)), Err(Error::CountMismatch { images: 2, labels: 1 })));
    let missing = dir.path().join("none.idx");
    assert!(matches!(load_idx(&missing, None), Err(Error::Io { .. })));
}

#[test]
fn idx_spec_builds_a_stream() {
    let dir = tempfile::tempdir().unwrap();
    let img = dir.path().join("img.idx");
    std::fs::write(&img, idx_images(3, 2, 2, &[0, 255, 0, 255, 255, 0, 255, 0, 10, 10, 10, 10])).unwrap();
    let spec: DomainSpec = format!("idx:{0},{0}-inv", img.display()).parse().unwrap();
    let settings = StreamSettings {
        n_train: 2,
        n_test: 1,
        width: 2,
        height: 2,
        binarize: None,
    };
    let stream = make_cross_domain_stream(&[spec], &settings, 0).unwrap();
    let t = stream.task(1).unwrap();
    assert_eq!((t.train.len(), t.test.len()), (2, 1));
    assert_eq!(t.test.images().row(0), &[1.0, 0.0, 1.0, 0.0]);
}

#[test]
fn generators_are_deterministic_and_in_range() {
    for fam in Family::ALL {
        let a = synth_generate(fam, 20, 12, 12, 5).unwrap();
        let b = synth_generate(fam, 20, 12, 12, 5).unwrap();
        assert_eq!(a.images(), b.images(), "{}", fam.name());
        assert!(a.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let inv = inverse_domain(&a);
        assert!((a.mean_intensity() + inv.mean_intensity() - 1.0).abs() < 1e-12);
        let bin = binarize(&a, Binarize::Threshold, 0);
        assert!(bin.images().data().iter().all(|v| *v == 0.0 || *v == 1.0));
    }
}

#[test]
fn distinct_families_differ() {
    let bars = synth_generate(Family::Bars, 200, 12, 12, 1).unwrap().mean_image();
    let rings = synth_generate(Family::Rings, 200, 12, 12, 1).unwrap().mean_image();
    let gap: f64 = bars.iter().zip(&rings).map(|(a, b)| (a - b).abs()).sum();
    assert!(gap > 1.0, "{gap}");
}
