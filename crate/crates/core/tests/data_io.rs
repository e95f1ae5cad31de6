use std::fs;

use codeq::data::{load_csv, load_idx, write_idx, MNIST_MEAN, MNIST_STD};
use codeq::CodeqError;

fn pixels(n: usize, rows: usize, cols: usize) -> Vec<u8> {
    (0..n * rows * cols).map(|i| (i * 37 % 256) as u8).collect()
}

#[test]
fn idx_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    let px = pixels(3, 4, 5);
    write_idx(&ip, &lp, &px, 4, 5, &[7, 0, 3]).unwrap();
    let d = load_idx(&ip, &lp).unwrap();
    assert_eq!(d.len(), 3);
    assert_eq!(d.sample_shape, vec![1, 4, 5]);
    assert_eq!(d.labels, vec![7, 0, 3]);
    assert_eq!(d.num_classes, 10);
    for (v, &p) in d.features.iter().zip(&px) {
        let expected = (f64::from(p) / 255.0 - MNIST_MEAN) / MNIST_STD;
        assert!((v - expected).abs() < 1e-12);
        assert!((d.normalization.invert(*v) - f64::from(p)).abs() < 1e-9);
    }
}

#[test]
fn idx_bad_magic_names_the_value() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ip, &lp, &pixels(2, 2, 2), 2, 2, &[1, 2]).unwrap();
    let mut bytes = fs::read(&ip).unwrap();
    bytes[3] = 0x01;
    fs::write(&ip, bytes).unwrap();
    let err = load_idx(&ip, &lp).unwrap_err();
    assert!(matches!(err, CodeqError::Format { .. }), "{err}");
    assert!(err.to_string().contains("0x00000801"), "{err}");
}

#[test]
fn idx_truncation_and_count_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    write_idx(&ip, &lp, &pixels(2, 3, 3), 3, 3, &[1, 2]).unwrap();
    let bytes = fs::read(&ip).unwrap();
    fs::write(&ip, &bytes[..bytes.len() - 1]).unwrap();
    match load_idx(&ip, &lp).unwrap_err() {
        CodeqError::Io { source, .. } => assert_eq!(source.kind(), std::io::ErrorKind::UnexpectedEof),
        other => panic!("unexpected {other}"),
    }

    let lp2 = dir.path().join("lab2");
    write_idx(&ip, &lp2, &pixels(1, 3, 3), 3, 3, &[4]).unwrap();
    write_idx(dir.path().join("img3"), &lp, &pixels(2, 3, 3), 3, 3, &[1, 2]).unwrap();
    assert!(matches!(load_idx(dir.path().join("img3"), &lp2), Err(CodeqError::Format { .. })));
    assert!(write_idx(&ip, &lp, &[0; 5], 2, 2, &[1]).is_err());
    assert!(matches!(load_idx(dir.path().join("missing"), &lp), Err(CodeqError::Io { .. })));
}

#[test]
fn csv_with_and_without_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("a.csv");
    fs::write(&p, "label,x,y\n1,0.5,-2\n0,1.5,3\n2,0,0\n").unwrap();
    let d = load_csv(&p).unwrap();
    assert_eq!(d.labels, vec![1, 0, 2]);
    assert_eq!(d.features, vec![0.5, -2.0, 1.5, 3.0, 0.0, 0.0]);
    assert_eq!(d.num_classes, 3);

    fs::write(&p, "1,0.5\n0,1.5\n").unwrap();
    assert_eq!(load_csv(&p).unwrap().len(), 2);

    fs::write(&p, "1,0.5\n0,abc\n").unwrap();
    assert!(matches!(load_csv(&p), Err(CodeqError::Format { .. })));
    fs::write(&p, "label,x\n").unwrap();
    assert!(matches!(load_csv(&p), Err(CodeqError::Empty(_))));
    fs::write(&p, "1,0.5\n0,nan\n").unwrap();
    assert!(load_csv(&p).is_err());
}
