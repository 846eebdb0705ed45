use std::path::Path;

use argmaxgrad::data::{
    batch_iterator, binarize, load_idx, load_idx_dir, synthetic_dataset, write_idx, BinarizeMode, Dataset, Split,
    SyntheticKind, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC,
};
use argmaxgrad::tensor::Tensor;
use argmaxgrad::Error;
use proptest::prelude::*;

/// Reference IDX encoder: big-endian magic, big-endian u32 dims, raw bytes.
fn idx_bytes(magic: u32, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(body);
    v
}

fn parse_offset(e: Error) -> u64 {
    match e {
        Error::Parse { offset, .. } => offset,
        other => panic!("expected a parse error, got {other:?}"),
    }
}

fn put(dir: &Path, name: &str, bytes: &[u8]) -> std::path::PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p
}

#[test]
fn reads_reference_encoding() {
    let dir = tempfile::tempdir().unwrap();
    let pixels: Vec<u8> = (0..3 * 2 * 2).map(|i| (i * 21) as u8).collect();
    let img = put(dir.path(), "img", &idx_bytes(IDX_IMAGES_MAGIC, &[3, 2, 2], &pixels));
    let lab = put(dir.path(), "lab", &idx_bytes(IDX_LABELS_MAGIC, &[3], &[7, 0, 9]));
    let d = load_idx(&img, Some(&lab)).unwrap();
    assert_eq!((d.len(), d.height(), d.width(), d.split()), (3, 2, 2, Split::Train));
    for (got, &raw) in d.images().data().iter().zip(&pixels) {
        assert_eq!(*got, raw as f64 / 255.0);
    }
    assert_eq!(d.labels().unwrap(), &[7, 0, 9]);
    assert_eq!(d.num_classes(), Some(10));

    // The writer reproduces the reference bytes.
    let (img2, lab2) = (dir.path().join("img2"), dir.path().join("lab2"));
    write_idx(&d, &img2, Some(&lab2), false).unwrap();
    assert_eq!(std::fs::read(&img2).unwrap(), std::fs::read(&img).unwrap());
    assert_eq!(std::fs::read(&lab2).unwrap(), std::fs::read(&lab).unwrap());
}

#[test]
fn malformed_files_report_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let body = [1u8, 2, 3, 4];
    let ok = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &body);

    let bad_magic = put(dir.path(), "m", &idx_bytes(IDX_LABELS_MAGIC, &[1, 2, 2], &body));
    assert_eq!(parse_offset(load_idx(&bad_magic, None).unwrap_err()), 0);

    let short_magic = put(dir.path(), "s", &ok[..3]);
    assert_eq!(parse_offset(load_idx(&short_magic, None).unwrap_err()), 3);

    let short_header = put(dir.path(), "h", &ok[..10]);
    assert_eq!(parse_offset(load_idx(&short_header, None).unwrap_err()), 10);

    let short_body = put(dir.path(), "b", &ok[..ok.len() - 1]);
    assert_eq!(parse_offset(load_idx(&short_body, None).unwrap_err()), ok.len() as u64 - 1);

    let mut long = ok.clone();
    long.push(0);
    let trailing = put(dir.path(), "t", &long);
    assert_eq!(parse_offset(load_idx(&trailing, None).unwrap_err()), 16 + 4);

    let img = put(dir.path(), "img", &ok);
    let two_labels = put(dir.path(), "l", &idx_bytes(IDX_LABELS_MAGIC, &[2], &[0, 1]));
    assert!(load_idx(&img, Some(&two_labels)).is_err());

    let mut gz = Vec::new();
    {
        use std::io::Write;
        let mut enc = flate2::write::GzEncoder::new(&mut gz, flate2::Compression::default());
        enc.write_all(&ok).unwrap();
    }
    let broken = put(dir.path(), "g", &gz[..gz.len() / 2]);
    assert!(matches!(load_idx(&broken, None), Err(Error::Parse { .. })));
}

#[test]
fn gzip_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = synthetic_dataset(SyntheticKind::Bars, 24, 3).unwrap().dataset;
    for (split, pre) in [(Split::Train, "train"), (Split::Test, "t10k")] {
        write_idx(
            &d,
            &dir.path().join(format!("{pre}-images-idx3-ubyte.gz")),
            Some(&dir.path().join(format!("{pre}-labels-idx1-ubyte.gz"))),
            true,
        )
        .unwrap();
        let back = load_idx_dir(dir.path(), split).unwrap();
        assert_eq!(back.split(), split);
        assert_eq!(back.images(), d.images());
        assert_eq!(back.labels(), d.labels());
    }
    let empty = tempfile::tempdir().unwrap();
    assert!(matches!(load_idx_dir(empty.path(), Split::Train), Err(Error::Io(_))));
}

#[test]
fn bars_are_single_lines_matching_labels() {
    let d = synthetic_dataset(SyntheticKind::Bars, 80, 9).unwrap().dataset;
    let mut counts = [0; 8];
    for (r, &c) in d.labels().unwrap().iter().enumerate() {
        counts[c] += 1;
        let lit: Vec<usize> = (0..16).filter(|&p| d.images().row(r)[p] == 1.0).collect();
        let want: Vec<usize> = if c < 4 { (0..4).map(|t| 4 * c + t).collect() } else { (0..4).map(|t| 4 * t + c - 4).collect() };
        assert_eq!(lit, want);
    }
    assert_eq!(counts, [10; 8]);
}

#[test]
fn mixture_samples_follow_parameters() {
    let n = 20_000;
    let s = synthetic_dataset(SyntheticKind::Mixture { components: 3, side: 3 }, n, 11).unwrap();
    let params = s.mixture.unwrap();
    assert!((params.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let labels = s.dataset.labels().unwrap();
    for c in 0..3 {
        let freq = labels.iter().filter(|&&l| l == c).count() as f64 / n as f64;
        let w = params.weights[c];
        assert!((freq - w).abs() < 4.0 * (w * (1.0 - w) / n as f64).sqrt());
    }
    for (p, want) in params.pixel_means().iter().enumerate() {
        let mean = (0..n).map(|r| s.dataset.images().row(r)[p]).sum::<f64>() / n as f64;
        assert!((mean - want).abs() < 4.0 * (want * (1.0 - want) / n as f64).sqrt());
    }
    assert!(synthetic_dataset(SyntheticKind::Mixture { components: 0, side: 3 }, 5, 0).is_err());
}

fn graded(n: usize, seed: u64) -> Dataset {
    let v: Vec<f64> = (0..n * 4).map(|i| ((i as u64 * 2654435761 + seed) % 256) as f64 / 255.0).collect();
    Dataset::new(Tensor::matrix(n, 4, v).unwrap(), Some((0..n).collect()), Split::Train, 2, 2).unwrap()
}

proptest! {
    #[test]
    fn batches_partition_the_dataset(n in 1usize..200, bs in 1usize..64, seed in any::<u64>()) {
        let d = graded(n, seed);
        let batches: Vec<_> = batch_iterator(&d, bs, seed).unwrap().collect();
        prop_assert_eq!(batches.len(), n.div_ceil(bs));
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        for (i, b) in batches.iter().enumerate() {
            prop_assert!(b.indices.len() == bs || i + 1 == batches.len());
            for (r, &idx) in b.indices.iter().enumerate() {
                prop_assert_eq!(b.x.row(r), d.images().row(idx));
                prop_assert_eq!(b.labels.as_ref().unwrap()[r], idx);
            }
        }
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        let again: Vec<_> = batch_iterator(&d, bs, seed).unwrap().map(|b| b.indices).collect();
        prop_assert_eq!(again, batches.iter().map(|b| b.indices.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn binarized_pixels_are_binary(n in 1usize..50, seed in any::<u64>()) {
        let d = graded(n, seed);
        let t = binarize(&d, BinarizeMode::Threshold, 0);
        for (b, v) in t.images().data().iter().zip(d.images().data()) {
            prop_assert_eq!(*b, if *v >= 0.5 { 1.0 } else { 0.0 });
        }
        let s = binarize(&d, BinarizeMode::Stochastic, seed);
        prop_assert!(s.images().data().iter().all(|&v| v == 0.0 || v == 1.0));
        prop_assert_eq!(s.labels(), d.labels());
        prop_assert_eq!(binarize(&d, BinarizeMode::Stochastic, seed), s);
    }
}

#[test]
fn zero_batch_size_rejected() {
    assert!(matches!(batch_iterator(&graded(3, 0), 0, 0), Err(Error::Contract(_))));
}
