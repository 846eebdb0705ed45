//! Load an MNIST-layout directory (default `data/mnist-desk`), binarize it
//! and draw the first digit.
//!
//! cargo run --release --example load_mnist -- path/to/dir

use std::path::PathBuf;

use argmaxgrad::data::{binarize, load_idx_dir, BinarizeMode, Split};

fn main() -> argmaxgrad::Result<()> {
    let dir = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| "data/mnist-desk".into());
    let train = load_idx_dir(&dir, Split::Train)?;
    let test = load_idx_dir(&dir, Split::Test)?;
    println!("train {} images, test {} images, {}x{}", train.len(), test.len(), train.height(), train.width());
    let labels = train.labels().expect("IDX label file present");
    let mut counts = vec![0usize; train.num_classes().unwrap_or(0)];
    for &l in labels {
        counts[l] += 1;
    }
    println!("train label counts {counts:?}");
    let bin = binarize(&train, BinarizeMode::Threshold, 0);
    println!("first image, label {}:", labels[0]);
    for r in 0..bin.height() {
        let row = &bin.images().row(0)[r * bin.width()..(r + 1) * bin.width()];
        println!("{}", row.iter().map(|&v| if v > 0.0 { '#' } else { '.' }).collect::<String>());
    }
    Ok(())
}
