//! Download MNIST or Fashion-MNIST with checksum verification.
//!
//! cargo run --release --example fetch -- mnist data/mnist

use std::path::PathBuf;

use argmaxgrad::experiment::{fetch, DatasetName};

fn main() -> argmaxgrad::Result<()> {
    let mut args = std::env::args().skip(1);
    let name: DatasetName = args.next().unwrap_or_else(|| "mnist".into()).parse()?;
    let dir = args.next().map(PathBuf::from).unwrap_or_else(|| "data/mnist".into());
    for path in fetch(name, &dir)? {
        println!("verified {}", path.display());
    }
    Ok(())
}
