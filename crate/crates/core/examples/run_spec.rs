//! Run an experiment spec through the library, as the `run` verb does,
//! with a few overrides for a quick pass.
//!
//! cargo run --release --example run_spec -- specs/bars_direct.json

use argmaxgrad::experiment::{run_with_progress, ExperimentSpec};

fn main() -> argmaxgrad::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| "specs/bars_direct.json".into());
    let text = std::fs::read_to_string(&path)?;
    let overrides = ["train.epochs=5".to_string(), "output=runs/example_run_spec".to_string()];
    let spec = ExperimentSpec::from_json_with_overrides(&text, &overrides, None)?;
    let summary = run_with_progress(&spec, &mut |line| println!("{line}"))?;
    println!("final test loss {:.3}, config {}", summary.final_test_loss, &summary.config_hash[..12]);
    Ok(())
}
