//! Generate a synthetic sensor-fleet recording: a ring of nodes, each with
//! several coupled periodic modalities, written in the raw CSV format the
//! `preprocess` command consumes, plus the sensor coordinates.
//!
//! ```text
//! cargo run --example generate_data -- <out_dir> [steps] [seed]
//! ```

use std::path::PathBuf;

use sentinet::pipeline::{write_positions_csv, write_raw_csv};
use sentinet::synth::{generate, SynthSpec};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().unwrap_or_else(|| "synth_out".into()).into();
    let steps: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(6400);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);

    let spec = SynthSpec {
        steps,
        seed,
        ..Default::default()
    };
    let data = generate(&spec);
    std::fs::create_dir_all(&out)?;
    write_raw_csv(&out.join("raw.csv"), &data.records, &data.modality_names)?;
    write_positions_csv(&out.join("positions.csv"), &data.positions)?;
    println!(
        "wrote {} records for {} nodes × {} modalities × {} steps to {}",
        data.records.len(),
        spec.nodes,
        spec.modalities,
        steps,
        out.display()
    );
    println!("files: raw.csv, positions.csv");
    Ok(())
}
