//! Runs the loss ablation on a generated shapes dataset and prints the table.
//!
//! ```text
//! cargo run --release -p puzzlecam --example ablation -- [seed] [epochs] [rows]
//! ```
//!
//! `rows` is `all` (default) or `ends` for just the cls-only and full rows.

use std::time::Instant;

use puzzlecam::data::{make_synthetic, SyntheticConfig};
use puzzlecam::train::{run_ablation, EvalSettings, TrainConfig, ABLATION_ROWS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().map_or(Ok(0), |s| s.parse())?;
    let epochs: usize = args.get(1).map_or(Ok(15), |s| s.parse())?;
    let rows = match args.get(2).map(String::as_str) {
        Some("ends") => vec![ABLATION_ROWS[0], ABLATION_ROWS[3]],
        _ => ABLATION_ROWS.to_vec(),
    };
    let dataset = make_synthetic(&SyntheticConfig {
        seed,
        ..Default::default()
    })?;
    let out = std::env::temp_dir().join(format!("puzzlecam-ablation-{seed}"));
    let cfg = TrainConfig {
        epochs,
        seed,
        out_dir: out,
        ..Default::default()
    };
    let start = Instant::now();
    let table = run_ablation(&cfg, &dataset, &EvalSettings::default(), &rows)?;
    print!("{}", table.to_text());
    eprintln!("elapsed: {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
