//! Trains the three stages on the synthetic manual and prints the report.
//! Usage: `cargo run --release -p smart-core --example desk_run [seed] [loss.csv]`

use std::fs::File;
use std::io::{self, Write};

use smart_core::desk::{run, DeskConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map(|s| s.parse()).transpose()?.unwrap_or(7);
    let mut log: Box<dyn Write> = match args.next() {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::sink()),
    };
    let (_, report) = run(&DeskConfig::new(seed), &mut log)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
