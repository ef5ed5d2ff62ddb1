//! Runs the criterion-8 metamer experiment: `cargo run --release --example
//! metamer -- [config.txt] [seed]`.

use std::time::Instant;

use hyat::config::KvConfig;
use hyat::harness::experiment::{run_metamer_experiment, ExperimentConfig};

fn main() -> hyat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let kv = match args.get(1) {
        Some(p) => KvConfig::load(p.as_ref())?,
        None => KvConfig::new(),
    };
    let seed = args.get(2).map_or(0, |s| s.parse().unwrap());
    let cfg = ExperimentConfig::from_kv(&kv, seed)?;
    kv.finish()?;
    let t = Instant::now();
    let r = run_metamer_experiment(&cfg, args.get(3).map(std::path::Path::new), &mut |m| eprintln!("[{:7.1}s] {m}", t.elapsed().as_secs_f64()))?;
    print!("{}", hyat::harness::table_csv(&r.cells));
    println!("gain_ok={} monotone_ok={} seconds={:.1}", r.gain_ok(), r.monotone_ok(), r.seconds);
    Ok(())
}
