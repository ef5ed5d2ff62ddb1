//! Base tracking AUC per distractor mode: `modes <ckpt> [radius] [orbit]`.
use hyat::harness::evaluate_model;
use hyat::harness::experiment::{generate, ExperimentConfig};
use hyat::hsdata::synth::{DistractorMode, SynthSpec};
use hyat::trainer::load_checkpoint;

fn main() -> hyat::Result<()> {
    let a: Vec<String> = std::env::args().collect();
    let (base, _) = load_checkpoint(a[1].as_ref())?;
    let cfg = ExperimentConfig::default();
    let radius: f64 = a.get(2).map_or(11.0, |v| v.parse().unwrap());
    let orbit: f64 = a.get(3).map_or(0.08, |v| v.parse().unwrap());
    let spec = SynthSpec { distractor_radius: radius, distractor_orbit_speed: orbit, ..cfg.synth.clone() };
    for mode in [DistractorMode::None, DistractorMode::Clutter, DistractorMode::Metamer] {
        let ev = generate(&spec, mode, 10, 0, 4)?;
        let e = evaluate_model(&base, &ev, &cfg.track)?;
        println!("radius {radius} orbit {orbit} {mode}: auc {:.4} dp20 {:.4}", e.auc, e.dp20);
    }
    Ok(())
}
