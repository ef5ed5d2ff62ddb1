//! Mean base loss on sampled pairs per distractor mode and center jitter:
//! `lossprobe <ckpt> [seed]`.
use hyat::harness::experiment::{generate, ExperimentConfig};
use hyat::hsdata::synth::DistractorMode;
use hyat::trainer::{load_checkpoint, train::draw_sample};

fn main() -> hyat::Result<()> {
    let a: Vec<String> = std::env::args().collect();
    let (m, _) = load_checkpoint(a[1].as_ref())?;
    let seed = a.get(2).map_or(0, |s| s.parse().unwrap());
    let cfg = ExperimentConfig { seed, ..ExperimentConfig::default() };
    for mode in [DistractorMode::None, DistractorMode::Clutter, DistractorMode::Metamer] {
        let data = generate(&cfg.synth, mode, 16, seed, 3)?;
        for j in [0.1, 0.25, 0.5] {
            let mut tc = cfg.finetune.clone();
            tc.sample.center_jitter = j;
            let n = 200;
            let mut tot = 0.0;
            for i in 0..n {
                let (inp, t) = draw_sample(&data, &tc, &m.cfg, 0, i)?;
                tot += m.loss(&inp, &t)?;
            }
            println!("{mode:?} jitter {j}: mean loss {:.4}", tot / n as f64);
        }
    }
    Ok(())
}
