//! Central finite-difference check of the analytic gradients.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::model::{random_input, Model, ModelConfig, ModelInput, PeftConfig};
use crate::tensor::Matrix;
use crate::trainer::partition::{partition_params, Phase};

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub scalars: usize,
    /// ‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-12).
    pub rel_error: f64,
    pub analytic_max: f64,
    pub numeric_max: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub loss: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> Vec<&str> {
        self.tensors.iter().filter(|t| !t.passed).map(|t| t.name.as_str()).collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# grad_check step={:e} tol={:e} loss={:.12}", self.step, self.tol, self.loss)?;
        writeln!(f, "tensor,scalars,rel_error,analytic_max,numeric_max,status")?;
        for t in &self.tensors {
            writeln!(
                f,
                "{},{},{:.3e},{:.6e},{:.6e},{}",
                t.name,
                t.scalars,
                t.rel_error,
                t.analytic_max,
                t.numeric_max,
                if t.passed { "ok" } else { "FAIL" }
            )?;
        }
        writeln!(f, "# result: {}", if self.passed() { "PASS" } else { "FAIL" })
    }
}

/// Compares analytic gradients of the cross-entropy loss against central
/// differences for every fine-tune-trainable tensor of `model`. `fault`
/// scales the analytic gradient of one tensor (fault injection).
pub fn grad_check(
    model: &Model,
    input: &ModelInput,
    targets: &[usize; 4],
    step: f64,
    tol: f64,
    fault: Option<(&str, f64)>,
) -> Result<GradCheckReport> {
    let partition = partition_params(&model.params, Phase::Finetune)?;
    let trainable = partition.trainable_names();
    let (loss, analytic) = model.loss_and_grads(input, targets, &trainable, fault)?;
    let mut probe = model.clone();
    let mut tensors = Vec::new();
    for name in &trainable {
        let a = &analytic[name];
        let (rows, cols) = a.shape();
        let mut numeric = Matrix::zeros(rows, cols);
        for i in 0..a.len() {
            let orig = probe.params.get(name)?.as_slice()[i];
            probe.params.get_mut(name)?.as_mut_slice()[i] = orig + step;
            let plus = probe.loss(input, targets)?;
            probe.params.get_mut(name)?.as_mut_slice()[i] = orig - step;
            let minus = probe.loss(input, targets)?;
            probe.params.get_mut(name)?.as_mut_slice()[i] = orig;
            numeric.as_mut_slice()[i] = (plus - minus) / (2.0 * step);
        }
        let (am, nm) = (a.max_abs(), numeric.max_abs());
        let rel_error = a.max_abs_diff(&numeric) / am.max(nm).max(1e-12);
        tensors.push(TensorCheck {
            name: name.clone(),
            scalars: a.len(),
            rel_error,
            analytic_max: am,
            numeric_max: nm,
            passed: rel_error < tol,
        });
    }
    Ok(GradCheckReport { step, tol, loss, tensors })
}

/// Default seed of [`tiny_setup`]: every PEFT path is live (no tensor whose
/// ReLU units are all inactive) and no ReLU sits within a step of its kink.
pub const GRADCHECK_SEED: u64 = 5;

/// Std of the noise added to PEFT tensors by [`tiny_setup`].
pub const GRADCHECK_NOISE: f64 = 1.0;

/// Tiny model with every PEFT module attached and all PEFT tensors
/// (including the zero-initialized up-projections) randomized, so each
/// gradient path is live. Returns the model, an input and target bins.
pub fn tiny_setup(seed: u64) -> Result<(Model, ModelInput, [usize; 4])> {
    let cfg = ModelConfig::tiny();
    let mut model = Model::new_base(&cfg, seed)?;
    model.attach_peft(PeftConfig::full(), seed.wrapping_add(1))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(2));
    for (name, _) in model.cfg.peft_shapes() {
        let m = model.params.get_mut(&name)?;
        let noise = Matrix::randn(m.rows(), m.cols(), GRADCHECK_NOISE, &mut rng);
        m.add_assign(&noise);
    }
    let input = random_input(&cfg, seed.wrapping_add(3));
    let b = cfg.bins;
    let targets = [1 % b, 2 % b, 0, 3 % b];
    Ok((model, input, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_model_passes_and_faults_are_flagged() {
        let (model, input, targets) = tiny_setup(GRADCHECK_SEED).unwrap();
        let ok = grad_check(&model, &input, &targets, 1e-5, 1e-4, None).unwrap();
        assert!(ok.passed(), "{ok}");
        assert!(ok.tensors.iter().any(|t| t.name == "embed.hs.w"));
        let bad = grad_check(&model, &input, &targets, 1e-5, 1e-4, Some(("has.01.v.down", 1.5))).unwrap();
        assert_eq!(bad.failures(), vec!["has.01.v.down"]);
    }
}
