//! The low-rank adapter primitive and its two compositions: the HAS chain
//! (Eq. 5–7) that augments queries and values, and HAM (Eq. 8–11) with a
//! parallel adapter on the MLP input and a sequential one on its output.

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// `y = ReLU(x·W_down)·W_up`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub w_down: Matrix,
    pub w_up: Matrix,
}

impl LowRankAdapter {
    pub fn new(w_down: Matrix, w_up: Matrix) -> Result<Self> {
        let (d_in, r) = w_down.shape();
        let (r2, d_out) = w_up.shape();
        if r != r2 {
            return Err(Error::shape(format!("adapter rank mismatch: {:?} vs {:?}", w_down.shape(), w_up.shape())));
        }
        if r > d_in.min(d_out) {
            return Err(Error::shape(format!("adapter rank {r} exceeds min({d_in}, {d_out})")));
        }
        Ok(Self { w_down, w_up })
    }

    pub fn zero_up(d_in: usize, r: usize, d_out: usize, w_down: Matrix) -> Result<Self> {
        if w_down.shape() != (d_in, r) {
            return Err(Error::shape("w_down shape"));
        }
        Self::new(w_down, Matrix::zeros(r, d_out))
    }

    pub fn rank(&self) -> usize {
        self.w_down.cols()
    }

    pub fn param_count(&self) -> usize {
        self.w_down.len() + self.w_up.len()
    }
}

pub fn lowrank_forward(x: &Matrix, a: &LowRankAdapter) -> Result<Matrix> {
    if x.cols() != a.w_down.rows() {
        return Err(Error::shape(format!("adapter input width {} but D_in = {}", x.cols(), a.w_down.rows())));
    }
    x.matmul(&a.w_down)?.relu().matmul(&a.w_up)
}

/// Tape form of [`lowrank_forward`].
pub fn lowrank_tape(g: &mut Graph, x: Var, w_down: Var, w_up: Var) -> Result<Var> {
    let h = g.matmul(x, w_down)?;
    let h = g.relu(h);
    g.matmul(h, w_up)
}

/// Query/value chain state; both branches start at `F^HS`.
#[derive(Clone, Debug, PartialEq)]
pub struct HasChainState {
    pub f_q: Matrix,
    pub f_v: Matrix,
    pub layer_index: usize,
    pub layers: usize,
}

impl HasChainState {
    pub fn seed(f_hs: &Matrix, layers: usize) -> Self {
        Self { f_q: f_hs.clone(), f_v: f_hs.clone(), layer_index: 0, layers }
    }
}

/// Eq. 6: one chain step. The returned features are both this layer's
/// augmentation and the next layer's chain input.
pub fn has_step(state: &HasChainState, a_q: &LowRankAdapter, a_v: &LowRankAdapter) -> Result<HasChainState> {
    if state.layer_index >= state.layers {
        return Err(Error::State(format!(
            "HAS chain already advanced through all {} layers",
            state.layers
        )));
    }
    Ok(HasChainState {
        f_q: lowrank_forward(&state.f_q, a_q)?,
        f_v: lowrank_forward(&state.f_v, a_v)?,
        layer_index: state.layer_index + 1,
        layers: state.layers,
    })
}

/// Splits the feature axis of a `tokens × D` matrix into `heads` contiguous
/// blocks of width `D/heads`.
pub fn split_heads(x: &Matrix, heads: usize) -> Result<Vec<Matrix>> {
    if heads == 0 || x.cols() % heads != 0 {
        return Err(Error::config(format!("width {} is not divisible into {heads} heads", x.cols())));
    }
    let dh = x.cols() / heads;
    (0..heads).map(|h| x.slice_cols(h * dh, (h + 1) * dh)).collect()
}

/// Eq. 2/6: `q' = q + f_q`, `v' = v + f_v` in head space; `k` is untouched.
pub fn augment_qv(
    q: &[Matrix],
    v: &[Matrix],
    f_q: &Matrix,
    f_v: &Matrix,
    heads: usize,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    if q.len() != heads || v.len() != heads {
        return Err(Error::shape(format!("expected {heads} heads, got {} / {}", q.len(), v.len())));
    }
    let fq = split_heads(f_q, heads)?;
    let fv = split_heads(f_v, heads)?;
    let add = |a: &[Matrix], b: &[Matrix]| a.iter().zip(b).map(|(x, y)| x.add(y)).collect::<Result<Vec<_>>>();
    Ok((add(q, &fq)?, add(v, &fv)?))
}

/// Frozen two-layer perceptron with its pre-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub ln_gain: Matrix,
    pub ln_shift: Matrix,
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl Mlp {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut g = Graph::new();
        let vars = [&self.ln_gain, &self.ln_shift, &self.w1, &self.b1, &self.w2, &self.b2].map(|m| g.constant(m.clone()));
        let xv = g.constant(x.clone());
        let out = mlp_tape(&mut g, xv, &vars)?;
        Ok(g.value(out).clone())
    }
}

/// `GELU(LN(x)·W1 + b1)·W2 + b2` with `p = [ln_gain, ln_shift, w1, b1, w2, b2]`.
pub fn mlp_tape(g: &mut Graph, x: Var, p: &[Var; 6]) -> Result<Var> {
    let h = g.layer_norm(x, p[0], p[1])?;
    let h = g.matmul(h, p[2])?;
    let h = g.add_row(h, p[3])?;
    let h = g.gelu(h);
    let h = g.matmul(h, p[4])?;
    g.add_row(h, p[5])
}

#[derive(Clone, Debug, PartialEq)]
pub struct HamParams {
    pub pha: LowRankAdapter,
    pub sha: LowRankAdapter,
}

/// Eq. 8–11: `F_MSA + F_MLP + PHA(F_MSA) + SHA(F_MLP)`, where `mlp` is any
/// map standing in for the frozen MLP sub-block.
pub fn ham_apply(f_msa: &Matrix, mlp: impl Fn(&Matrix) -> Result<Matrix>, p: &HamParams) -> Result<Matrix> {
    let d = f_msa.cols();
    if p.pha.w_down.rows() != d || p.sha.w_up.cols() != d || p.pha.rank() != p.sha.rank() {
        return Err(Error::shape("HAM adapters disagree with the module width or rank"));
    }
    let f_mlp = mlp(f_msa)?;
    let f_pha = lowrank_forward(f_msa, &p.pha)?;
    let f_sha = lowrank_forward(&f_mlp, &p.sha)?;
    f_msa.add(&f_mlp)?.add(&f_pha)?.add(&f_sha)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn lowrank_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = LowRankAdapter::zero_up(6, 2, 6, Matrix::randn(6, 2, 0.02, &mut rng)).unwrap();
        let x = Matrix::randn(5, 6, 1.0, &mut rng);
        assert_eq!(lowrank_forward(&x, &a).unwrap(), Matrix::zeros(5, 6));

        let a = LowRankAdapter::new(m(&[&[2.0], &[1.0]]), m(&[&[0.5, -0.5]])).unwrap();
        assert_eq!(lowrank_forward(&m(&[&[1.0, -1.0]]), &a).unwrap(), m(&[&[0.5, -0.5]]));

        let a = LowRankAdapter::new(Matrix::zeros(768, 16), Matrix::zeros(16, 768)).unwrap();
        let y = lowrank_forward(&Matrix::zeros(3, 768), &a).unwrap();
        assert_eq!((a.rank(), y.cols()), (16, 768));
        assert!(LowRankAdapter::new(Matrix::zeros(2, 3), Matrix::zeros(3, 2)).is_err());
    }

    #[test]
    fn lowrank_is_linear_in_w_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Matrix::randn(4, 5, 1.0, &mut rng);
        let wd = Matrix::randn(5, 2, 1.0, &mut rng);
        let u1 = Matrix::randn(2, 5, 1.0, &mut rng);
        let u2 = Matrix::randn(2, 5, 1.0, &mut rng);
        let f = |u: &Matrix| lowrank_forward(&x, &LowRankAdapter::new(wd.clone(), u.clone()).unwrap()).unwrap();
        let lhs = f(&u1.scale(2.0).add(&u2.scale(-3.0)).unwrap());
        let rhs = f(&u1).scale(2.0).add(&f(&u2).scale(-3.0)).unwrap();
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn has_chain_steps_and_stops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f_hs = Matrix::randn(6, 4, 1.0, &mut rng);
        let zero = LowRankAdapter::zero_up(4, 2, 4, Matrix::randn(4, 2, 0.02, &mut rng)).unwrap();
        let mut s = HasChainState::seed(&f_hs, 12);
        assert_eq!(s.f_q, f_hs);
        for _ in 0..12 {
            s = has_step(&s, &zero, &zero).unwrap();
            assert_eq!(s.f_q, Matrix::zeros(6, 4));
            assert_eq!(s.f_v, Matrix::zeros(6, 4));
        }
        assert_eq!(s.layer_index, 12);
        assert!(matches!(has_step(&s, &zero, &zero), Err(Error::State(_))));

        let a = LowRankAdapter::new(Matrix::randn(4, 2, 1.0, &mut rng), Matrix::randn(2, 4, 1.0, &mut rng)).unwrap();
        let s1 = has_step(&HasChainState::seed(&f_hs, 2), &a, &a).unwrap();
        let s2 = has_step(&s1, &a, &a).unwrap();
        assert_eq!(s2.f_q, lowrank_forward(&s1.f_q, &a).unwrap());
    }

    #[test]
    fn augment_qv_splits_contiguously() {
        let q = vec![m(&[&[0.0, 0.0]]), m(&[&[0.0, 0.0]])];
        let v = vec![m(&[&[1.0, 1.0]]), m(&[&[1.0, 1.0]])];
        let fq = m(&[&[1.0, 2.0, 3.0, 4.0]]);
        let (q2, v2) = augment_qv(&q, &v, &fq, &Matrix::zeros(1, 4), 2).unwrap();
        assert_eq!(q2[0], m(&[&[1.0, 2.0]]));
        assert_eq!(q2[1], m(&[&[3.0, 4.0]]));
        assert_eq!(v2, v);
        assert_eq!(split_heads(&Matrix::zeros(2, 768), 12).unwrap()[0].cols(), 64);
        assert!(matches!(split_heads(&Matrix::zeros(1, 10), 3), Err(Error::Config(_))));
    }

    #[test]
    fn ham_examples() {
        let id = |x: &Matrix| Ok(x.clone());
        let pha = LowRankAdapter::new(m(&[&[1.0], &[0.0]]), m(&[&[0.1, 0.0]])).unwrap();
        let sha = LowRankAdapter::new(m(&[&[1.0], &[0.0]]), Matrix::zeros(1, 2)).unwrap();
        let out = ham_apply(&m(&[&[1.0, 0.0]]), id, &HamParams { pha, sha }).unwrap();
        assert!(out.max_abs_diff(&m(&[&[2.1, 0.0]])) < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mlp = Mlp {
            ln_gain: Matrix::filled(1, 4, 1.0),
            ln_shift: Matrix::zeros(1, 4),
            w1: Matrix::randn(4, 8, 0.5, &mut rng),
            b1: Matrix::zeros(1, 8),
            w2: Matrix::randn(8, 4, 0.5, &mut rng),
            b2: Matrix::zeros(1, 4),
        };
        let x = Matrix::randn(3, 4, 1.0, &mut rng);
        let zero = |rng: &mut ChaCha8Rng| LowRankAdapter::zero_up(4, 2, 4, Matrix::randn(4, 2, 0.02, rng)).unwrap();
        let p = HamParams { pha: zero(&mut rng), sha: zero(&mut rng) };
        let out = ham_apply(&x, |v| mlp.forward(v), &p).unwrap();
        assert_eq!(out, x.add(&mlp.forward(&x).unwrap()).unwrap());
        // 2·(768·16·2) per layer at full scale.
        let full = LowRankAdapter::new(Matrix::zeros(768, 16), Matrix::zeros(16, 768)).unwrap();
        assert_eq!(2 * full.param_count(), 2 * (768 * 16 * 2));
    }
}
