//! Parameterized layers: embedding table, LSTM cell and Bi-LSTM, affine
//! projection and the gated recursive tree cell.
//!
//! Each parameter struct owns plain tensors. `register` copies them onto a
//! [`Tape`] (one gradient slot per tensor, in [`Parameters::tensors`]
//! order) and hands back the matching `Var`s for the forward functions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the normal initializer for weights and embeddings.
pub const INIT_STD: f64 = 0.01;

/// Uniform access to the tensors of a parameterized component.
pub trait Parameters {
    /// Tensors in registration order.
    fn tensors(&self) -> Vec<&Tensor>;
    /// Same order as [`Parameters::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    /// Stable names, same order as [`Parameters::tensors`].
    fn names(&self) -> Vec<String>;

    /// Registers every tensor on the tape.
    fn register_all(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors().into_iter().map(|t| tape.param(t)).collect()
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// A bare list of tensors, named by position.
impl Parameters for Vec<Tensor> {
    fn tensors(&self) -> Vec<&Tensor> {
        self.iter().collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.iter_mut().collect()
    }

    fn names(&self) -> Vec<String> {
        (0..self.len()).map(|i| i.to_string()).collect()
    }
}

/// Two components registered one after the other.
impl<A: Parameters, B: Parameters> Parameters for (A, B) {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut v = self.0.tensors();
        v.extend(self.1.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.0.tensors_mut();
        v.extend(self.1.tensors_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let mut v = self.0.names();
        v.extend(self.1.names());
        v
    }
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub kind: ParamKind,
}

/// Seeded source of initial parameter values: weights and embeddings from
/// N(0, 0.01²), biases zero.
pub struct Initializer {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Initializer {
    pub fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn tensor(&mut self, shape: &[usize], kind: ParamKind) -> Tensor {
        match kind {
            ParamKind::Bias => Tensor::zeros(shape),
            ParamKind::Weight | ParamKind::Embedding => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
                Tensor::from_parts(shape.to_vec(), data)
            }
        }
    }
}

/// Draws one tensor per spec, in order, from a generator seeded with `seed`.
pub fn init_params(specs: &[ParamSpec], seed: u64) -> Result<Vec<Tensor>> {
    let mut init = Initializer::new(seed);
    specs
        .iter()
        .map(|s| {
            if s.shape.is_empty() || s.shape.contains(&0) {
                return Err(Error::Dimension(format!("invalid parameter shape {:?}", s.shape)));
            }
            Ok(init.tensor(&s.shape, s.kind))
        })
        .collect()
}

/// Character embedding rows, one per vocabulary id.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub rows: Tensor,
}

impl EmbeddingTable {
    pub fn new(vocab_size: usize, dim: usize, init: &mut Initializer) -> Self {
        EmbeddingTable {
            rows: init.tensor(&[vocab_size, dim], ParamKind::Embedding),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.rows.shape()[1]
    }
}

impl Parameters for EmbeddingTable {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.rows]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.rows]
    }
    fn names(&self) -> Vec<String> {
        vec!["rows".into()]
    }
}

/// Weights of one LSTM direction: candidate `g`, input gate `i`, forget
/// gate `f` and output gate `o`, each with an input map, a recurrent map
/// and a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub w_gx: Tensor,
    pub w_gh: Tensor,
    pub b_g: Tensor,
    pub w_ix: Tensor,
    pub w_ih: Tensor,
    pub b_i: Tensor,
    pub w_fx: Tensor,
    pub w_fh: Tensor,
    pub b_f: Tensor,
    pub w_ox: Tensor,
    pub w_oh: Tensor,
    pub b_o: Tensor,
}

const LSTM_NAMES: [&str; 12] = [
    "w_gx", "w_gh", "b_g", "w_ix", "w_ih", "b_i", "w_fx", "w_fh", "b_f", "w_ox", "w_oh", "b_o",
];

/// Tape handles for one [`LstmParams`].
#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    gates: [(Var, Var, Var); 4],
}

impl LstmParams {
    pub fn new(input: usize, hidden: usize, init: &mut Initializer) -> Self {
        let mut gate = || {
            (
                init.tensor(&[hidden, input], ParamKind::Weight),
                init.tensor(&[hidden, hidden], ParamKind::Weight),
                init.tensor(&[hidden], ParamKind::Bias),
            )
        };
        let (w_gx, w_gh, b_g) = gate();
        let (w_ix, w_ih, b_i) = gate();
        let (w_fx, w_fh, b_f) = gate();
        let (w_ox, w_oh, b_o) = gate();
        LstmParams {
            w_gx,
            w_gh,
            b_g,
            w_ix,
            w_ih,
            b_i,
            w_fx,
            w_fh,
            b_f,
            w_ox,
            w_oh,
            b_o,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let z = |shape: &[usize]| Tensor::zeros(shape);
        LstmParams {
            w_gx: z(&[hidden, input]),
            w_gh: z(&[hidden, hidden]),
            b_g: z(&[hidden]),
            w_ix: z(&[hidden, input]),
            w_ih: z(&[hidden, hidden]),
            b_i: z(&[hidden]),
            w_fx: z(&[hidden, input]),
            w_fh: z(&[hidden, hidden]),
            b_f: z(&[hidden]),
            w_ox: z(&[hidden, input]),
            w_oh: z(&[hidden, hidden]),
            b_o: z(&[hidden]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_gx.shape()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_gx.shape()[0]
    }

    pub fn register(&self, tape: &mut Tape) -> LstmVars {
        let v = self.register_all(tape);
        LstmVars {
            gates: [
                (v[0], v[1], v[2]),
                (v[3], v[4], v[5]),
                (v[6], v[7], v[8]),
                (v[9], v[10], v[11]),
            ],
        }
    }

    /// Checks that all twelve tensors agree with the declared dims.
    pub fn validate(&self) -> Result<()> {
        let (input, hidden) = (self.input_dim(), self.hidden_dim());
        for (name, t) in LSTM_NAMES.iter().zip(self.tensors()) {
            let want: Vec<usize> = match name.as_bytes()[name.len() - 1] {
                b'x' => vec![hidden, input],
                b'h' => vec![hidden, hidden],
                _ => vec![hidden],
            };
            if t.shape() != want.as_slice() {
                return Err(Error::Dimension(format!(
                    "lstm {name}: expected {want:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

impl Parameters for LstmParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.w_gx, &self.w_gh, &self.b_g, &self.w_ix, &self.w_ih, &self.b_i, &self.w_fx, &self.w_fh, &self.b_f,
            &self.w_ox, &self.w_oh, &self.b_o,
        ]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_gx,
            &mut self.w_gh,
            &mut self.b_g,
            &mut self.w_ix,
            &mut self.w_ih,
            &mut self.b_i,
            &mut self.w_fx,
            &mut self.w_fh,
            &mut self.b_f,
            &mut self.w_ox,
            &mut self.w_oh,
            &mut self.b_o,
        ]
    }
    fn names(&self) -> Vec<String> {
        LSTM_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

fn gate_preactivation(tape: &mut Tape, (wx, wh, b): (Var, Var, Var), x: Var, h: Var) -> Result<Var> {
    let a = tape.matmul(wx, x)?;
    let r = tape.matmul(wh, h)?;
    let sum = tape.add(a, r)?;
    tape.add(sum, b)
}

/// One LSTM step. Returns `(h_t, s_t)` where
/// `s_t = g ⊙ i + s_prev ⊙ f` and the emitted state is `h_t = tanh(s_t ⊙ o)`.
pub fn lstm_step(tape: &mut Tape, p: &LstmVars, x: Var, h_prev: Var, s_prev: Var) -> Result<(Var, Var)> {
    let [gv, iv, fv, ov] = p.gates;
    let g = gate_preactivation(tape, gv, x, h_prev)?;
    let g = tape.tanh(g)?;
    let i = gate_preactivation(tape, iv, x, h_prev)?;
    let i = tape.sigmoid(i)?;
    let f = gate_preactivation(tape, fv, x, h_prev)?;
    let f = tape.sigmoid(f)?;
    let o = gate_preactivation(tape, ov, x, h_prev)?;
    let o = tape.sigmoid(o)?;

    let gi = tape.mul(g, i)?;
    let sf = tape.mul(s_prev, f)?;
    let s = tape.add(gi, sf)?;
    let so = tape.mul(s, o)?;
    let h = tape.tanh(so)?;
    Ok((h, s))
}

/// Runs `fwd` left to right and `bwd` right to left from zero state; output
/// `t` is `[fwd_h_t; bwd_h_t]`.
pub fn bilstm(tape: &mut Tape, fwd: &LstmVars, bwd: &LstmVars, xs: &[Var]) -> Result<Vec<Var>> {
    if xs.is_empty() {
        return Err(Error::Contract("bilstm over an empty sequence".into()));
    }
    let hidden = |tape: &Tape, p: &LstmVars| tape.value(p.gates[0].1).shape()[0];

    let run = |tape: &mut Tape, p: &LstmVars, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Option<Var>>> {
        let dim = hidden(tape, p);
        let mut h = tape.input(Tensor::zeros(&[dim]));
        let mut s = tape.input(Tensor::zeros(&[dim]));
        let mut out = vec![None; xs.len()];
        for t in order {
            (h, s) = lstm_step(tape, p, xs[t], h, s)?;
            out[t] = Some(h);
        }
        Ok(out)
    };
    let forward = run(tape, fwd, &mut (0..xs.len()))?;
    let backward = run(tape, bwd, &mut (0..xs.len()).rev())?;

    forward
        .into_iter()
        .zip(backward)
        .map(|(f, b)| tape.concat(&[f.expect("visited"), b.expect("visited")]))
        .collect()
}

/// `W·x + b`
pub fn affine(tape: &mut Tape, w: Var, b: Var, x: Var) -> Result<Var> {
    let wx = tape.matmul(w, x)?;
    tape.add(wx, b)
}

/// Output projection `W·x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineParams {
    pub w: Tensor,
    pub b: Tensor,
}

impl AffineParams {
    pub fn new(out: usize, input: usize, init: &mut Initializer) -> Self {
        AffineParams {
            w: init.tensor(&[out, input], ParamKind::Weight),
            b: init.tensor(&[out], ParamKind::Bias),
        }
    }

    pub fn zeros(out: usize, input: usize) -> Self {
        AffineParams {
            w: Tensor::zeros(&[out, input]),
            b: Tensor::zeros(&[out]),
        }
    }

    pub fn register(&self, tape: &mut Tape) -> (Var, Var) {
        (tape.param(&self.w), tape.param(&self.b))
    }
}

impl Parameters for AffineParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w, &self.b]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
    fn names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

/// Gated recursive cell merging two `d`-vectors: update-gate map
/// `u: [3d, 3d]`, candidate map `w: [d, 2d]`, reset-gate map `g: [2d, 2d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeCellParams {
    pub u: Tensor,
    pub w: Tensor,
    pub g: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct TreeCellVars {
    u: Var,
    w: Var,
    g: Var,
}

impl TreeCellParams {
    pub fn new(d: usize, init: &mut Initializer) -> Self {
        TreeCellParams {
            u: init.tensor(&[3 * d, 3 * d], ParamKind::Weight),
            w: init.tensor(&[d, 2 * d], ParamKind::Weight),
            g: init.tensor(&[2 * d, 2 * d], ParamKind::Weight),
        }
    }

    pub fn zeros(d: usize) -> Self {
        TreeCellParams {
            u: Tensor::zeros(&[3 * d, 3 * d]),
            w: Tensor::zeros(&[d, 2 * d]),
            g: Tensor::zeros(&[2 * d, 2 * d]),
        }
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn register(&self, tape: &mut Tape) -> TreeCellVars {
        TreeCellVars {
            u: tape.param(&self.u),
            w: tape.param(&self.w),
            g: tape.param(&self.g),
        }
    }
}

impl Parameters for TreeCellParams {
    fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.u, &self.w, &self.g]
    }
    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.u, &mut self.w, &mut self.g]
    }
    fn names(&self) -> Vec<String> {
        vec!["u".into(), "w".into(), "g".into()]
    }
}

/// Merges two children into one node:
///
/// ```text
/// [r_L; r_R]      = sigmoid(G·[left; right])
/// h'              = tanh(W·[r_L ⊙ left; r_R ⊙ right])
/// [z_N; z_L; z_R] = sigmoid(U·[h'; left; right])
/// out             = z_N ⊙ h' + z_L ⊙ left + z_R ⊙ right
/// ```
pub fn tree_cell(tape: &mut Tape, p: &TreeCellVars, left: Var, right: Var) -> Result<Var> {
    let d = tape.value(p.w).shape()[0];
    for (side, v) in [("left", left), ("right", right)] {
        if tape.value(v).shape() != [d] {
            return Err(Error::Dimension(format!(
                "tree_cell {side}: expected [{d}], got {:?}",
                tape.value(v).shape()
            )));
        }
    }
    let children = tape.concat(&[left, right])?;
    let reset = tape.matmul(p.g, children)?;
    let reset = tape.sigmoid(reset)?;
    let r_left = tape.slice(reset, 0, d)?;
    let r_right = tape.slice(reset, d, d)?;
    let gated_left = tape.mul(r_left, left)?;
    let gated_right = tape.mul(r_right, right)?;
    let gated = tape.concat(&[gated_left, gated_right])?;
    let candidate = tape.matmul(p.w, gated)?;
    let candidate = tape.tanh(candidate)?;

    let all = tape.concat(&[candidate, left, right])?;
    let update = tape.matmul(p.u, all)?;
    let update = tape.sigmoid(update)?;
    let z_new = tape.slice(update, 0, d)?;
    let z_left = tape.slice(update, d, d)?;
    let z_right = tape.slice(update, 2 * d, d)?;

    let a = tape.mul(z_new, candidate)?;
    let b = tape.mul(z_left, left)?;
    let c = tape.mul(z_right, right)?;
    tape.add_all(&[a, b, c])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_input(tape: &mut Tape, v: &[f64]) -> Var {
        tape.input(Tensor::vector(v))
    }

    #[test]
    fn zero_lstm_from_zero_state_outputs_zero() {
        let mut tape = Tape::new();
        let p = LstmParams::zeros(3, 2).register(&mut tape);
        let x = vec_input(&mut tape, &[0.3, -1.0, 2.0]);
        let h0 = vec_input(&mut tape, &[0.0, 0.0]);
        let s0 = vec_input(&mut tape, &[0.0, 0.0]);
        let (h, s) = lstm_step(&mut tape, &p, x, h0, s0).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0]);
        assert_eq!(tape.value(s).data(), &[0.0, 0.0]);
    }

    #[test]
    fn zero_lstm_halves_carried_state() {
        let mut tape = Tape::new();
        let p = LstmParams::zeros(1, 1).register(&mut tape);
        let x = vec_input(&mut tape, &[0.7]);
        let h0 = vec_input(&mut tape, &[0.0]);
        let s0 = vec_input(&mut tape, &[2.0]);
        let (h, s) = lstm_step(&mut tape, &p, x, h0, s0).unwrap();
        assert_eq!(tape.value(s).data(), &[1.0]);
        // tanh(s ⊙ o) = tanh(0.5)
        assert!((tape.value(h).data()[0] - 0.462_117_157_260_009_8).abs() < 1e-15);
    }

    #[test]
    fn lstm_step_rejects_wrong_input_width() {
        let mut tape = Tape::new();
        let p = LstmParams::zeros(3, 2).register(&mut tape);
        let x = vec_input(&mut tape, &[0.0, 0.0]);
        let h0 = vec_input(&mut tape, &[0.0, 0.0]);
        let s0 = vec_input(&mut tape, &[0.0, 0.0]);
        assert!(matches!(lstm_step(&mut tape, &p, x, h0, s0), Err(Error::Dimension(_))));
    }

    #[test]
    fn bilstm_rejects_empty_sequence() {
        let mut tape = Tape::new();
        let f = LstmParams::zeros(2, 2).register(&mut tape);
        let b = LstmParams::zeros(2, 2).register(&mut tape);
        assert!(matches!(bilstm(&mut tape, &f, &b, &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn zero_tree_cell_averages_children() {
        let mut tape = Tape::new();
        let p = TreeCellParams::zeros(4).register(&mut tape);
        let l = vec_input(&mut tape, &[1.0, -2.0, 0.5, 3.0]);
        let r = vec_input(&mut tape, &[0.0, 4.0, 0.25, -3.0]);
        let out = tree_cell(&mut tape, &p, l, r).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, 1.0, 0.375, 0.0]);
    }

    #[test]
    fn tree_cell_of_zero_children_is_zero() {
        let mut init = Initializer::new(3);
        let params = TreeCellParams::new(4, &mut init);
        let mut tape = Tape::new();
        let p = params.register(&mut tape);
        let l = vec_input(&mut tape, &[0.0; 4]);
        let r = vec_input(&mut tape, &[0.0; 4]);
        let out = tree_cell(&mut tape, &p, l, r).unwrap();
        assert_eq!(tape.value(out).data(), &[0.0; 4]);
    }

    #[test]
    fn affine_cases() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::zeros(&[2, 3]));
        let b = tape.param(&Tensor::vector(&[1.0, 2.0]));
        let x = vec_input(&mut tape, &[5.0, -1.0, 9.0]);
        let y = affine(&mut tape, w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let w = tape.param(&Tensor::identity(3));
        let b = tape.param(&Tensor::zeros(&[3]));
        let y = affine(&mut tape, w, b, x).unwrap();
        assert_eq!(tape.value(y).data(), &[5.0, -1.0, 9.0]);
    }

    #[test]
    fn init_is_seeded() {
        let specs = [
            ParamSpec {
                shape: vec![5, 7],
                kind: ParamKind::Weight,
            },
            ParamSpec {
                shape: vec![5],
                kind: ParamKind::Bias,
            },
        ];
        let a = init_params(&specs, 11).unwrap();
        let b = init_params(&specs, 11).unwrap();
        let c = init_params(&specs, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0], c[0]);
        assert_eq!(a[1], Tensor::zeros(&[5]));
        assert!(init_params(
            &[ParamSpec {
                shape: vec![0, 2],
                kind: ParamKind::Weight
            }],
            1
        )
        .is_err());
    }

    #[test]
    fn init_sample_mean_is_near_zero() {
        let t = &init_params(
            &[ParamSpec {
                shape: vec![100, 100],
                kind: ParamKind::Weight,
            }],
            5,
        )
        .unwrap()[0];
        let mean = t.sum() / t.len() as f64;
        assert!(mean.abs() < 3.0 * INIT_STD / 100.0, "mean {mean}");
    }

    #[test]
    fn lstm_validate_catches_bad_shape() {
        let mut p = LstmParams::zeros(3, 2);
        assert!(p.validate().is_ok());
        p.w_fh = Tensor::zeros(&[2, 3]);
        assert!(p.validate().is_err());
    }
}
