//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackseg::data::{f1_score, Prf, SegmentedSentence};
use stackseg::gradcheck::{check_params, random_tensor, randomize, GradCheckReport};
use stackseg::layers::{self, AffineParams, EmbeddingTable, Initializer, LstmParams, Parameters, TreeCellParams};
use stackseg::segmenter::{predict_spans, Scorer};
use stackseg::stacking::{stack_scores, StackerConfig, StackerParams, Variant};
use stackseg::{Result, Tape, Tensor, Var};

/// Largest relative error a checked gradient entry may show.
pub const GRAD_TOL: f64 = 1e-4;

/// Worst outcome of one component over several seeds.
#[derive(Debug, Clone)]
pub struct SuiteResult {
    pub name: &'static str,
    pub seeds: usize,
    pub checked: usize,
    pub worst: GradCheckReport,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.worst.max_rel_err < GRAD_TOL
    }
}

/// `r · x` for a fixed random `r`, so every output entry reaches the loss
/// with a distinct weight.
fn project(tape: &mut Tape, x: Var, r: &Tensor) -> Result<Var> {
    let r = tape.input(r.clone());
    let prod = tape.mul(x, r)?;
    tape.sum(prod)
}

fn inputs(shapes: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    shapes.iter().map(|&n| random_tensor(&[n], std, rng)).collect()
}

fn randomized<P: Parameters>(mut p: P, rng: &mut ChaCha8Rng) -> P {
    randomize(&mut p, 0.5, rng);
    p
}

fn lstm_step_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = randomized(LstmParams::zeros(3, 4), &mut rng);
    let p = (cell, inputs(&[3, 4, 4], 1.0, &mut rng));
    let (rh, rs) = (random_tensor(&[4], 1.0, &mut rng), random_tensor(&[4], 1.0, &mut rng));
    check_params(
        &p,
        |tape, p| {
            let v = p.0.register(tape);
            let x = p.1.register_all(tape);
            let (h, s) = layers::lstm_step(tape, &v, x[0], x[1], x[2])?;
            let a = project(tape, h, &rh)?;
            let b = project(tape, s, &rs)?;
            tape.add(a, b)
        },
        None,
    )
}

fn bilstm_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fwd = randomized(LstmParams::zeros(3, 2), &mut rng);
    let bwd = randomized(LstmParams::zeros(3, 2), &mut rng);
    let len = 1 + seed as usize % 4;
    let p = (fwd, (bwd, inputs(&vec![3; len], 1.0, &mut rng)));
    let rs = inputs(&vec![4; len], 1.0, &mut rng);
    check_params(
        &p,
        |tape, p| {
            let f = p.0.register(tape);
            let b = p.1 .0.register(tape);
            let xs = p.1 .1.register_all(tape);
            let out = layers::bilstm(tape, &f, &b, &xs)?;
            let terms = out
                .iter()
                .zip(&rs)
                .map(|(&o, r)| project(tape, o, r))
                .collect::<Result<Vec<_>>>()?;
            tape.add_all(&terms)
        },
        None,
    )
}

fn tree_cell_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = randomized(TreeCellParams::zeros(4), &mut rng);
    let p = (cell, inputs(&[4, 4], 1.0, &mut rng));
    let r = random_tensor(&[4], 1.0, &mut rng);
    check_params(
        &p,
        |tape, p| {
            let v = p.0.register(tape);
            let x = p.1.register_all(tape);
            let out = layers::tree_cell(tape, &v, x[0], x[1])?;
            project(tape, out, &r)
        },
        None,
    )
}

fn affine_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = randomized(AffineParams::zeros(4, 5), &mut rng);
    let p = (a, inputs(&[5], 1.0, &mut rng));
    let r = random_tensor(&[4], 1.0, &mut rng);
    check_params(
        &p,
        |tape, p| {
            let (w, b) = p.0.register(tape);
            let x = p.1.register_all(tape);
            let out = layers::affine(tape, w, b, x[0])?;
            let out = tape.tanh(out)?;
            project(tape, out, &r)
        },
        None,
    )
}

fn embedding_case(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let table = EmbeddingTable::new(6, 3, &mut Initializer::new(seed));
    let table = randomized(table, &mut rng);
    let rows: Vec<usize> = (0..5).map(|_| rng.gen_range(0..6)).collect();
    let rs = inputs(&[3; 5], 1.0, &mut rng);
    check_params(
        &table,
        |tape, t| {
            let v = tape.param(&t.rows);
            let terms = rows
                .iter()
                .zip(&rs)
                .map(|(&row, r)| {
                    let e = tape.gather(v, row)?;
                    let e = tape.tanh(e)?;
                    project(tape, e, r)
                })
                .collect::<Result<Vec<_>>>()?;
            tape.add_all(&terms)
        },
        None,
    )
}

fn stacker_case(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = 2 + seed as usize % 3;
    let mut config = StackerConfig::new(variant, m, 0);
    config.seq_hidden = 5;
    config.model_order = (0..m).rev().collect();
    let params = randomized(StackerParams::init(&config, seed), &mut rng);
    let p = (params, inputs(&vec![4; m], 2.0, &mut rng));
    let gold = rng.gen_range(0..4);
    check_params(
        &p,
        |tape, p| {
            let v = p.0.register(tape);
            let h = p.1.register_all(tape);
            let z = stack_scores(tape, &config, &v, &h)?;
            tape.cross_entropy(z, gold)
        },
        None,
    )
}

type Case = fn(u64) -> Result<GradCheckReport>;

/// Runs every layer and parametric stacker check over `seeds`.
pub fn gradient_suite(seeds: std::ops::Range<u64>) -> Result<Vec<SuiteResult>> {
    let cases: [(&'static str, Case); 8] = [
        ("lstm_step", lstm_step_case),
        ("bilstm", bilstm_case),
        ("tree_cell", tree_cell_case),
        ("affine", affine_case),
        ("embeddings", embedding_case),
        ("concatenate", |s| stacker_case(Variant::Concatenate, s)),
        ("sequence", |s| stacker_case(Variant::Sequence, s)),
        ("tree", |s| stacker_case(Variant::Tree, s)),
    ];
    cases
        .iter()
        .map(|&(name, case)| {
            let mut result: Option<SuiteResult> = None;
            for seed in seeds.clone() {
                let r = case(seed)?;
                let entry = result.get_or_insert(SuiteResult {
                    name,
                    seeds: 0,
                    checked: 0,
                    worst: r,
                });
                entry.seeds += 1;
                entry.checked += r.checked;
                if r.max_rel_err > entry.worst.max_rel_err {
                    entry.worst = r;
                }
            }
            Ok(result.expect("at least one seed"))
        })
        .collect()
}

/// Word F1 of `scorer` against a gold corpus.
pub fn corpus_f1<S: Scorer + ?Sized>(scorer: &S, gold: &[SegmentedSentence]) -> Result<Prf> {
    let predicted = gold
        .iter()
        .map(|s| SegmentedSentence::from_spans(s.chars().to_vec(), predict_spans(scorer, s.chars())?))
        .collect::<Result<Vec<_>>>()?;
    f1_score(gold, &predicted)
}
