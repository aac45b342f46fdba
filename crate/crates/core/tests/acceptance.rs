//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test --release --test acceptance -- 1 2 3`.

mod common;

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::{corpus_f1, gradient_suite, GRAD_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackseg::data::{gen_synthetic, subsample, SegmentedSentence, SynthSpec};
use stackseg::gradcheck::{random_tensor, randomize};
use stackseg::layers::TreeCellParams;
use stackseg::persist::{save_model, save_stacker, ModelRef};
use stackseg::segmenter::{bmes_decode, bmes_encode, DomainModel, ModelDims};
use stackseg::stacking::{bagging_stack, gaussian_stack, stack_distribution, StackerConfig, StackerParams, Variant};
use stackseg::tape::Gradients;
use stackseg::training::{
    adam_step, train_domain, train_stack, train_stack_with, AdamConfig, AdamState, CrossFit, TrainConfig,
};
use stackseg::{Result, Tape, Tensor};

struct Verdict {
    pass: bool,
    detail: String,
}

type Criterion = fn() -> Result<Verdict>;

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn gradient_criterion() -> Result<Verdict> {
    let start = Instant::now();
    let results = gradient_suite(0..20)?;
    let elapsed = start.elapsed();
    let mut detail = String::new();
    for r in &results {
        write!(detail, "{}={:.1e} ", r.name, r.worst.max_rel_err).unwrap();
    }
    write!(detail, "(tol {GRAD_TOL:e}, 20 seeds each, {})", secs(elapsed)).unwrap();
    let pass = results.iter().all(|r| r.passed() && r.seeds >= 20) && elapsed < Duration::from_secs(60);
    verdict(pass, detail)
}

fn optimizer_criterion() -> Result<Verdict> {
    let mut w = Tensor::vector(&[0.0]);
    let mut state = AdamState::new(&[&w], AdamConfig::default());
    adam_step(&mut state, &mut [&mut w], &Gradients(vec![Tensor::vector(&[1.0])]))?;
    let step = -w.data()[0];
    verdict(
        (step - 0.0458828).abs() <= 1e-6,
        format!("first step {step:.9}, expected 0.0458828 ± 1e-6"),
    )
}

fn compositions(total: usize) -> Vec<Vec<usize>> {
    if total == 0 {
        return vec![Vec::new()];
    }
    (1..=total)
        .flat_map(|first| {
            compositions(total - first).into_iter().map(move |mut rest| {
                rest.insert(0, first);
                rest
            })
        })
        .collect()
}

fn identity_criterion() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let mut single_gap: f64 = 0.0;
    for trial in 0..500 {
        let h = [random_tensor(&[4], 3.0, &mut rng)];
        let dists = Variant::ALL
            .iter()
            .map(|&v| {
                let config = StackerConfig::new(v, 1, 0);
                let mut params = StackerParams::init(&config, trial);
                randomize(&mut params, 1.0, &mut rng);
                stack_distribution(&config, &params, &h)
            })
            .collect::<Result<Vec<_>>>()?;
        for d in &dists[1..] {
            for (a, b) in d.data().iter().zip(dists[0].data()) {
                single_gap = single_gap.max((a - b).abs());
            }
        }
    }

    let mut flat_gap: f64 = 0.0;
    for _ in 0..500 {
        let m = rng.gen_range(1..7);
        let h: Vec<Tensor> = (0..m).map(|_| random_tensor(&[4], 3.0, &mut rng)).collect();
        let mut config = StackerConfig::new(Variant::Gaussian, m, rng.gen_range(0..m));
        config.sigma = 1e6;
        let g = gaussian_stack(&h, &config)?;
        let b = bagging_stack(&h)?;
        for (x, y) in g.data().iter().zip(b.data()) {
            flat_gap = flat_gap.max((x - y).abs());
        }
    }

    let mut tree_exact = true;
    for _ in 0..500 {
        let d = rng.gen_range(1..9);
        let (l, r) = (random_tensor(&[d], 5.0, &mut rng), random_tensor(&[d], 5.0, &mut rng));
        let mut tape = Tape::new();
        let cell = TreeCellParams::zeros(d).register(&mut tape);
        let (lv, rv) = (tape.input(l.clone()), tape.input(r.clone()));
        let out = stackseg::layers::tree_cell(&mut tape, &cell, lv, rv)?;
        let expected = l.add(&r)?.scale(0.5);
        tree_exact &= tape.value(out) == &expected;
    }

    let mut lists = 0;
    let mut bmes_ok = true;
    for total in 1..=12 {
        for lengths in compositions(total) {
            let spans = bmes_decode(&bmes_encode(&lengths)?);
            let back: Vec<usize> = spans.iter().map(|&(s, e)| e - s).collect();
            bmes_ok &= back == lengths;
            lists += 1;
        }
    }

    let pass = single_gap <= 1e-12 && flat_gap <= 1e-9 && tree_exact && bmes_ok;
    verdict(
        pass,
        format!(
            "(a) m=1 gap {single_gap:.1e} (b) sigma=1e6 vs bagging {flat_gap:.1e} (c) zero tree cell exact={tree_exact} (d) {lists} length lists round-trip={bmes_ok}"
        ),
    )
}

const TOY: [&str; 10] = [
    "我们 在 北京 学习 中文",
    "今天 天气 很 好",
    "他 喜欢 看 电影",
    "这 本 书 非常 有意思",
    "明天 我 要 去 上海",
    "老师 正在 办公室 工作",
    "请 把 门 关上",
    "孩子们 在 公园 里 玩",
    "我 的 朋友 住 在 广州",
    "商店 九点 开门",
];

fn overfit_criterion() -> Result<Verdict> {
    let corpus = TOY
        .iter()
        .map(|line| SegmentedSentence::from_words(&line.split(' ').collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    let config = TrainConfig {
        max_epochs: 200,
        eval_train: true,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let trained = train_domain(&corpus, &config, 1)?;
    let elapsed = start.elapsed();
    let first_perfect = trained
        .log
        .iter()
        .find(|m| m.train.is_some_and(|p| p.f1 == 1.0))
        .map(|m| m.epoch);
    let pass = first_perfect.is_some() && elapsed < Duration::from_secs(120);
    let reached = first_perfect.map_or("never".to_string(), |e| format!("at epoch {e}"));
    let last = trained.log.last().and_then(|m| m.train).map_or(0.0, |p| p.f1);
    verdict(
        pass,
        format!("train F1 = 1.0 {reached} (final epoch {last:.4}), {}", secs(elapsed)),
    )
}

/// Settings of the synthetic transfer recipe.
const SEEDS: [u64; 3] = [1, 2, 3];
const SOURCE_EPOCHS: usize = 3;
const TARGET_EPOCHS: usize = 30;
const STACK_EPOCHS: usize = 10;
const FOLD_EPOCHS: usize = 20;
const FOLDS: usize = 5;
const ORDERS: [[usize; 3]; 3] = [[0, 1, 2], [2, 1, 0], [1, 2, 0]];
const FRACTION: f64 = 0.3;

fn epochs(n: usize) -> TrainConfig {
    TrainConfig {
        max_epochs: n,
        ..TrainConfig::default()
    }
}

/// Test F1 (in points) for one seed.
struct SeedRun {
    seed: u64,
    bench: f64,
    bagging: f64,
    /// Sequence stacker per entry of `ORDERS`.
    sequence: [f64; 3],
    small_bench: f64,
    small_sequence: f64,
    /// Time spent on everything the transfer claim needs.
    core_time: Duration,
}

struct Target {
    bench: f64,
    bagging: f64,
    sequence: Vec<f64>,
    /// Time from `clock` until the first order's stacker was scored.
    first_done: Duration,
}

fn run_target(
    sources: &[Arc<DomainModel>],
    train: &[SegmentedSentence],
    test: &[SegmentedSentence],
    seed: u64,
    orders: &[[usize; 3]],
    clock: Instant,
) -> Result<Target> {
    let target = Arc::new(train_domain(train, &epochs(TARGET_EPOCHS), seed)?.model);
    let models = [sources[0].clone(), sources[1].clone(), target.clone()];
    let bag = train_stack(
        &models,
        train,
        &StackerConfig::new(Variant::Bagging, 3, 2),
        &epochs(STACK_EPOCHS),
        seed,
    )?;
    let bench = 100.0 * corpus_f1(&*target, test)?.f1;
    let bagging = 100.0 * corpus_f1(&bag.model, test)?.f1;
    let cross_fit = CrossFit {
        model_index: 2,
        folds: FOLDS,
        train: epochs(FOLD_EPOCHS),
    };
    let mut sequence = Vec::new();
    let mut first_done = Duration::ZERO;
    for order in orders {
        let mut config = StackerConfig::new(Variant::Sequence, 3, 2);
        config.model_order = order.to_vec();
        let s = train_stack_with(
            &models,
            train,
            &config,
            &epochs(STACK_EPOCHS),
            seed,
            Some(&cross_fit),
            &mut |_| {},
        )?;
        sequence.push(100.0 * corpus_f1(&s.model, test)?.f1);
        if sequence.len() == 1 {
            first_done = clock.elapsed();
        }
    }
    Ok(Target {
        bench,
        bagging,
        sequence,
        first_done,
    })
}

fn run_seed(seed: u64) -> Result<SeedRun> {
    let start = Instant::now();
    let corpora = gen_synthetic(&SynthSpec {
        seed,
        ..SynthSpec::default()
    })?;
    let sources = [&corpora.domain_a, &corpora.domain_b]
        .iter()
        .map(|c| Ok(Arc::new(train_domain(c, &epochs(SOURCE_EPOCHS), seed)?.model)))
        .collect::<Result<Vec<_>>>()?;
    // both fractions are prefixes of one seeded shuffle
    let all = subsample(&corpora.target_train, 1.0, seed)?;
    let full = run_target(&sources, &all, &corpora.target_test, seed, &ORDERS, start)?;
    let small = subsample(&corpora.target_train, FRACTION, seed)?;
    let small = run_target(&sources, &small, &corpora.target_test, seed, &ORDERS[..1], start)?;
    let run = SeedRun {
        seed,
        bench: full.bench,
        bagging: full.bagging,
        sequence: [full.sequence[0], full.sequence[1], full.sequence[2]],
        small_bench: small.bench,
        small_sequence: small.sequence[0],
        core_time: full.first_done,
    };
    eprintln!(
        "  seed {}: bench {:.2} bagging {:.2} sequence {:.2}/{:.2}/{:.2} | at {FRACTION}: bench {:.2} sequence {:.2} | {}",
        run.seed,
        run.bench,
        run.bagging,
        run.sequence[0],
        run.sequence[1],
        run.sequence[2],
        run.small_bench,
        run.small_sequence,
        secs(start.elapsed())
    );
    Ok(run)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = xs.into_iter().fold((0.0, 0), |(s, n), x| (s + x, n + 1));
    sum / n as f64
}

fn transfer_criteria(runs: &[SeedRun]) -> [Verdict; 3] {
    let bench = mean(runs.iter().map(|r| r.bench));
    let bagging = mean(runs.iter().map(|r| r.bagging));
    let sequence = mean(runs.iter().map(|r| r.sequence[0]));
    let time: Duration = runs.iter().map(|r| r.core_time).sum();
    let transfer = Verdict {
        pass: sequence - bench >= 1.0 && sequence - bagging >= 1.0 && time < Duration::from_secs(30 * 60),
        detail: format!(
            "sequence {sequence:.2} vs benchmark {bench:.2} ({:+.2}) and bagging {bagging:.2} ({:+.2}), need +1.00 each; seeds {:?}, {}",
            sequence - bench,
            sequence - bagging,
            SEEDS,
            secs(time)
        ),
    };

    let per_order: Vec<f64> = (0..ORDERS.len())
        .map(|i| mean(runs.iter().map(|r| r.sequence[i])))
        .collect();
    let spread =
        per_order.iter().cloned().fold(f64::MIN, f64::max) - per_order.iter().cloned().fold(f64::MAX, f64::min);
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            let hi = r.sequence.iter().cloned().fold(f64::MIN, f64::max);
            let lo = r.sequence.iter().cloned().fold(f64::MAX, f64::min);
            format!("{:.2}", hi - lo)
        })
        .collect();
    let order = Verdict {
        pass: spread <= 1.0,
        detail: format!(
            "orders {:?} -> {:.2}/{:.2}/{:.2} (mean over seeds), spread {spread:.2} ≤ 1.00; per-seed spreads {}",
            ORDERS,
            per_order[0],
            per_order[1],
            per_order[2],
            per_seed.join("/")
        ),
    };

    let gap_full = mean(runs.iter().map(|r| r.sequence[0] - r.bench));
    let gap_small = mean(runs.iter().map(|r| r.small_sequence - r.small_bench));
    let trend = Verdict {
        pass: gap_small >= gap_full,
        detail: format!("sequence minus benchmark: {gap_small:+.2} at {FRACTION} of T-train, {gap_full:+.2} at 1.0"),
    };
    [transfer, order, trend]
}

fn io_error(path: &Path, source: std::io::Error) -> stackseg::Error {
    stackseg::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn determinism_criterion() -> Result<Verdict> {
    let corpora = gen_synthetic(&SynthSpec {
        seed: 11,
        shared_words: 40,
        domain_words: 40,
        source_sentences: 120,
        target_train: 40,
        target_test: 10,
        ..SynthSpec::default()
    })?;
    let config = TrainConfig {
        max_epochs: 2,
        dims: ModelDims { embed: 16, hidden: 12 },
        ..TrainConfig::default()
    };
    let cross_fit = CrossFit {
        model_index: 2,
        folds: 3,
        train: TrainConfig {
            max_epochs: 1,
            ..config.clone()
        },
    };
    let recipe = |dir: &Path| -> Result<Vec<Vec<u8>>> {
        let mut files = Vec::new();
        let mut models = Vec::new();
        let mut refs = Vec::new();
        for (name, corpus) in [
            ("a", &corpora.domain_a),
            ("b", &corpora.domain_b),
            ("t", &corpora.target_train),
        ] {
            let path = dir.join(format!("{name}.model"));
            let model = train_domain(corpus, &config, 5)?.model;
            save_model(&path, &model)?;
            refs.push(ModelRef {
                path: format!("{name}.model").into(),
                ..ModelRef::of_file(&path)?
            });
            models.push(Arc::new(model));
            files.push(path);
        }
        for variant in Variant::ALL {
            let stacker = StackerConfig::new(variant, 3, 2);
            let s = train_stack_with(
                &models,
                &corpora.target_train,
                &stacker,
                &config,
                5,
                Some(&cross_fit),
                &mut |_| {},
            )?;
            let path = dir.join(format!("{variant}.stacker"));
            save_stacker(&path, &s.model.config, &s.model.params, &refs)?;
            files.push(path);
        }
        files
            .iter()
            .map(|p| std::fs::read(p).map_err(|source| io_error(p, source)))
            .collect()
    };
    let tmp = |tag| {
        tempfile::Builder::new()
            .prefix(tag)
            .tempdir()
            .map_err(|source| io_error(&std::env::temp_dir(), source))
    };
    let (first, second) = (tmp("first")?, tmp("second")?);
    let a = recipe(first.path())?;
    let b = recipe(second.path())?;
    let same = a.iter().zip(&b).filter(|(x, y)| x == y).count();
    verdict(
        same == a.len() && a.len() == b.len(),
        format!(
            "{same}/{} model and stacker files byte-identical across two runs",
            a.len()
        ),
    )
}

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: u32| selected.is_empty() || selected.contains(&n);
    let mut outcomes: Vec<(u32, &str, Result<Verdict>)> = Vec::new();
    let mut report = |n: u32, name: &'static str, v: Result<Verdict>| {
        match &v {
            Ok(v) => println!("{} [{n}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail),
            Err(e) => println!("FAIL [{n}] {name}: error: {e}"),
        }
        outcomes.push((n, name, v));
    };

    let cheap: [(u32, &'static str, Criterion); 5] = [
        (1, "gradient suite", gradient_criterion),
        (2, "optimizer first step", optimizer_criterion),
        (3, "identity suite", identity_criterion),
        (4, "overfit toy corpus", overfit_criterion),
        (8, "determinism", determinism_criterion),
    ];
    for (n, name, f) in cheap {
        if wanted(n) {
            report(n, name, f());
        }
    }
    if wanted(5) || wanted(6) || wanted(7) {
        let runs = SEEDS.iter().map(|&s| run_seed(s)).collect::<Result<Vec<_>>>();
        let names = [
            "transfer over benchmark and bagging",
            "model-order robustness",
            "data-fraction trend",
        ];
        match runs {
            Ok(runs) => {
                for ((n, name), v) in (5..=7).zip(names).zip(transfer_criteria(&runs)) {
                    if wanted(n) {
                        report(n, name, Ok(v));
                    }
                }
            }
            Err(e) => {
                for (n, name) in (5..=7).zip(names) {
                    if wanted(n) {
                        report(n, name, Err(stackseg::Error::Data(e.to_string())));
                    }
                }
            }
        }
    }
    let failed = outcomes
        .iter()
        .filter(|(_, _, v)| !matches!(v, Ok(v) if v.pass))
        .count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
