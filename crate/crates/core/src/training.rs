//! Loss, optimizer and the mini-batch loop shared by domain-model and
//! stacker training.

use std::fmt;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{f1_score, fraction_count, shuffled_indices, Prf, SegmentedSentence};
use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::segmenter::{
    bmes_encode, forward_logits, preprocess_chars, preprocess_words, spans_from_scores, CharVocab, DomainModel,
    ModelDims, Symbol, Tag, NUM_TAGS,
};
use crate::stacking::{combine_positions, stack_scores, Stacker, StackerConfig, StackerParams, Variant};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{log_sum_exp, Tensor};

/// Negative log-likelihood of one sentence, `Σ_t -log softmax(z_t)[gold_t]`.
pub fn sentence_nll(tape: &mut Tape, scores: &[Var], gold: &[Tag]) -> Result<Var> {
    if scores.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} score vectors for {} gold tags",
            scores.len(),
            gold.len()
        )));
    }
    let terms = scores
        .iter()
        .zip(gold)
        .map(|(&z, &t)| tape.cross_entropy(z, t.code()))
        .collect::<Result<Vec<_>>>()?;
    tape.add_all(&terms)
}

/// Batch loss `-(1/N)·Σ_sentences Σ_positions log p(gold)` over `N`
/// sentences given as `(scores, gold)` pairs.
pub fn nll_loss(tape: &mut Tape, batch: &[(Vec<Var>, Vec<Tag>)]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Contract("loss over an empty batch".into()));
    }
    let sentences = batch
        .iter()
        .map(|(scores, gold)| sentence_nll(tape, scores, gold))
        .collect::<Result<Vec<_>>>()?;
    let total = tape.add_all(&sentences)?;
    tape.scale(total, 1.0 / batch.len() as f64)
}

/// Plain-value form of [`sentence_nll`].
pub fn nll_value(scores: &[[f64; NUM_TAGS]], gold: &[Tag]) -> Result<f64> {
    if scores.len() != gold.len() {
        return Err(Error::Contract(format!(
            "{} score vectors for {} gold tags",
            scores.len(),
            gold.len()
        )));
    }
    Ok(scores.iter().zip(gold).map(|(z, t)| log_sum_exp(z) - z[t.code()]).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    /// Step scale ε.
    pub step: f64,
    /// Smoothing term μ added to the root.
    pub smoothing: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.95,
            beta2: 0.95,
            step: 1e-2,
            smoothing: 1e-6,
        }
    }
}

/// Moment estimates for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor], config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect::<Vec<_>>();
        AdamState {
            config,
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn for_params<P: Parameters + ?Sized>(params: &P, config: AdamConfig) -> Self {
        Self::new(&params.tensors(), config)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One update, per element:
///
/// ```text
/// m  = β₁·m + (1-β₁)·g
/// v  = β₂·v + (1-β₂)·g²
/// M  = max(v - m², 0)
/// Θ -= ε·g / (√M + μ)
/// ```
pub fn adam_step(state: &mut AdamState, params: &mut [&mut Tensor], grads: &Gradients) -> Result<()> {
    if params.len() != grads.0.len() || params.len() != state.m.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.0.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(&grads.0).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Contract(format!(
                "parameter {i}: shape {:?}, gradient {:?}, optimizer slot {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }
    let AdamConfig {
        beta1,
        beta2,
        step,
        smoothing,
    } = state.config;
    for (i, (p, g)) in params.iter_mut().zip(&grads.0).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, (w, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g;
            v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
            let spread = (v[j] - m[j] * m[j]).max(0.0);
            *w -= step * g / (spread.sqrt() + smoothing);
        }
    }
    if params.iter().any(|p| !p.all_finite()) {
        return Err(Error::NonFinite("adam_step"));
    }
    state.t += 1;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub dev_fraction: f64,
    pub adam: AdamConfig,
    /// Sizes of a freshly trained domain model.
    pub dims: ModelDims,
    /// Also score the training split after every epoch.
    pub eval_train: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 15,
            max_epochs: 10,
            dev_fraction: 0.10,
            adam: AdamConfig::default(),
            dims: ModelDims::default(),
            eval_train: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("max_epochs must be at least 1".into()));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::Config(format!(
                "dev_fraction {} not in (0, 1)",
                self.dev_fraction
            )));
        }
        if self.dims.embed == 0 || self.dims.hidden == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean per-sentence loss over the epoch's updates.
    pub train_loss: f64,
    pub dev: Option<Prf>,
    pub train: Option<Prf>,
}

impl fmt::Display for EpochMetrics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "epoch={} train_loss={:.6}", self.epoch, self.train_loss)?;
        if let Some(d) = self.dev {
            write!(
                f,
                " dev_sentences={} dev_P={:.4} dev_R={:.4} dev_F={:.4}",
                d.sentences, d.precision, d.recall, d.f1
            )?;
        }
        if let Some(t) = self.train {
            write!(f, " train_F={:.4}", t.f1)?;
        }
        Ok(())
    }
}

/// A trained artifact with the log of the run that produced it.
#[derive(Debug, Clone)]
pub struct Trained<T> {
    pub model: T,
    pub log: Vec<EpochMetrics>,
    /// Epoch whose snapshot was kept; 0 when nothing was trained.
    pub best_epoch: usize,
}

/// Train/dev split after a seeded shuffle; dev takes `⌊fraction·n⌋`.
pub fn dev_split(n: usize, dev_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let order = shuffled_indices(n, seed);
    let dev = fraction_count(n, dev_fraction);
    let train = order[dev..].to_vec();
    let mut dev = order[..dev].to_vec();
    dev.sort_unstable();
    (train, dev)
}

/// Seeds for the split, initialization and epoch shuffles of one run.
struct RunSeeds {
    split: u64,
    init: u64,
    shuffle: ChaCha8Rng,
    folds: u64,
}

impl RunSeeds {
    fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RunSeeds {
            split: rng.gen(),
            init: rng.gen(),
            shuffle: ChaCha8Rng::seed_from_u64(rng.gen()),
            folds: rng.gen(),
        }
    }
}

/// Everything the generic loop needs to know about one kind of model.
trait Objective<P> {
    /// Loss of training examples `batch`, with `params` registered first.
    fn batch_loss(&self, params: &P, tape: &mut Tape, batch: &[usize]) -> Result<Var>;
    /// Predicted spans for example `i`.
    fn predict(&self, params: &P, i: usize) -> Result<Vec<(usize, usize)>>;
    fn gold(&self, i: usize) -> &SegmentedSentence;
}

fn evaluate<P, O: Objective<P>>(objective: &O, params: &P, examples: &[usize]) -> Result<Option<Prf>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let mut gold = Vec::with_capacity(examples.len());
    let mut predicted = Vec::with_capacity(examples.len());
    for &i in examples {
        let g = objective.gold(i);
        predicted.push(SegmentedSentence::from_spans(
            g.chars().to_vec(),
            objective.predict(params, i)?,
        )?);
        gold.push(g.clone());
    }
    f1_score(&gold, &predicted).map(Some)
}

/// Runs the epochs and keeps the snapshot with the best dev F1, earliest on
/// ties. Without dev data the last epoch wins.
fn fit<P, O>(
    objective: &O,
    mut params: P,
    train: &[usize],
    dev: &[usize],
    config: &TrainConfig,
    shuffle: &mut ChaCha8Rng,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained<P>>
where
    P: Parameters + Clone,
    O: Objective<P>,
{
    let mut adam = AdamState::for_params(&params, config.adam);
    let mut order = train.to_vec();
    let mut log = Vec::with_capacity(config.max_epochs);
    let mut best: Option<(f64, usize, P)> = None;
    for epoch in 1..=config.max_epochs {
        order.shuffle(shuffle);
        let mut loss_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let loss = objective.batch_loss(&params, &mut tape, batch)?;
            loss_sum += tape.value(loss).item() * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam_step(&mut adam, &mut params.tensors_mut(), &grads)?;
        }
        let metrics = EpochMetrics {
            epoch,
            train_loss: loss_sum / order.len().max(1) as f64,
            dev: evaluate(objective, &params, dev)?,
            train: if config.eval_train {
                evaluate(objective, &params, train)?
            } else {
                None
            },
        };
        observer(&metrics);
        log.push(metrics);
        let score = metrics.dev.map_or(f64::NEG_INFINITY, |d| d.f1);
        let improves = match &best {
            None => true,
            Some((b, _, _)) => score > *b || (dev.is_empty() && epoch == config.max_epochs),
        };
        if improves {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (_, best_epoch, model) = best.expect("at least one epoch");
    Ok(Trained { model, log, best_epoch })
}

struct DomainExample {
    sentence: SegmentedSentence,
    /// Symbols of the raw text, as seen at prediction time.
    symbols: Vec<Symbol>,
    /// Training view: symbols per word and the gold tags over them.
    train_symbols: Vec<char>,
    tags: Vec<Tag>,
}

impl DomainExample {
    fn new(sentence: &SegmentedSentence) -> Result<Self> {
        let (train_symbols, lengths) = preprocess_words(&sentence.words());
        Ok(DomainExample {
            symbols: preprocess_chars(sentence.chars()),
            sentence: sentence.clone(),
            train_symbols,
            tags: bmes_encode(&lengths)?,
        })
    }
}

struct DomainObjective {
    examples: Vec<DomainExample>,
}

impl Objective<DomainModel> for DomainObjective {
    fn batch_loss(&self, model: &DomainModel, tape: &mut Tape, batch: &[usize]) -> Result<Var> {
        let vars = model.register(tape);
        let sentences = batch
            .iter()
            .map(|&i| {
                let ex = &self.examples[i];
                let scores = forward_logits(tape, &vars, &model.vocab.ids(&ex.train_symbols))?;
                Ok((scores, ex.tags.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        nll_loss(tape, &sentences)
    }

    fn predict(&self, model: &DomainModel, i: usize) -> Result<Vec<(usize, usize)>> {
        let symbols = &self.examples[i].symbols;
        let plain: Vec<char> = symbols.iter().map(|s| s.ch).collect();
        Ok(spans_from_scores(symbols, &model.logits(&plain)?))
    }

    fn gold(&self, i: usize) -> &SegmentedSentence {
        &self.examples[i].sentence
    }
}

/// Pre-trains a domain model on `corpus`. The vocabulary comes from the
/// training split only.
pub fn train_domain(corpus: &[SegmentedSentence], config: &TrainConfig, seed: u64) -> Result<Trained<DomainModel>> {
    train_domain_with(corpus, config, seed, &mut |_| {})
}

/// [`train_domain`], reporting each epoch to `observer`.
pub fn train_domain_with(
    corpus: &[SegmentedSentence],
    config: &TrainConfig,
    seed: u64,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained<DomainModel>> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(Error::Data("cannot train on an empty corpus".into()));
    }
    let mut seeds = RunSeeds::new(seed);
    let (train, dev) = dev_split(corpus.len(), config.dev_fraction, seeds.split);
    let examples = corpus.iter().map(DomainExample::new).collect::<Result<Vec<_>>>()?;
    let vocab = CharVocab::from_symbols(train.iter().flat_map(|&i| examples[i].train_symbols.iter().copied()));
    let model = DomainModel::new("domain", vocab, config.dims, seeds.init);
    let objective = DomainObjective { examples };
    fit(&objective, model, &train, &dev, config, &mut seeds.shuffle, observer)
}

struct StackExample {
    sentence: SegmentedSentence,
    symbols: Vec<Symbol>,
    /// `features[model][position]`: frozen model logits over the per-word
    /// symbols the tags refer to.
    features: Vec<Vec<[f64; NUM_TAGS]>>,
    /// Same over the raw-text symbols; differs only when a digit or letter
    /// run spans a word boundary.
    predict_features: Option<Vec<Vec<[f64; NUM_TAGS]>>>,
    tags: Vec<Tag>,
}

struct StackObjective<'a> {
    config: &'a StackerConfig,
    examples: Vec<StackExample>,
}

impl StackObjective<'_> {
    fn spans(&self, params: &StackerParams, config: &StackerConfig, i: usize) -> Result<Vec<(usize, usize)>> {
        let ex = &self.examples[i];
        let features = ex.predict_features.as_ref().unwrap_or(&ex.features);
        Ok(spans_from_scores(
            &ex.symbols,
            &combine_positions(config, params, features)?,
        ))
    }
}

impl Objective<StackerParams> for StackObjective<'_> {
    fn batch_loss(&self, params: &StackerParams, tape: &mut Tape, batch: &[usize]) -> Result<Var> {
        let vars = params.register(tape);
        let sentences = batch
            .iter()
            .map(|&i| {
                let ex = &self.examples[i];
                let scores = (0..ex.tags.len())
                    .map(|pos| {
                        let h: Vec<Var> = ex
                            .features
                            .iter()
                            .map(|f| tape.input(Tensor::vector(&f[pos])))
                            .collect();
                        stack_scores(tape, self.config, &vars, &h)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((scores, ex.tags.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        nll_loss(tape, &sentences)
    }

    fn predict(&self, params: &StackerParams, i: usize) -> Result<Vec<(usize, usize)>> {
        self.spans(params, self.config, i)
    }

    fn gold(&self, i: usize) -> &SegmentedSentence {
        &self.examples[i].sentence
    }
}

/// Out-of-fold features for a stacked model that was itself trained on the
/// stacker's corpus.
///
/// Such a model has memorized those sentences, so its logits there are far
/// more reliable than on unseen text and a stacker trained on them learns to
/// trust it blindly. With cross-fitting the corpus is cut into `folds`
/// parts; each part gets the logits of a copy of the model retrained on the
/// other parts. The frozen model itself is still the one used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossFit {
    pub model_index: usize,
    pub folds: usize,
    /// Settings for the fold models; dimensions are taken from the model.
    pub train: TrainConfig,
}

impl CrossFit {
    fn validate(&self, m: usize, n: usize) -> Result<()> {
        if self.model_index >= m {
            return Err(Error::Config(format!(
                "cross-fit model index {} out of range for {m} models",
                self.model_index
            )));
        }
        if self.folds < 2 || self.folds > n {
            return Err(Error::Config(format!(
                "cross-fitting needs between 2 and {n} folds, got {}",
                self.folds
            )));
        }
        self.train.validate()
    }
}

/// Trains a stacker over frozen domain models on the target corpus. Only
/// stacker parameters change; the models are shared read-only.
pub fn train_stack(
    models: &[Arc<DomainModel>],
    corpus: &[SegmentedSentence],
    stacker: &StackerConfig,
    config: &TrainConfig,
    seed: u64,
) -> Result<Trained<Stacker>> {
    train_stack_with(models, corpus, stacker, config, seed, None, &mut |_| {})
}

/// [`train_stack`] with optional cross-fitting, reporting each epoch to
/// `observer`.
pub fn train_stack_with(
    models: &[Arc<DomainModel>],
    corpus: &[SegmentedSentence],
    stacker: &StackerConfig,
    config: &TrainConfig,
    seed: u64,
    cross_fit: Option<&CrossFit>,
    observer: &mut dyn FnMut(&EpochMetrics),
) -> Result<Trained<Stacker>> {
    config.validate()?;
    stacker.validate()?;
    if models.len() != stacker.m {
        return Err(Error::Config(format!(
            "stacker configured for {} models but {} given",
            stacker.m,
            models.len()
        )));
    }
    for m in models {
        m.validate()
            .map_err(|e| Error::Config(format!("model {:?} does not fit the tag set: {e}", m.name)))?;
    }
    if stacker.variant == Variant::Bagging {
        let model = Stacker::new(stacker.clone(), StackerParams::None, models.to_vec())?;
        return Ok(Trained {
            model,
            log: Vec::new(),
            best_epoch: 0,
        });
    }
    if corpus.is_empty() {
        return Err(Error::Data("cannot train a stacker on an empty corpus".into()));
    }

    if let Some(cf) = cross_fit {
        cf.validate(models.len(), corpus.len())?;
    }

    let mut seeds = RunSeeds::new(seed);
    let (train, dev) = dev_split(corpus.len(), config.dev_fraction, seeds.split);
    let mut examples = corpus
        .iter()
        .map(|sentence| {
            let (train_symbols, lengths) = preprocess_words(&sentence.words());
            let symbols = preprocess_chars(sentence.chars());
            let plain: Vec<char> = symbols.iter().map(|s| s.ch).collect();
            let features_for = |syms: &[char]| models.iter().map(|m| m.logits(syms)).collect::<Result<Vec<_>>>();
            let features = features_for(&train_symbols)?;
            let predict_features = if plain == train_symbols {
                None
            } else {
                Some(features_for(&plain)?)
            };
            Ok(StackExample {
                sentence: sentence.clone(),
                symbols,
                features,
                predict_features,
                tags: bmes_encode(&lengths)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(cf) = cross_fit {
        cross_fit_features(&mut examples, corpus, models[cf.model_index].dims(), cf, seeds.folds)?;
    }

    if stacker.variant == Variant::Gaussian {
        let objective = StackObjective {
            config: stacker,
            examples,
        };
        let mut chosen = stacker.clone();
        let mut best = f64::NEG_INFINITY;
        if !dev.is_empty() {
            for &sigma in &stacker.sigma_grid {
                let candidate = StackerConfig {
                    sigma,
                    ..stacker.clone()
                };
                let mut gold = Vec::new();
                let mut predicted = Vec::new();
                for &i in &dev {
                    let g = objective.gold(i);
                    let spans = objective.spans(&StackerParams::None, &candidate, i)?;
                    predicted.push(SegmentedSentence::from_spans(g.chars().to_vec(), spans)?);
                    gold.push(g.clone());
                }
                let f1 = f1_score(&gold, &predicted)?.f1;
                if f1 > best {
                    best = f1;
                    chosen = candidate;
                }
            }
        }
        let model = Stacker::new(chosen, StackerParams::None, models.to_vec())?;
        return Ok(Trained {
            model,
            log: Vec::new(),
            best_epoch: 0,
        });
    }

    let objective = StackObjective {
        config: stacker,
        examples,
    };
    let params = StackerParams::init(stacker, seeds.init);
    let trained = fit(&objective, params, &train, &dev, config, &mut seeds.shuffle, observer)?;
    Ok(Trained {
        model: Stacker::new(stacker.clone(), trained.model, models.to_vec())?,
        log: trained.log,
        best_epoch: trained.best_epoch,
    })
}

fn cross_fit_features(
    examples: &mut [StackExample],
    corpus: &[SegmentedSentence],
    dims: ModelDims,
    cf: &CrossFit,
    seed: u64,
) -> Result<()> {
    let order = shuffled_indices(corpus.len(), seed);
    let config = TrainConfig {
        dims,
        ..cf.train.clone()
    };
    for fold in 0..cf.folds {
        let in_fold = |j: usize| j % cf.folds == fold;
        let rest: Vec<SegmentedSentence> = order
            .iter()
            .enumerate()
            .filter(|&(j, _)| !in_fold(j))
            .map(|(_, &i)| corpus[i].clone())
            .collect();
        let fold_seed = seed.wrapping_add(fold as u64);
        let model = train_domain(&rest, &config, fold_seed)?.model;
        for (_, &i) in order.iter().enumerate().filter(|&(j, _)| in_fold(j)) {
            let ex = &mut examples[i];
            let (train_symbols, _) = preprocess_words(&ex.sentence.words());
            ex.features[cf.model_index] = model.logits(&train_symbols)?;
            if let Some(pf) = &mut ex.predict_features {
                let plain: Vec<char> = ex.symbols.iter().map(|s| s.ch).collect();
                pf[cf.model_index] = model.logits(&plain)?;
            }
        }
    }
    Ok(())
}
