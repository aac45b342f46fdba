use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{self, AffineParams, EmbeddingTable, Initializer, LstmParams, LstmVars, Parameters};
use crate::segmenter::tags::NUM_TAGS;
use crate::segmenter::vocab::CharVocab;
use crate::tape::{Tape, Var};

/// Embedding and hidden sizes of a domain model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub embed: usize,
    pub hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            embed: 100,
            hidden: 100,
        }
    }
}

/// A character tagger pre-trained on one domain: embeddings, a Bi-LSTM and
/// an affine map from the concatenated states to the four tag logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainModel {
    pub name: String,
    pub vocab: CharVocab,
    pub embeddings: EmbeddingTable,
    pub fwd: LstmParams,
    pub bwd: LstmParams,
    pub output: AffineParams,
}

#[derive(Debug, Clone, Copy)]
pub struct DomainVars {
    embeddings: Var,
    fwd: LstmVars,
    bwd: LstmVars,
    out_w: Var,
    out_b: Var,
}

impl DomainModel {
    pub fn new(name: impl Into<String>, vocab: CharVocab, dims: ModelDims, seed: u64) -> Self {
        let mut init = Initializer::new(seed);
        let embeddings = EmbeddingTable::new(vocab.len(), dims.embed, &mut init);
        let fwd = LstmParams::new(dims.embed, dims.hidden, &mut init);
        let bwd = LstmParams::new(dims.embed, dims.hidden, &mut init);
        let output = AffineParams::new(NUM_TAGS, 2 * dims.hidden, &mut init);
        DomainModel {
            name: name.into(),
            vocab,
            embeddings,
            fwd,
            bwd,
            output,
        }
    }

    /// All parameters zero.
    pub fn zeros(name: impl Into<String>, vocab: CharVocab, dims: ModelDims) -> Self {
        let mut m = Self::new(name, vocab, dims, 0);
        for t in m.tensors_mut() {
            t.data_mut().fill(0.0);
        }
        m
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            embed: self.embeddings.dim(),
            hidden: self.fwd.hidden_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = self.dims();
        if self.embeddings.vocab_size() != self.vocab.len() {
            return Err(Error::Dimension(format!(
                "embedding table has {} rows for a vocabulary of {}",
                self.embeddings.vocab_size(),
                self.vocab.len()
            )));
        }
        for p in [&self.fwd, &self.bwd] {
            p.validate()?;
            if p.input_dim() != dims.embed || p.hidden_dim() != dims.hidden {
                return Err(Error::Dimension("forward and backward LSTMs disagree".into()));
            }
        }
        if self.output.w.shape() != [NUM_TAGS, 2 * dims.hidden] || self.output.b.shape() != [NUM_TAGS] {
            return Err(Error::Dimension(format!(
                "output layer {:?}/{:?} does not map {} states to {NUM_TAGS} tags",
                self.output.w.shape(),
                self.output.b.shape(),
                2 * dims.hidden
            )));
        }
        Ok(())
    }

    pub fn register(&self, tape: &mut Tape) -> DomainVars {
        DomainVars {
            embeddings: tape.param(&self.embeddings.rows),
            fwd: self.fwd.register(tape),
            bwd: self.bwd.register(tape),
            out_w: tape.param(&self.output.w),
            out_b: tape.param(&self.output.b),
        }
    }

    /// Tag logits for a sequence of vocabulary ids.
    pub fn logits_for_ids(&self, ids: &[usize]) -> Result<Vec<[f64; NUM_TAGS]>> {
        let mut tape = Tape::new();
        let vars = self.register(&mut tape);
        let out = forward_logits(&mut tape, &vars, ids)?;
        Ok(out.iter().map(|&v| to_array(tape.value(v).data())).collect())
    }

    /// Tag logits for preprocessed symbols.
    pub fn logits(&self, symbols: &[char]) -> Result<Vec<[f64; NUM_TAGS]>> {
        self.logits_for_ids(&self.vocab.ids(symbols))
    }
}

pub(crate) fn to_array(data: &[f64]) -> [f64; NUM_TAGS] {
    data.try_into().expect("tag-sized vector")
}

impl Parameters for DomainModel {
    fn tensors(&self) -> Vec<&crate::tensor::Tensor> {
        let mut v = self.embeddings.tensors();
        v.extend(self.fwd.tensors());
        v.extend(self.bwd.tensors());
        v.extend(self.output.tensors());
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut crate::tensor::Tensor> {
        let mut v = self.embeddings.tensors_mut();
        v.extend(self.fwd.tensors_mut());
        v.extend(self.bwd.tensors_mut());
        v.extend(self.output.tensors_mut());
        v
    }

    fn names(&self) -> Vec<String> {
        let prefixed = |prefix: &str, names: Vec<String>| -> Vec<String> {
            names.into_iter().map(|n| format!("{prefix}.{n}")).collect()
        };
        let mut v = prefixed("embeddings", self.embeddings.names());
        v.extend(prefixed("fwd", self.fwd.names()));
        v.extend(prefixed("bwd", self.bwd.names()));
        v.extend(prefixed("output", self.output.names()));
        v
    }
}

/// Per-position tag logits: embed, run the Bi-LSTM, project each state.
pub fn forward_logits(tape: &mut Tape, vars: &DomainVars, ids: &[usize]) -> Result<Vec<Var>> {
    if ids.is_empty() {
        return Err(Error::Contract("forward_logits over an empty sentence".into()));
    }
    let xs = ids
        .iter()
        .map(|&id| tape.gather(vars.embeddings, id))
        .collect::<Result<Vec<_>>>()?;
    let states = layers::bilstm(tape, &vars.fwd, &vars.bwd, &xs)?;
    states
        .into_iter()
        .map(|h| layers::affine(tape, vars.out_w, vars.out_b, h))
        .collect()
}
