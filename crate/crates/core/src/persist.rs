//! Text formats for trained models.
//!
//! A domain model file:
//!
//! ```text
//! stackseg-model 1
//! name <free text>
//! dims <embed> <hidden>
//! vocab <count> <hex code points...>
//! tensor <name> <d1>x<d2>... <values...>
//! ...
//! end
//! ```
//!
//! A stacker file names its domain models by path and SHA-256 of their
//! bytes, so a stacker never silently runs on a retrained model:
//!
//! ```text
//! stackseg-stacker 1
//! variant <name>
//! m <count>
//! target_index <k>
//! sigma <x>
//! sigma_grid <x,y,...>
//! squared_distance <bool>
//! seq_hidden <n>
//! model_order <i,j,...>
//! model <sha256> <path>
//! ...
//! tensor <name> <shape> <values...>
//! end
//! ```
//!
//! Floats use the shortest representation that parses back to the same
//! bits, so saving a loaded model reproduces the file exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::Parameters;
use crate::segmenter::{CharVocab, DomainModel, ModelDims, Scorer, NUM_TAGS};
use crate::stacking::{Stacker, StackerConfig, StackerParams, Variant};
use crate::tensor::Tensor;

const MODEL_MAGIC: &str = "stackseg-model";
const STACKER_MAGIC: &str = "stackseg-stacker";
const VERSION: &str = "1";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_tensors<P: Parameters + ?Sized>(out: &mut String, params: &P) {
    for (name, t) in params.names().iter().zip(params.tensors()) {
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        let _ = write!(out, "tensor {name} {}", shape.join("x"));
        for v in t.data() {
            let _ = write!(out, " {v:e}");
        }
        out.push('\n');
    }
}

pub fn model_to_string(model: &DomainModel) -> Result<String> {
    if model.name.contains(['\n', '\r']) {
        return Err(Error::Config("model name must be a single line".into()));
    }
    let dims = model.dims();
    let mut out = format!(
        "{MODEL_MAGIC} {VERSION}\nname {}\ndims {} {}\n",
        model.name, dims.embed, dims.hidden
    );
    let _ = write!(out, "vocab {}", model.vocab.chars().len());
    for c in model.vocab.chars() {
        let _ = write!(out, " {:x}", *c as u32);
    }
    out.push('\n');
    write_tensors(&mut out, model);
    out.push_str("end\n");
    Ok(out)
}

/// Line reader that tags errors with the file and line number.
struct Lines<'a> {
    origin: &'a str,
    lines: std::iter::Enumerate<std::str::Lines<'a>>,
    line: usize,
}

impl<'a> Lines<'a> {
    fn new(text: &'a str, origin: &'a str) -> Self {
        Lines {
            origin,
            lines: text.lines().enumerate(),
            line: 0,
        }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.origin, self.line, msg)
    }

    fn next_line(&mut self) -> Result<&'a str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => Err(self.err("unexpected end of file")),
        }
    }

    /// The rest of a line starting with `key `.
    fn field(&mut self, key: &str) -> Result<&'a str> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((k, rest)) if k == key => Ok(rest),
            _ => Err(self.err(format!("expected `{key}`"))),
        }
    }

    fn parsed<T: std::str::FromStr>(&self, s: &str, what: &str) -> Result<T> {
        s.parse().map_err(|_| self.err(format!("bad {what} {s:?}")))
    }

    fn header(&mut self, magic: &str) -> Result<()> {
        let line = self.next_line()?;
        match line.split_once(' ') {
            Some((m, v)) if m == magic && v == VERSION => Ok(()),
            Some((m, v)) if m == magic => Err(self.err(format!("unsupported version {v}"))),
            _ => Err(self.err(format!("not a {magic} file"))),
        }
    }

    fn end(&mut self) -> Result<()> {
        if self.next_line()? != "end" {
            return Err(self.err("expected `end`"));
        }
        if self.lines.next().is_some() {
            self.line += 1;
            return Err(self.err("trailing content after `end`"));
        }
        Ok(())
    }

    /// Reads tensors into `params`, which fixes their names and shapes.
    fn tensors<P: Parameters + ?Sized>(&mut self, params: &mut P) -> Result<()> {
        let names = params.names();
        for (name, slot) in names.iter().zip(params.tensors_mut()) {
            let rest = self.field("tensor")?;
            let mut parts = rest.split(' ');
            let got = parts.next().unwrap_or_default();
            if got != name {
                return Err(self.err(format!("expected tensor {name}, found {got}")));
            }
            let shape = parts
                .next()
                .unwrap_or_default()
                .split('x')
                .map(|d| self.parsed::<usize>(d, "dimension"))
                .collect::<Result<Vec<_>>>()?;
            if shape != slot.shape() {
                return Err(self.err(format!("tensor {name}: shape {shape:?}, expected {:?}", slot.shape())));
            }
            let values = parts
                .map(|v| self.parsed::<f64>(v, "value"))
                .collect::<Result<Vec<_>>>()?;
            if values.len() != slot.len() {
                return Err(self.err(format!(
                    "tensor {name}: {} values for {} slots",
                    values.len(),
                    slot.len()
                )));
            }
            *slot = Tensor::new(shape, values).map_err(|e| self.err(e.to_string()))?;
        }
        Ok(())
    }
}

pub fn model_from_str(text: &str, origin: &str) -> Result<DomainModel> {
    let mut r = Lines::new(text, origin);
    r.header(MODEL_MAGIC)?;
    let name = r.field("name")?.to_string();
    let dims: Vec<usize> = r
        .field("dims")?
        .split(' ')
        .map(|d| r.parsed(d, "dimension"))
        .collect::<Result<_>>()?;
    let dims = match dims[..] {
        [embed, hidden] if embed > 0 && hidden > 0 => ModelDims { embed, hidden },
        _ => return Err(r.err("dims needs two positive sizes")),
    };
    let vocab_line = r.field("vocab")?;
    let mut parts = vocab_line.split(' ');
    let count: usize = r.parsed(parts.next().unwrap_or_default(), "vocabulary size")?;
    let chars = parts
        .map(|h| {
            u32::from_str_radix(h, 16)
                .ok()
                .and_then(char::from_u32)
                .ok_or_else(|| r.err(format!("bad code point {h:?}")))
        })
        .collect::<Result<Vec<char>>>()?;
    if chars.len() != count {
        return Err(r.err(format!("vocabulary lists {} of {count} characters", chars.len())));
    }
    let vocab = CharVocab::from_ordered(chars).map_err(|e| r.err(e.to_string()))?;
    let mut model = DomainModel::zeros(name, vocab, dims);
    r.tensors(&mut model)?;
    r.end()?;
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: impl AsRef<Path>, model: &DomainModel) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model_to_string(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<DomainModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    model_from_str(&text, &path.display().to_string())
}

/// A domain model as referenced from a stacker file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelRef {
    pub path: PathBuf,
    pub sha256: String,
}

impl ModelRef {
    pub fn of_file(path: impl Into<PathBuf>) -> Result<Self> {
        let path = path.into();
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(ModelRef {
            sha256: sha256_hex(&bytes),
            path,
        })
    }
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn stacker_to_string(config: &StackerConfig, params: &StackerParams, models: &[ModelRef]) -> Result<String> {
    config.validate()?;
    params.check_shapes(config)?;
    if models.len() != config.m {
        return Err(Error::Config(format!(
            "{} model references for m = {}",
            models.len(),
            config.m
        )));
    }
    let mut out = format!("{STACKER_MAGIC} {VERSION}\n");
    let _ = writeln!(out, "variant {}", config.variant);
    let _ = writeln!(out, "m {}", config.m);
    let _ = writeln!(out, "target_index {}", config.target_index);
    let _ = writeln!(out, "sigma {:e}", config.sigma);
    let grid: Vec<String> = config.sigma_grid.iter().map(|s| format!("{s:e}")).collect();
    let _ = writeln!(out, "sigma_grid {}", grid.join(","));
    let _ = writeln!(out, "squared_distance {}", config.squared_distance);
    let _ = writeln!(out, "seq_hidden {}", config.seq_hidden);
    let _ = writeln!(out, "model_order {}", join(&config.model_order));
    for m in models {
        let path = m
            .path
            .to_str()
            .ok_or_else(|| Error::Config("model path is not UTF-8".into()))?;
        if path.contains(['\n', '\r']) {
            return Err(Error::Config("model path must be a single line".into()));
        }
        let _ = writeln!(out, "model {} {path}", m.sha256);
    }
    write_tensors(&mut out, params);
    out.push_str("end\n");
    Ok(out)
}

/// Parses a stacker file without touching the models it references.
pub fn stacker_from_str(text: &str, origin: &str) -> Result<(StackerConfig, StackerParams, Vec<ModelRef>)> {
    let mut r = Lines::new(text, origin);
    r.header(STACKER_MAGIC)?;
    let variant: Variant = r.field("variant")?.parse().map_err(|e: Error| r.err(e.to_string()))?;
    let m: usize = {
        let s = r.field("m")?;
        r.parsed(s, "model count")?
    };
    let target_index: usize = {
        let s = r.field("target_index")?;
        r.parsed(s, "target index")?
    };
    let mut config = StackerConfig::new(variant, m, target_index);
    config.sigma = {
        let s = r.field("sigma")?;
        r.parsed(s, "sigma")?
    };
    config.sigma_grid = {
        let s = r.field("sigma_grid")?;
        s.split(',').map(|x| r.parsed(x, "sigma")).collect::<Result<_>>()?
    };
    config.squared_distance = {
        let s = r.field("squared_distance")?;
        r.parsed(s, "flag")?
    };
    config.seq_hidden = {
        let s = r.field("seq_hidden")?;
        r.parsed(s, "hidden size")?
    };
    config.model_order = {
        let s = r.field("model_order")?;
        s.split(',')
            .map(|x| r.parsed(x, "model index"))
            .collect::<Result<_>>()?
    };
    config.validate().map_err(|e| r.err(e.to_string()))?;
    let mut models = Vec::with_capacity(m);
    for _ in 0..m {
        let rest = r.field("model")?;
        let (sha256, path) = rest
            .split_once(' ')
            .ok_or_else(|| r.err("model needs a hash and a path"))?;
        if sha256.len() != 64 || !sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(r.err(format!("bad sha256 {sha256:?}")));
        }
        models.push(ModelRef {
            path: PathBuf::from(path),
            sha256: sha256.to_string(),
        });
    }
    let mut params = StackerParams::zeros(&config);
    r.tensors(&mut params)?;
    r.end()?;
    Ok((config, params, models))
}

pub fn save_stacker(
    path: impl AsRef<Path>,
    stacker: &StackerConfig,
    params: &StackerParams,
    models: &[ModelRef],
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, stacker_to_string(stacker, params, models)?).map_err(|e| Error::io(path, e))
}

/// Resolves a referenced model: relative paths are tried against the
/// stacker's directory first, then the working directory.
fn resolve(stacker_path: &Path, model: &Path) -> PathBuf {
    if model.is_relative() {
        if let Some(dir) = stacker_path.parent() {
            let candidate = dir.join(model);
            if candidate.exists() {
                return candidate;
            }
        }
    }
    model.to_path_buf()
}

/// Loads a stacker and the domain models it references, checking each
/// model file against its recorded hash.
pub fn load_stacker(path: impl AsRef<Path>) -> Result<Stacker> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (config, params, refs) = stacker_from_str(&text, &path.display().to_string())?;
    let models = refs
        .iter()
        .map(|r| {
            let file = resolve(path, &r.path);
            let bytes = fs::read(&file).map_err(|e| Error::io(&file, e))?;
            if sha256_hex(&bytes) != r.sha256 {
                return Err(Error::Config(format!(
                    "{} does not match the hash recorded in {}",
                    file.display(),
                    path.display()
                )));
            }
            let text = String::from_utf8(bytes).map_err(|_| Error::Data(format!("{} is not UTF-8", file.display())))?;
            Ok(Arc::new(model_from_str(&text, &file.display().to_string())?))
        })
        .collect::<Result<Vec<_>>>()?;
    Stacker::new(config, params, models)
}

/// Either kind of model file.
#[derive(Debug, Clone)]
pub enum Predictor {
    Domain(DomainModel),
    Stack(Stacker),
}

impl Predictor {
    /// Loads a model file, telling the kinds apart by their header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.starts_with(STACKER_MAGIC) {
            load_stacker(path).map(Predictor::Stack)
        } else {
            model_from_str(&text, &path.display().to_string()).map(Predictor::Domain)
        }
    }
}

impl Scorer for Predictor {
    fn scores(&self, symbols: &[char]) -> Result<Vec<[f64; NUM_TAGS]>> {
        match self {
            Predictor::Domain(m) => m.scores(symbols),
            Predictor::Stack(s) => s.scores(symbols),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_model(seed: u64) -> DomainModel {
        let vocab = CharVocab::from_symbols("北京大学生".chars());
        DomainModel::new("tiny domain", vocab, ModelDims { embed: 3, hidden: 2 }, seed)
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = small_model(5);
        let text = model_to_string(&m).unwrap();
        let back = model_from_str(&text, "mem").unwrap();
        assert_eq!(back, m);
        assert_eq!(model_to_string(&back).unwrap(), text);
    }

    #[test]
    fn awkward_floats_survive() {
        let mut m = small_model(1);
        m.output.b = Tensor::vector(&[f64::MIN_POSITIVE, -0.0, 1.0 / 3.0, 1e300]);
        let back = model_from_str(&model_to_string(&m).unwrap(), "mem").unwrap();
        for (a, b) in back.output.b.data().iter().zip(m.output.b.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_files_are_parse_errors() {
        let text = model_to_string(&small_model(2)).unwrap();
        let truncated: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(model_from_str(&truncated, "m"), Err(Error::Parse { .. })));
        let wrong = text.replacen("stackseg-model 1", "stackseg-model 9", 1);
        assert!(matches!(model_from_str(&wrong, "m"), Err(Error::Parse { line: 1, .. })));
        let renamed = text.replacen("tensor fwd.w_gx", "tensor fwd.zzz", 1);
        assert!(model_from_str(&renamed, "m").is_err());
    }

    #[test]
    fn stacker_round_trip() {
        let mut config = StackerConfig::new(Variant::Sequence, 2, 1);
        config.model_order = vec![1, 0];
        config.seq_hidden = 3;
        let params = StackerParams::init(&config, 4);
        let refs = vec![
            ModelRef {
                path: "a.model".into(),
                sha256: "0".repeat(64),
            },
            ModelRef {
                path: "dir/b c.model".into(),
                sha256: "f".repeat(64),
            },
        ];
        let text = stacker_to_string(&config, &params, &refs).unwrap();
        let (c, p, r) = stacker_from_str(&text, "s").unwrap();
        assert_eq!((c, p, r), (config, params, refs));
    }

    #[test]
    fn tampered_model_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model_path = dir.path().join("a.model");
        save_model(&model_path, &small_model(3)).unwrap();
        let config = StackerConfig::new(Variant::Bagging, 1, 0);
        let refs = vec![ModelRef::of_file(&model_path).unwrap()];
        let stacker_path = dir.path().join("s.stacker");
        save_stacker(&stacker_path, &config, &StackerParams::None, &refs).unwrap();
        assert!(load_stacker(&stacker_path).is_ok());
        assert!(matches!(Predictor::load(&stacker_path), Ok(Predictor::Stack(_))));
        save_model(&model_path, &small_model(4)).unwrap();
        assert!(matches!(load_stacker(&stacker_path), Err(Error::Config(_))));
    }
}
