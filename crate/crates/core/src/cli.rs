//! Command-line front end.
//!
//! Every artifact-producing subcommand writes `<artifact>.manifest.toml`
//! beside its output. The manifest records the fully resolved argument list,
//! so `stackseg replay --manifest <file>` rebuilds the artifact.

use std::ffi::OsString;
use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::data::{f1_score, format_corpus, gen_synthetic, read_corpus, write_corpus, SegmentedSentence, SynthSpec};
use crate::error::{Error, Result};
use crate::persist::{self, ModelRef, Predictor};
use crate::segmenter::{predict_spans, segment, ModelDims};
use crate::stacking::{StackerConfig, Variant};
use crate::training::{train_domain_with, train_stack_with, CrossFit, TrainConfig};

/// Seed used when none is given, so documented commands reproduce exactly.
pub const DEFAULT_SEED: u64 = 1;

#[derive(Parser, Debug)]
#[command(name = "stackseg", version, about = "Word segmentation with stacked domain models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic multi-domain benchmark.
    GenSynth {
        /// TOML file with generator settings; missing keys take defaults.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Pre-train a domain model on one corpus.
    TrainDomain {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Model name; defaults to the corpus file stem.
        #[arg(long)]
        name: Option<String>,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = ModelDims::default().embed)]
        embed: usize,
        #[arg(long, default_value_t = ModelDims::default().hidden)]
        hidden: usize,
    },
    /// Train a stacker over frozen domain models.
    TrainStack {
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
        #[arg(long, value_delimiter = ',', required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        target_index: usize,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Fixed kernel width; skips the dev-set search over the grid.
        #[arg(long)]
        sigma: Option<f64>,
        /// Model visiting order for the sequence and tree variants.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[arg(long, default_value_t = 16)]
        seq_hidden: usize,
        /// Index of a stacked model that was trained on this corpus; its
        /// training features then come from models retrained on held-out
        /// folds.
        #[arg(long)]
        cross_fit: Option<usize>,
        #[arg(long, default_value_t = 5)]
        cross_fit_folds: usize,
        /// Epochs for each fold model.
        #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
        cross_fit_epochs: usize,
        #[command(flatten)]
        train: TrainArgs,
    },
    /// Score a model or stacker on a segmented corpus.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
    },
    /// Segment raw text, one sentence per line.
    Segment {
        #[arg(long)]
        model: PathBuf,
        /// Defaults to standard input.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Concatenate corpora for a single model trained on all of them.
    Mix {
        #[arg(long, value_delimiter = ',', required = true)]
        corpora: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-run the command recorded in a manifest.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Args, Debug, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = TrainConfig::default().max_epochs)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
}

impl TrainArgs {
    fn config(&self, dims: ModelDims) -> TrainConfig {
        TrainConfig {
            max_epochs: self.epochs,
            batch_size: self.batch_size,
            dims,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl FileDigest {
    fn of(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(FileDigest {
            path: path.display().to_string(),
            sha256: persist::sha256_hex(&bytes),
        })
    }
}

/// Provenance of one artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    pub seed: Option<u64>,
    /// Resolved argument list, without the program name.
    pub args: Vec<String>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub config: toml::Table,
}

impl RunManifest {
    fn new(subcommand: &str, seed: Option<u64>, args: Vec<String>) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            subcommand: subcommand.to_string(),
            seed,
            args,
            inputs: Vec::new(),
            outputs: Vec::new(),
            config: toml::Table::new(),
        }
    }

    fn config<T: Serialize>(mut self, key: &str, value: &T) -> Result<Self> {
        let value = toml::Value::try_from(value).map_err(|e| Error::Config(e.to_string()))?;
        self.config.insert(key.to_string(), value);
        Ok(self)
    }

    fn inputs(mut self, paths: &[&Path]) -> Result<Self> {
        for p in paths {
            self.inputs.push(FileDigest::of(p)?);
        }
        Ok(self)
    }

    /// Records `outputs` and writes the manifest to `path`.
    fn write(mut self, path: &Path, outputs: &[&Path]) -> Result<()> {
        for p in outputs {
            self.outputs.push(FileDigest::of(p)?);
        }
        let text = toml::to_string(&self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), 0, e.to_string()))
    }
}

fn manifest_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.toml");
    artifact.with_file_name(name)
}

fn path_arg(p: &Path) -> String {
    p.display().to_string()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

/// Runs the tool with real standard streams and returns the exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let stdin = io::stdin();
    run(
        argv,
        &mut stdin.lock(),
        &mut io::stdout().lock(),
        &mut io::stderr().lock(),
    )
}

/// [`dispatch`] over explicit streams. Usage errors exit with 2, failures
/// inside the pipeline with 1.
pub fn run<I, T>(argv: I, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, input, out, err) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

fn io_err(e: io::Error) -> Error {
    Error::io("<stream>", e)
}

fn execute(command: Command, input: &mut dyn BufRead, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match command {
        Command::GenSynth { spec, out_dir } => {
            let text = fs::read_to_string(&spec).map_err(|e| Error::io(&spec, e))?;
            let synth: SynthSpec =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", spec.display())))?;
            let corpora = gen_synthetic(&synth)?;
            fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
            let files = [
                ("domain_a.txt", &corpora.domain_a),
                ("domain_b.txt", &corpora.domain_b),
                ("target_train.txt", &corpora.target_train),
                ("target_test.txt", &corpora.target_test),
            ];
            let mut written = Vec::new();
            for (name, corpus) in files {
                let path = out_dir.join(name);
                write_corpus(&path, corpus)?;
                let _ = writeln!(err, "wrote {} ({} sentences)", path.display(), corpus.len());
                written.push(path);
            }
            let args = vec![
                "gen-synth".into(),
                "--spec".into(),
                path_arg(&spec),
                "--out-dir".into(),
                path_arg(&out_dir),
            ];
            let outputs: Vec<&Path> = written.iter().map(PathBuf::as_path).collect();
            RunManifest::new("gen-synth", Some(synth.seed), args)
                .inputs(&[&spec])?
                .config("synth", &synth)?
                .write(&out_dir.join("manifest.toml"), &outputs)
        }
        Command::TrainDomain {
            corpus,
            out,
            name,
            train,
            embed,
            hidden,
        } => {
            let config = train.config(ModelDims { embed, hidden });
            let sentences = read_corpus(&corpus)?;
            let name = name.unwrap_or_else(|| {
                corpus
                    .file_stem()
                    .map_or_else(|| "domain".to_string(), |s| s.to_string_lossy().into_owned())
            });
            let mut trained = train_domain_with(&sentences, &config, train.seed, &mut |m| {
                let _ = writeln!(err, "{m}");
            })?;
            trained.model.name = name.clone();
            persist::save_model(&out, &trained.model)?;
            let _ = writeln!(err, "kept epoch {} -> {}", trained.best_epoch, out.display());
            let args = vec![
                "train-domain".into(),
                "--corpus".into(),
                path_arg(&corpus),
                "--out".into(),
                path_arg(&out),
                "--name".into(),
                name,
                "--epochs".into(),
                train.epochs.to_string(),
                "--seed".into(),
                train.seed.to_string(),
                "--batch-size".into(),
                train.batch_size.to_string(),
                "--embed".into(),
                embed.to_string(),
                "--hidden".into(),
                hidden.to_string(),
            ];
            RunManifest::new("train-domain", Some(train.seed), args)
                .inputs(&[&corpus])?
                .config("train", &config)?
                .write(&manifest_path(&out), &[&out])
        }
        Command::TrainStack {
            variant,
            models,
            target_index,
            corpus,
            out,
            sigma,
            order,
            seq_hidden,
            cross_fit,
            cross_fit_folds,
            cross_fit_epochs,
            train,
        } => {
            let m = models.len();
            let mut stacker = StackerConfig::new(variant, m, target_index);
            stacker.seq_hidden = seq_hidden;
            if let Some(order) = order {
                stacker.model_order = order;
            }
            if let Some(sigma) = sigma {
                stacker.sigma = sigma;
                stacker.sigma_grid = vec![sigma];
            }
            stacker.validate()?;
            let config = train.config(ModelDims::default());
            let loaded = models
                .iter()
                .map(|p| persist::load_model(p).map(Arc::new))
                .collect::<Result<Vec<_>>>()?;
            let sentences = read_corpus(&corpus)?;
            let cross_fit = cross_fit.map(|model_index| CrossFit {
                model_index,
                folds: cross_fit_folds,
                train: TrainConfig {
                    max_epochs: cross_fit_epochs,
                    ..config.clone()
                },
            });
            let trained = train_stack_with(
                &loaded,
                &sentences,
                &stacker,
                &config,
                train.seed,
                cross_fit.as_ref(),
                &mut |m| {
                    let _ = writeln!(err, "{m}");
                },
            )?;
            let refs = models
                .iter()
                .map(|p| {
                    let r = ModelRef::of_file(p)?;
                    Ok(ModelRef {
                        path: reference_path(&out, p),
                        ..r
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let chosen = &trained.model.config;
            persist::save_stacker(&out, chosen, &trained.model.params, &refs)?;
            let _ = writeln!(err, "kept epoch {} -> {}", trained.best_epoch, out.display());
            let mut args = vec![
                "train-stack".into(),
                "--variant".into(),
                variant.to_string(),
                "--models".into(),
                join(&models.iter().map(|p| path_arg(p)).collect::<Vec<_>>()),
                "--target-index".into(),
                target_index.to_string(),
                "--corpus".into(),
                path_arg(&corpus),
                "--out".into(),
                path_arg(&out),
                "--order".into(),
                join(&stacker.model_order),
                "--seq-hidden".into(),
                seq_hidden.to_string(),
                "--epochs".into(),
                train.epochs.to_string(),
                "--seed".into(),
                train.seed.to_string(),
                "--batch-size".into(),
                train.batch_size.to_string(),
            ];
            if let Some(sigma) = sigma {
                args.extend(["--sigma".into(), format!("{sigma:e}")]);
            }
            if let Some(cf) = &cross_fit {
                args.extend([
                    "--cross-fit".into(),
                    cf.model_index.to_string(),
                    "--cross-fit-folds".into(),
                    cf.folds.to_string(),
                    "--cross-fit-epochs".into(),
                    cf.train.max_epochs.to_string(),
                ]);
            }
            let mut inputs: Vec<&Path> = models.iter().map(PathBuf::as_path).collect();
            inputs.push(&corpus);
            let mut manifest = RunManifest::new("train-stack", Some(train.seed), args)
                .inputs(&inputs)?
                .config("stacker", &stacker)?
                .config("train", &config)?;
            if let Some(cf) = &cross_fit {
                manifest = manifest.config("cross_fit", cf)?;
            }
            manifest.write(&manifest_path(&out), &[&out])
        }
        Command::Eval { model, corpus } => {
            let predictor = Predictor::load(&model)?;
            let gold = read_corpus(&corpus)?;
            let predicted = gold
                .iter()
                .map(|s| SegmentedSentence::from_spans(s.chars().to_vec(), predict_spans(&predictor, s.chars())?))
                .collect::<Result<Vec<_>>>()?;
            writeln!(out, "{}", f1_score(&gold, &predicted)?).map_err(io_err)
        }
        Command::Segment { model, input: file } => {
            let predictor = Predictor::load(&model)?;
            let text = match &file {
                Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e))?,
                None => {
                    let mut s = String::new();
                    input.read_to_string(&mut s).map_err(io_err)?;
                    s
                }
            };
            for line in text.lines() {
                writeln!(out, "{}", segment(&predictor, line)?.join(" ")).map_err(io_err)?;
            }
            Ok(())
        }
        Command::Mix { corpora, out } => {
            let mut mixed = Vec::new();
            for path in &corpora {
                mixed.extend(read_corpus(path)?);
            }
            fs::write(&out, format_corpus(&mixed)).map_err(|e| Error::io(&out, e))?;
            let _ = writeln!(err, "wrote {} ({} sentences)", out.display(), mixed.len());
            let args = vec![
                "mix".into(),
                "--corpora".into(),
                join(&corpora.iter().map(|p| path_arg(p)).collect::<Vec<_>>()),
                "--out".into(),
                path_arg(&out),
            ];
            let inputs: Vec<&Path> = corpora.iter().map(PathBuf::as_path).collect();
            RunManifest::new("mix", None, args)
                .inputs(&inputs)?
                .write(&manifest_path(&out), &[&out])
        }
        Command::Replay { manifest } => {
            let recorded = RunManifest::read(&manifest)?;
            if recorded.args.first().map(String::as_str) == Some("replay") {
                return Err(Error::Config("a manifest cannot replay itself".into()));
            }
            let argv = std::iter::once("stackseg".to_string()).chain(recorded.args);
            let cli = Cli::try_parse_from(argv).map_err(|e| Error::Config(format!("manifest arguments: {e}")))?;
            execute(cli.command, input, out, err)
        }
    }
}

/// Path under which a stacker refers to a model: relative to the stacker's
/// directory when the model lives beneath it, otherwise absolute.
fn reference_path(stacker: &Path, model: &Path) -> PathBuf {
    let dir = stacker
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    match (fs::canonicalize(dir), fs::canonicalize(model)) {
        (Ok(dir), Ok(model)) => model.strip_prefix(&dir).map(Path::to_path_buf).unwrap_or(model),
        _ => model.to_path_buf(),
    }
}
