//! Python bindings: tokenizer, synthetic corpus, trained models, decoding,
//! metrics and the command line.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use styleforge::checkpoint::{Classifier, ModelCheckpoint};
use styleforge::decoding::{decode, DecodeConfig};
use styleforge::discriminator::StyleClassifier;
use styleforge::evaluation::{self, EvalReport};
use styleforge::model::Seq2Seq;
use styleforge::synth;
use styleforge::trainer::TrainingConfig;
use styleforge::{Direction, Error, StyleLabel, TokenSeq};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn style(s: &str) -> PyResult<StyleLabel> {
    s.parse().map_err(PyValueError::new_err)
}

fn direction(s: &str) -> PyResult<Direction> {
    s.parse().map_err(PyValueError::new_err)
}

/// BPE merge table.
#[pyclass(name = "MergeTable", frozen)]
pub struct PyMergeTable(styleforge::MergeTable);

#[pymethods]
impl PyMergeTable {
    #[staticmethod]
    fn train(corpus: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        styleforge::train_bpe(&corpus, vocab_size).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        styleforge::MergeTable::load(path).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_text(text: &str) -> PyResult<Self> {
        styleforge::MergeTable::from_text(text).map(Self).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.0.save(path).map_err(py_err)
    }

    fn to_text(&self) -> String {
        self.0.to_text()
    }

    fn encode(&self, text: &str) -> Vec<u32> {
        self.0.encode(text).0
    }

    fn decode(&self, ids: Vec<u32>) -> PyResult<String> {
        self.0.decode_ids(&ids).map_err(py_err)
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.0.vocab_size()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }
}

/// A trained style-conditioned encoder-decoder.
#[pyclass(name = "Model", frozen)]
pub struct PyModel(Seq2Seq<f32>);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(ModelCheckpoint::<f32>::load(&path).map_err(py_err)?.model))
    }

    /// Sum of token log-probabilities of `y` given `x` in style `style`.
    fn log_prob(&self, x: Vec<u32>, y: Vec<u32>, style: &str) -> PyResult<f64> {
        Ok(self.0.log_probs(&[(&x, &y)], &[self::style(style)?]).map_err(py_err)?[0])
    }

    /// Beam search into `style`; returns token ids.
    #[pyo3(signature = (x, style, beam=10, lenpen=2.0, max_len=64, mmi_lambda=None))]
    fn generate(&self, x: Vec<u32>, style: &str, beam: usize, lenpen: f64, max_len: usize, mmi_lambda: Option<f64>) -> PyResult<Vec<u32>> {
        let cfg = DecodeConfig {
            beam_size: beam,
            length_penalty: lenpen,
            max_len,
            mmi_lambda,
            n_best: beam,
        };
        Ok(decode(&self.0, &TokenSeq(x), self::style(style)?, &cfg).map_err(py_err)?.tokens.0)
    }

    /// Teacher-forced perplexity over aligned (source, target) id lists.
    #[pyo3(signature = (pairs, direction="s2t"))]
    fn perplexity(&self, pairs: Vec<(Vec<u32>, Vec<u32>)>, direction: &str) -> PyResult<f64> {
        let data: Vec<_> = pairs
            .into_iter()
            .enumerate()
            .map(|(id, (s, t))| styleforge::corpus::ParallelExample {
                id,
                src: TokenSeq(s),
                tgt: TokenSeq(t),
            })
            .collect();
        evaluation::perplexity(&self.0, &data, self::direction(direction)?).map_err(py_err)
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.0.params.count()
    }
}

/// A saved style discriminator (language-model pair or CNN).
#[pyclass(name = "Discriminator", frozen)]
pub struct PyDiscriminator(Classifier<f32>);

#[pymethods]
impl PyDiscriminator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self(Classifier::load(&path).map_err(py_err)?.0))
    }

    /// `P(TARGET | x)` per sentence.
    fn target_probs(&self, xs: Vec<Vec<u32>>) -> PyResult<Vec<f64>> {
        let rows: Vec<&[u32]> = xs.iter().map(Vec::as_slice).collect();
        self.0.target_probs(&rows).map_err(py_err)
    }

    fn hash(&self) -> String {
        self.0.hash()
    }
}

/// Synthetic parallel pairs `(informal, formal)` plus one pool per style.
#[pyfunction]
fn synth_corpus(seed: u64, n_parallel: usize, n_unlabeled_per_style: usize) -> (Vec<(String, String)>, Vec<String>, Vec<String>) {
    synth::synth_corpus(seed, n_parallel, n_unlabeled_per_style)
}

#[pyfunction]
fn informalize(formal: &str) -> String {
    synth::informalize(formal)
}

#[pyfunction]
fn formalize(informal: &str) -> String {
    synth::formalize(informal)
}

/// Corpus BLEU-4 on whitespace words, in `[0, 100]`.
#[pyfunction]
fn corpus_bleu(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    evaluation::text_bleu(&hyps, &refs).map_err(py_err)
}

#[pyfunction]
fn g_score(accuracy: f64, bleu: f64) -> PyResult<f64> {
    evaluation::g_score(accuracy, bleu).map_err(py_err)
}

/// Builds an EvalReport and returns its JSON.
#[pyfunction]
#[pyo3(signature = (bleu, accuracy=None, perplexity=None, direction="s2t", n_sentences=0, config_hash=String::new()))]
fn eval_report(bleu: f64, accuracy: Option<f64>, perplexity: Option<f64>, direction: &str, n_sentences: usize, config_hash: String) -> PyResult<String> {
    let r = EvalReport::new(bleu, accuracy, perplexity, self::direction(direction)?, n_sentences, config_hash).map_err(py_err)?;
    r.to_json().map_err(py_err)
}

/// Validates `key = value` training config text and returns its hash.
#[pyfunction]
fn config_hash(text: &str) -> PyResult<String> {
    Ok(TrainingConfig::from_text(text).map_err(py_err)?.hash())
}

/// Runs the command line with `args` (without the program name); returns
/// the exit code.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    py.detach(|| styleforge::cli::run(std::iter::once("styleforge".to_string()).chain(args)))
}

#[pymodule]
fn styleforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMergeTable>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDiscriminator>()?;
    m.add_function(wrap_pyfunction!(synth_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(informalize, m)?)?;
    m.add_function(wrap_pyfunction!(formalize, m)?)?;
    m.add_function(wrap_pyfunction!(corpus_bleu, m)?)?;
    m.add_function(wrap_pyfunction!(g_score, m)?)?;
    m.add_function(wrap_pyfunction!(eval_report, m)?)?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
