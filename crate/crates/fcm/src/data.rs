//! Byte-level tokenization, document packing with `[eod]`, batching and the
//! synthetic corpora used for desk-scale experiments.

use crate::eval::{Exemplar, Task};
use crate::tensor::IntTensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

/// Byte-level vocabulary: ids 0-255 are raw bytes, then the four specials.
pub const BOS: u32 = 256;
pub const EOD: u32 = 257;
pub const MASK: u32 = 258;
pub const PAD: u32 = 259;
pub const VOCAB_SIZE: usize = 260;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot detokenize special id {0} (use lenient mode for placeholders)")]
    SpecialId(u32),
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("sequence length {0} too short to pack (need >= 2)")]
    SeqLenTooShort(usize),
    #[error("malformed task record on line {line}: {msg}")]
    BadTaskRecord { line: usize, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn tokenize(text: &[u8]) -> Vec<u32> {
    text.iter().map(|&b| b as u32).collect()
}

/// Inverse of [`tokenize`]. Special ids are an error unless `lenient`, which
/// renders them as readable placeholders.
pub fn detokenize(ids: &[u32], lenient: bool) -> Result<Vec<u8>, DataError> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            _ if !lenient => return Err(DataError::SpecialId(id)),
            BOS => out.extend_from_slice(b"<BOS>"),
            EOD => out.extend_from_slice(b"<EOD>"),
            MASK => out.extend_from_slice(b"<MASK>"),
            PAD => out.extend_from_slice(b"<PAD>"),
            _ => out.extend_from_slice(format!("<{id}>").as_bytes()),
        }
    }
    Ok(out)
}

/// One training window: `ids[0] == BOS`, then `seq_len - 1` stream tokens.
/// `loss_weights[t]` gates the prediction of `ids[t + 1]` and is zero exactly
/// where that target is PAD.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedSequence {
    pub ids: Vec<u32>,
    pub loss_weights: Vec<f32>,
}

/// Concatenate docs with a trailing `[eod]` each, chunk the stream into windows
/// of `seq_len - 1`, prefix every window with BOS and pad the final partial
/// window with PAD. Documents split mid-stream without realignment. Pure
/// function of its inputs.
pub fn pack_corpus(docs: &[Vec<u32>], seq_len: usize) -> Result<Vec<PackedSequence>, DataError> {
    if docs.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    if seq_len < 2 {
        return Err(DataError::SeqLenTooShort(seq_len));
    }
    let mut stream = Vec::with_capacity(docs.iter().map(|d| d.len() + 1).sum());
    for doc in docs {
        debug_assert!(doc.iter().all(|&t| t != BOS && t != PAD), "specials in raw doc");
        stream.extend_from_slice(doc);
        stream.push(EOD);
    }
    let window = seq_len - 1;
    let mut out = Vec::with_capacity(stream.len().div_ceil(window));
    for chunk in stream.chunks(window) {
        let mut ids = Vec::with_capacity(seq_len);
        ids.push(BOS);
        ids.extend_from_slice(chunk);
        ids.resize(seq_len, PAD);
        let loss_weights = (1..seq_len).map(|t| if ids[t] == PAD { 0.0 } else { 1.0 }).collect();
        out.push(PackedSequence { ids, loss_weights });
    }
    Ok(out)
}

/// A batch of packed sequences, row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    /// [batch, seq_len]
    pub ids: IntTensor,
    /// [batch, seq_len - 1]
    pub loss_weights: Vec<f32>,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.ids.shape[0]
    }

    pub fn seq_len(&self) -> usize {
        self.ids.shape[1]
    }

    pub fn from_sequences(seqs: &[&PackedSequence]) -> Batch {
        assert!(!seqs.is_empty());
        let s = seqs[0].ids.len();
        let mut ids = Vec::with_capacity(seqs.len() * s);
        let mut weights = Vec::with_capacity(seqs.len() * (s - 1));
        for seq in seqs {
            assert_eq!(seq.ids.len(), s, "ragged batch");
            ids.extend_from_slice(&seq.ids);
            weights.extend_from_slice(&seq.loss_weights);
        }
        Batch { ids: IntTensor::new(vec![seqs.len(), s], ids), loss_weights: weights }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchMode {
    /// Drop the trailing partial batch.
    Train,
    /// Keep every sequence.
    Eval,
}

/// Group sequences into batches, optionally after a seeded shuffle.
pub fn make_batches(
    seqs: &[PackedSequence],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    shuffle: bool,
    mode: BatchMode,
) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    if shuffle {
        order.shuffle(rng);
    }
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        if chunk.len() < batch_size && mode == BatchMode::Train {
            break;
        }
        let rows: Vec<&PackedSequence> = chunk.iter().map(|&i| &seqs[i]).collect();
        out.push(Batch::from_sequences(&rows));
    }
    out
}

// ── Synthetic corpora ───────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthKind {
    /// "abc|abc": answer recoverable by copying the prefix.
    Copy,
    /// "abc|cba": answer is the reversed prefix.
    Reverse,
    /// "12+7=19": two-operand addition.
    Arithmetic,
}

impl SynthKind {
    pub fn parse(s: &str) -> Option<SynthKind> {
        match s {
            "copy" => Some(SynthKind::Copy),
            "reverse" => Some(SynthKind::Reverse),
            "arithmetic" => Some(SynthKind::Arithmetic),
            _ => None,
        }
    }
}

pub struct SynthData {
    pub docs: Vec<Vec<u32>>,
    /// Rendered doc strings, for disjointness checks.
    pub doc_strings: Vec<String>,
    pub mc_tasks: Vec<Task>,
    pub em_tasks: Vec<Task>,
}

const SYNTH_EVAL_INSTANCES: usize = 64;
const FEWSHOT_POOL_SIZE: usize = 16;

/// Generate `n_docs` training documents plus held-out multiple-choice and
/// exact-match tasks over instances disjoint (by string equality) from the
/// training set.
pub fn synth_corpus(kind: SynthKind, n_docs: usize, rng: &mut ChaCha8Rng) -> SynthData {
    // Draw a surplus of distinct instances, then split train/eval.
    let want = n_docs + SYNTH_EVAL_INSTANCES;
    let instances = distinct_instances(kind, want, rng);
    let (train, eval) = instances.split_at(n_docs.min(instances.len().saturating_sub(1)));

    let doc_strings: Vec<String> = train.iter().map(|i| i.render()).collect();
    let docs: Vec<Vec<u32>> = doc_strings.iter().map(|s| tokenize(s.as_bytes())).collect();

    let pool: Vec<Exemplar> = train
        .iter()
        .take(FEWSHOT_POOL_SIZE)
        .map(|i| Exemplar { prompt: i.prompt(), answer: i.answer() })
        .collect();

    let mut mc_tasks = Vec::new();
    let mut em_tasks = Vec::new();
    for inst in eval {
        let (options, answer_index) = inst.options(rng);
        mc_tasks.push(Task {
            prompt: inst.prompt(),
            options: Some(options),
            answer_index: Some(answer_index),
            target: None,
            fewshot_pool: pool.clone(),
        });
        em_tasks.push(Task {
            prompt: inst.prompt(),
            options: None,
            answer_index: None,
            target: Some(inst.answer()),
            fewshot_pool: pool.clone(),
        });
    }
    SynthData { docs, doc_strings, mc_tasks, em_tasks }
}

enum Instance {
    Text { prefix: String, answer: String },
    Sum { a: u32, b: u32 },
}

impl Instance {
    fn render(&self) -> String {
        match self {
            Instance::Text { prefix, answer } => format!("{prefix}|{answer}"),
            Instance::Sum { a, b } => format!("{a}+{b}={}", a + b),
        }
    }

    fn prompt(&self) -> String {
        match self {
            Instance::Text { prefix, .. } => format!("{prefix}|"),
            Instance::Sum { a, b } => format!("{a}+{b}="),
        }
    }

    fn answer(&self) -> String {
        match self {
            Instance::Text { answer, .. } => answer.clone(),
            Instance::Sum { a, b } => (a + b).to_string(),
        }
    }

    /// Distractor options plus the true answer, shuffled.
    fn options(&self, rng: &mut ChaCha8Rng) -> (Vec<String>, usize) {
        let mut options = match self {
            Instance::Text { answer, .. } => {
                let mut opts = vec![answer.clone()];
                let bytes = answer.as_bytes().to_vec();
                // Single-character corruptions as distractors.
                while opts.len() < 4 {
                    let mut m = bytes.clone();
                    let pos = rng.gen_range(0..m.len());
                    m[pos] = b'a' + rng.gen_range(0..26u8);
                    let cand = String::from_utf8(m).unwrap();
                    if !opts.contains(&cand) {
                        opts.push(cand);
                    }
                }
                opts
            }
            Instance::Sum { a, b } => {
                let c = a + b;
                // correct sum plus the two nearest distinct neighbors
                let low = if c == 0 { c + 2 } else { c - 1 };
                vec![c.to_string(), (c + 1).to_string(), low.to_string()]
            }
        };
        let answer = options[0].clone();
        options.shuffle(rng);
        let answer_index = options.iter().position(|o| *o == answer).unwrap();
        (options, answer_index)
    }
}

fn distinct_instances(kind: SynthKind, want: usize, rng: &mut ChaCha8Rng) -> Vec<Instance> {
    match kind {
        SynthKind::Arithmetic => {
            let mut pairs: Vec<(u32, u32)> =
                (0..50).flat_map(|a| (0..50).map(move |b| (a, b))).collect();
            pairs.shuffle(rng);
            pairs.truncate(want);
            pairs.into_iter().map(|(a, b)| Instance::Sum { a, b }).collect()
        }
        SynthKind::Copy | SynthKind::Reverse => {
            let mut seen = std::collections::HashSet::new();
            let mut out = Vec::with_capacity(want);
            while out.len() < want {
                let len = rng.gen_range(3..=6);
                let prefix: String =
                    (0..len).map(|_| (b'a' + rng.gen_range(0..26u8)) as char).collect();
                if !seen.insert(prefix.clone()) {
                    continue;
                }
                let answer = match kind {
                    SynthKind::Copy => prefix.clone(),
                    SynthKind::Reverse => prefix.chars().rev().collect(),
                    SynthKind::Arithmetic => unreachable!(),
                };
                out.push(Instance::Text { prefix, answer });
            }
            out
        }
    }
}

// ── File I/O ────────────────────────────────────────────────────────

/// Load a corpus: a UTF-8 text file with one document per line, or a
/// directory of .txt files (one document per file).
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<u32>>, DataError> {
    let mut docs = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "txt"))
            .collect();
        entries.sort();
        for p in entries {
            docs.push(tokenize(&std::fs::read(p)?));
        }
    } else {
        let file = std::fs::File::open(path)?;
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if !line.is_empty() {
                docs.push(tokenize(line.as_bytes()));
            }
        }
    }
    if docs.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, doc_strings: &[String]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path)?;
    for s in doc_strings {
        writeln!(f, "{s}")?;
    }
    Ok(())
}

/// Line-delimited JSON task records.
pub fn read_tasks(path: &Path) -> Result<Vec<Task>, DataError> {
    let file = std::fs::File::open(path)?;
    let mut tasks = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let task: Task = serde_json::from_str(&line)
            .map_err(|e| DataError::BadTaskRecord { line: i + 1, msg: e.to_string() })?;
        task.validate().map_err(|e| DataError::BadTaskRecord { line: i + 1, msg: e.to_string() })?;
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn write_tasks(path: &Path, tasks: &[Task]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path)?;
    for t in tasks {
        writeln!(f, "{}", serde_json::to_string(t).expect("task serializes"))?;
    }
    Ok(())
}
