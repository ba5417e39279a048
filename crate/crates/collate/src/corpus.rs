//! Datasets, random equal splitting, JSONL persistence, and the synthetic
//! task generators used in place of external corpora.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("split count {s} out of range for {n} samples")]
    SplitOutOfRange { s: usize, n: usize },
}

/// One instruction/rationale/answer triple. The rationale is absent for
/// task-style data that only carries instruction-answer pairs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub id: u64,
    pub instruction: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DatasetKind {
    #[serde(rename = "ift-general")]
    IftGeneral,
    #[serde(rename = "ift-rationale")]
    IftRationale,
    #[serde(rename = "task-train")]
    TaskTrain,
    #[serde(rename = "task-val")]
    TaskVal,
    #[serde(rename = "task-test")]
    TaskTest,
}

/// An ordered, immutable collection of samples with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub kind: DatasetKind,
    samples: Vec<TaskSample>,
}

impl Dataset {
    pub fn new(
        name: &str,
        kind: DatasetKind,
        samples: Vec<TaskSample>,
    ) -> Result<Self, CorpusError> {
        let mut seen = std::collections::HashSet::new();
        for s in &samples {
            if s.instruction.is_empty() || s.answer.is_empty() {
                return Err(CorpusError::InvalidDataset(format!(
                    "sample {} has an empty instruction or answer",
                    s.id
                )));
            }
            if matches!(&s.rationale, Some(r) if r.is_empty()) {
                return Err(CorpusError::InvalidDataset(format!(
                    "sample {} has an empty rationale",
                    s.id
                )));
            }
            if !seen.insert(s.id) {
                return Err(CorpusError::InvalidDataset(format!(
                    "duplicate sample id {}",
                    s.id
                )));
            }
        }
        Ok(Self {
            name: name.to_string(),
            kind,
            samples,
        })
    }

    /// Construction without the non-empty-field checks, for derived data such
    /// as samples augmented with generated (possibly empty) rationales.
    pub(crate) fn new_unchecked(name: &str, kind: DatasetKind, samples: Vec<TaskSample>) -> Self {
        Self {
            name: name.to_string(),
            kind,
            samples,
        }
    }

    pub fn samples(&self) -> &[TaskSample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// All instruction / rationale / answer texts, for vocabulary building.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.samples.iter().flat_map(|s| {
            [
                Some(s.instruction.as_str()),
                s.rationale.as_deref(),
                Some(s.answer.as_str()),
            ]
            .into_iter()
            .flatten()
        })
    }
}

/// Assignment of every sample to one of `S` splits: a seeded uniform
/// permutation followed by round-robin, so split sizes differ by at most one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub splits: usize,
    pub seed: u64,
    assignment: Vec<usize>,
}

impl SplitAssignment {
    pub fn split_of(&self, sample_index: usize) -> usize {
        self.assignment[sample_index]
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    /// Sample indices belonging to split `s`, in dataset order.
    pub fn indices_of(&self, s: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter(|(_, &a)| a == s)
            .map(|(i, _)| i)
            .collect()
    }

    /// Clone the members of split `s` into a new dataset.
    pub fn subset(&self, d: &Dataset, s: usize) -> Dataset {
        let samples = self
            .indices_of(s)
            .into_iter()
            .map(|i| d.samples()[i].clone())
            .collect();
        Dataset {
            name: format!("{}-split{}", d.name, s),
            kind: d.kind,
            samples,
        }
    }
}

/// Divide `d` into `s` equal splits at random (deterministic for a seed).
pub fn split_dataset(d: &Dataset, s: usize, seed: u64) -> Result<SplitAssignment, CorpusError> {
    let n = d.len();
    if s < 1 || s > n {
        return Err(CorpusError::SplitOutOfRange { s, n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let mut assignment = vec![0usize; n];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % s;
    }
    Ok(SplitAssignment {
        splits: s,
        seed,
        assignment,
    })
}

/// Load a dataset from JSONL: one object per line with keys `id`,
/// `instruction`, `answer`, and optional `rationale`.
pub fn load_jsonl(path: &Path, name: &str, kind: DatasetKind) -> Result<Dataset, CorpusError> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: TaskSample =
            serde_json::from_str(&line).map_err(|e| CorpusError::MalformedLine {
                line: i + 1,
                message: e.to_string(),
            })?;
        samples.push(sample);
    }
    Dataset::new(name, kind, samples)
}

pub fn save_jsonl(d: &Dataset, path: &Path) -> Result<(), CorpusError> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    for sample in d.samples() {
        serde_json::to_writer(&mut out, sample)
            .map_err(|e| CorpusError::InvalidDataset(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Synthetic chained-arithmetic task. Instructions look like
/// `start with 7 ; add 3 ; subtract 2 ; result ?`, the rationale walks the
/// running total (`7 plus 3 is 10 ; 10 minus 2 is 8`), and the answer is the
/// final total. Operands are single digits and totals never go negative.
pub fn synth_arithmetic(n: usize, max_ops: usize, seed: u64) -> Dataset {
    assert!((1..=4).contains(&max_ops), "max_ops must be in 1..=4");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let ops = rng.gen_range(1..=max_ops);
        let start = rng.gen_range(0..=9i64);
        let mut instruction = format!("start with {start}");
        let mut steps = Vec::new();
        let mut total = start;
        for _ in 0..ops {
            let subtract = total > 0 && rng.gen_bool(0.5);
            if subtract {
                let operand = rng.gen_range(0..=total.min(9));
                steps.push(format!("{total} minus {operand} is {}", total - operand));
                instruction.push_str(&format!(" ; subtract {operand}"));
                total -= operand;
            } else {
                let operand = rng.gen_range(0..=9);
                steps.push(format!("{total} plus {operand} is {}", total + operand));
                instruction.push_str(&format!(" ; add {operand}"));
                total += operand;
            }
        }
        instruction.push_str(" ; result ?");
        samples.push(TaskSample {
            id: id as u64,
            instruction,
            rationale: Some(steps.join(" ; ")),
            answer: total.to_string(),
        });
    }
    Dataset::new("synthetic-arithmetic", DatasetKind::TaskTrain, samples)
        .expect("generator output is valid")
}

/// Synthetic two-option parity questions, e.g. `which is even ? A. 7 B. 4`
/// with answer `B`. The rationale states the parity of both options and the
/// chosen letter.
pub fn synth_mcq(n: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n);
    for id in 0..n {
        let even = 2 * rng.gen_range(0..=4);
        let odd = 2 * rng.gen_range(0..=4) + 1;
        let ask_even = rng.gen_bool(0.5);
        let even_first = rng.gen_bool(0.5);
        let (a, b) = if even_first { (even, odd) } else { (odd, even) };
        let asked = if ask_even { "even" } else { "odd" };
        let answer = if (a % 2 == 0) == ask_even { "A" } else { "B" };
        let parity = |x: i64| if x % 2 == 0 { "even" } else { "odd" };
        samples.push(TaskSample {
            id: id as u64,
            instruction: format!("which is {asked} ? A. {a} B. {b}"),
            rationale: Some(format!(
                "{a} is {} ; {b} is {} ; so {answer}",
                parity(a),
                parity(b)
            )),
            answer: answer.to_string(),
        });
    }
    Dataset::new("synthetic-mcq", DatasetKind::TaskTrain, samples)
        .expect("generator output is valid")
}

/// Deterministic 80/10/10 train/val/test partition ordered by sample-id hash.
pub fn partition_train_val_test(d: &Dataset) -> (Dataset, Dataset, Dataset) {
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by_key(|&i| (fnv1a(d.samples()[i].id), d.samples()[i].id));
    let n = d.len();
    let n_train = n * 8 / 10;
    let n_trainval = n * 9 / 10;
    let pick = |range: std::ops::Range<usize>, suffix: &str, kind: DatasetKind| {
        let mut idx: Vec<usize> = order[range].to_vec();
        idx.sort_unstable();
        Dataset {
            name: format!("{}-{}", d.name, suffix),
            kind,
            samples: idx.into_iter().map(|i| d.samples()[i].clone()).collect(),
        }
    };
    (
        pick(0..n_train, "train", DatasetKind::TaskTrain),
        pick(n_train..n_trainval, "val", DatasetKind::TaskVal),
        pick(n_trainval..n, "test", DatasetKind::TaskTest),
    )
}

fn fnv1a(id: u64) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in id.to_le_bytes() {
        hash ^= byte as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Re-evaluate an arithmetic sample: parse the instruction, recompute the
/// chain, and check every rationale step and the stored answer. Used as the
/// generator's oracle in tests and by `gen-synthetic` verification.
pub fn verify_arithmetic_sample(sample: &TaskSample) -> Result<(), String> {
    let words: Vec<&str> = sample.instruction.split_whitespace().collect();
    if words.len() < 3 || words[0] != "start" || words[1] != "with" {
        return Err(format!("sample {}: bad instruction prefix", sample.id));
    }
    let mut total: i64 = words[2]
        .parse()
        .map_err(|_| format!("sample {}: bad start value", sample.id))?;
    let mut expected_steps = Vec::new();
    let mut i = 3;
    while i < words.len() {
        if words[i] != ";" {
            return Err(format!("sample {}: expected ';'", sample.id));
        }
        if words[i + 1] == "result" {
            if words.get(i + 2) != Some(&"?") || i + 3 != words.len() {
                return Err(format!("sample {}: bad trailer", sample.id));
            }
            break;
        }
        let operand: i64 = words[i + 2]
            .parse()
            .map_err(|_| format!("sample {}: bad operand", sample.id))?;
        let next = match words[i + 1] {
            "add" => total + operand,
            "subtract" => total - operand,
            other => return Err(format!("sample {}: unknown op {other:?}", sample.id)),
        };
        let verb = if words[i + 1] == "add" {
            "plus"
        } else {
            "minus"
        };
        expected_steps.push(format!("{total} {verb} {operand} is {next}"));
        total = next;
        i += 3;
    }
    if total < 0 {
        return Err(format!("sample {}: negative running total", sample.id));
    }
    if sample.answer != total.to_string() {
        return Err(format!(
            "sample {}: answer {} but chain yields {total}",
            sample.id, sample.answer
        ));
    }
    let expected_rationale = expected_steps.join(" ; ");
    match &sample.rationale {
        Some(r) if *r == expected_rationale => Ok(()),
        Some(r) => Err(format!(
            "sample {}: rationale {r:?} != recomputed {expected_rationale:?}",
            sample.id
        )),
        None => Err(format!("sample {}: missing rationale", sample.id)),
    }
}

/// Re-check an MCQ sample: the stored answer letter must point at the option
/// satisfying the asked property.
pub fn verify_mcq_sample(sample: &TaskSample) -> Result<(), String> {
    let words: Vec<&str> = sample.instruction.split_whitespace().collect();
    if words.len() != 8 || words[0] != "which" || words[1] != "is" {
        return Err(format!("sample {}: bad instruction shape", sample.id));
    }
    let ask_even = match words[2] {
        "even" => true,
        "odd" => false,
        other => return Err(format!("sample {}: unknown property {other:?}", sample.id)),
    };
    let a: i64 = words[5]
        .parse()
        .map_err(|_| format!("sample {}: bad option A", sample.id))?;
    let b: i64 = words[7]
        .parse()
        .map_err(|_| format!("sample {}: bad option B", sample.id))?;
    if (a % 2) == (b % 2) {
        return Err(format!("sample {}: options share a parity", sample.id));
    }
    let expected = if (a % 2 == 0) == ask_even { "A" } else { "B" };
    if sample.answer != expected {
        return Err(format!(
            "sample {}: answer {} but property points at {expected}",
            sample.id, sample.answer
        ));
    }
    if !matches!(sample.answer.as_str(), "A" | "B") {
        return Err(format!("sample {}: answer outside {{A, B}}", sample.id));
    }
    Ok(())
}
