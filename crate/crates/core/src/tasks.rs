//! Text-to-text tasks: vocabulary, the synthetic compositional generator,
//! JSONL ingestion and few-shot splits.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, data, Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijection between token strings and ids. Ids 0..3 are reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return data("vocabulary must start with <pad> <bos> <eos> <unk>");
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return data(format!("duplicate vocabulary token {t:?}"));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Returns the id of `token`, adding it if new.
    pub fn insert(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Whitespace tokenization; unseen tokens map to `<unk>`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.tokens)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let tokens: Vec<String> = serde_json::from_str(text)?;
        Self::from_tokens(tokens)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "train-task")]
    TrainTask,
    #[serde(rename = "test-task")]
    TestTask,
}

impl Split {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train-task" => Some(Split::TrainTask),
            "test-task" => Some(Split::TestTask),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::TrainTask => "train-task",
            Split::TestTask => "test-task",
        }
    }
}

/// One input/target pair, as token ids without `<bos>`/`<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Vec<usize>,
    pub target: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub split: Split,
    pub examples: Vec<Example>,
    /// Which generator skills the task composes, when known.
    pub truth_allocation: Option<Vec<bool>>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSet {
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskSpec>,
}

impl TaskSet {
    pub fn new(vocab: Vocabulary, tasks: Vec<TaskSpec>) -> Result<Self> {
        let mut names = BTreeSet::new();
        for t in &tasks {
            if t.examples.is_empty() {
                return data(format!("task {} has no examples", t.name));
            }
            if !names.insert(t.name.as_str()) {
                return data(format!(
                    "task name {} appears in more than one task",
                    t.name
                ));
            }
            for ex in &t.examples {
                if ex
                    .input
                    .iter()
                    .chain(&ex.target)
                    .any(|&id| id >= vocab.len())
                {
                    return data(format!(
                        "task {} has token ids outside the vocabulary",
                        t.name
                    ));
                }
            }
        }
        Ok(Self { vocab, tasks })
    }

    pub fn train_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.split == Split::TrainTask)
    }

    pub fn test_tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.tasks.iter().filter(|t| t.split == Split::TestTask)
    }

    pub fn task(&self, name: &str) -> Option<&TaskSpec> {
        self.tasks.iter().find(|t| t.name == name)
    }

    /// Longest input and target (before `<eos>` is appended).
    pub fn max_lengths(&self) -> (usize, usize) {
        self.tasks
            .iter()
            .flat_map(|t| &t.examples)
            .fold((0, 0), |(i, o), e| {
                (i.max(e.input.len()), o.max(e.target.len()))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub num_generator_skills: usize,
    pub num_train_tasks: usize,
    pub num_test_tasks: usize,
    pub skills_per_task: usize,
    pub examples_per_task: usize,
    pub seq_len: usize,
    /// Size of the symbol block each generator skill permutes.
    pub symbols_per_skill: usize,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_generator_skills: 8,
            num_train_tasks: 20,
            num_test_tasks: 5,
            skills_per_task: 3,
            examples_per_task: 256,
            seq_len: 8,
            symbols_per_skill: 3,
            seed: 0,
        }
    }
}

/// A generator skill: a bijection on symbol indices that moves only the
/// symbols of its own block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolMap {
    map: Vec<usize>,
}

impl SymbolMap {
    pub fn apply(&self, symbols: &[usize]) -> Vec<usize> {
        symbols.iter().map(|&s| self.map[s]).collect()
    }

    pub fn image(&self, s: usize) -> usize {
        self.map[s]
    }
}

/// The generator's skills plus the symbol-to-token offset.
#[derive(Debug, Clone)]
pub struct CompositionalGenerator {
    pub config: GeneratorConfig,
    pub skills: Vec<SymbolMap>,
    pub num_symbols: usize,
}

/// Id of the first symbol token in generated vocabularies.
pub const FIRST_SYMBOL: usize = RESERVED.len();

impl CompositionalGenerator {
    pub fn new(config: GeneratorConfig) -> Result<Self> {
        let c = &config;
        if c.num_generator_skills == 0 {
            return config_err("num_generator_skills must be at least 1");
        }
        if c.skills_per_task == 0 || c.skills_per_task > c.num_generator_skills {
            return config_err(format!(
                "skills_per_task {} must lie in 1..={}",
                c.skills_per_task, c.num_generator_skills
            ));
        }
        if c.symbols_per_skill < 2 {
            return config_err("symbols_per_skill must be at least 2");
        }
        if c.seq_len == 0 || c.examples_per_task == 0 {
            return config_err("seq_len and examples_per_task must be positive");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
        let m = c.symbols_per_skill;
        let num_symbols = c.num_generator_skills * m;
        let skills = (0..c.num_generator_skills)
            .map(|g| {
                let mut map: Vec<usize> = (0..num_symbols).collect();
                let block: Vec<usize> = (g * m..(g + 1) * m).collect();
                // derangement of the block: every block symbol moves
                let perm = loop {
                    let mut p = block.clone();
                    p.shuffle(&mut rng);
                    if p.iter().zip(&block).all(|(a, b)| a != b) {
                        break p;
                    }
                };
                for (src, dst) in block.iter().zip(perm) {
                    map[*src] = dst;
                }
                SymbolMap { map }
            })
            .collect();
        Ok(Self {
            config,
            skills,
            num_symbols,
        })
    }

    /// Applies the allocated skills one at a time in ascending skill order.
    pub fn transform(&self, allocation: &[bool], symbols: &[usize]) -> Vec<usize> {
        let mut out = symbols.to_vec();
        for (g, active) in allocation.iter().enumerate() {
            if *active {
                out = self.skills[g].apply(&out);
            }
        }
        out
    }

    pub fn vocabulary(&self) -> Vocabulary {
        let mut v = Vocabulary::new();
        for s in 0..self.num_symbols {
            v.insert(&format!("s{s}"));
        }
        v
    }

    pub fn generate(&self) -> Result<TaskSet> {
        let c = &self.config;
        let mut rng = ChaCha8Rng::seed_from_u64(c.seed.wrapping_add(1));
        let total = c.num_train_tasks + c.num_test_tasks;
        let allocations =
            sample_allocations(c.num_generator_skills, c.skills_per_task, total, &mut rng);
        let mut tasks = Vec::with_capacity(total);
        for (i, alloc) in allocations.into_iter().enumerate() {
            let (name, split) = if i < c.num_train_tasks {
                (format!("train_{i:03}"), Split::TrainTask)
            } else {
                (
                    format!("test_{:03}", i - c.num_train_tasks),
                    Split::TestTask,
                )
            };
            let examples = (0..c.examples_per_task)
                .map(|_| {
                    let sym: Vec<usize> = (0..c.seq_len)
                        .map(|_| rng.gen_range(0..self.num_symbols))
                        .collect();
                    let out = self.transform(&alloc, &sym);
                    Example {
                        input: sym.iter().map(|s| s + FIRST_SYMBOL).collect(),
                        target: out.iter().map(|s| s + FIRST_SYMBOL).collect(),
                    }
                })
                .collect();
            tasks.push(TaskSpec {
                name,
                split,
                examples,
                truth_allocation: Some(alloc),
            });
        }
        TaskSet::new(self.vocabulary(), tasks)
    }
}

fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    config(msg)
}

/// Distinct κ-subsets while they last, then repeats.
fn sample_allocations(g: usize, k: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let mut seen = BTreeSet::new();
    let distinct = binomial(g, k);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut idx: Vec<usize> = (0..g).collect();
        idx.shuffle(rng);
        let mut chosen = idx[..k].to_vec();
        chosen.sort_unstable();
        if seen.len() < distinct && !seen.insert(chosen.clone()) {
            continue;
        }
        let mut alloc = vec![false; g];
        chosen.iter().for_each(|&i| alloc[i] = true);
        out.push(alloc);
    }
    out
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Convenience wrapper over [`CompositionalGenerator`].
pub fn generate_compositional_tasks(config: &GeneratorConfig) -> Result<TaskSet> {
    CompositionalGenerator::new(config.clone())?.generate()
}

#[derive(Debug, Serialize, Deserialize)]
struct JsonlRecord {
    task: String,
    split: String,
    input: String,
    target: String,
}

/// Reads `{task, split, input, target}` lines. The vocabulary is built from
/// whitespace tokens in order of first appearance.
pub fn load_tasks(path: impl AsRef<Path>) -> Result<TaskSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_jsonl(&text)
}

pub fn parse_jsonl(text: &str) -> Result<TaskSet> {
    let mut vocab = Vocabulary::new();
    let mut tasks: Vec<TaskSpec> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: JsonlRecord = serde_json::from_str(line)
            .map_err(|e| Error::Data(format!("line {}: parse error: {e}", lineno + 1)))?;
        let split = Split::parse(&rec.split).ok_or_else(|| {
            Error::Data(format!(
                "line {}: unknown split {:?}",
                lineno + 1,
                rec.split
            ))
        })?;
        let input: Vec<usize> = rec
            .input
            .split_whitespace()
            .map(|t| vocab.insert(t))
            .collect();
        let target: Vec<usize> = rec
            .target
            .split_whitespace()
            .map(|t| vocab.insert(t))
            .collect();
        let example = Example { input, target };
        match tasks.iter_mut().find(|t| t.name == rec.task) {
            Some(t) if t.split != split => {
                return data(format!(
                    "line {}: task {} appears in both splits",
                    lineno + 1,
                    rec.task
                ))
            }
            Some(t) => t.examples.push(example),
            None => tasks.push(TaskSpec {
                name: rec.task,
                split,
                examples: vec![example],
                truth_allocation: None,
            }),
        }
    }
    if tasks.is_empty() {
        return data("no tasks");
    }
    TaskSet::new(vocab, tasks)
}

pub fn export_jsonl(set: &TaskSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for t in &set.tasks {
        for ex in &t.examples {
            let rec = JsonlRecord {
                task: t.name.clone(),
                split: t.split.as_str().to_string(),
                input: set.vocab.detokenize(&ex.input),
                target: set.vocab.detokenize(&ex.target),
            };
            writeln!(f, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(path, e))?;
        }
    }
    Ok(())
}

/// Stable 64-bit FNV-1a, used to derive per-task seeds.
pub fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic `(support, query)` partition with `k_shots` support examples.
pub fn few_shot_split(
    task: &TaskSpec,
    k_shots: usize,
    seed: u64,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if k_shots >= task.examples.len() {
        return data(format!(
            "k_shots {k_shots} must be smaller than the {} examples of task {}",
            task.examples.len(),
            task.name
        ));
    }
    let mut idx: Vec<usize> = (0..task.examples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(&task.name));
    idx.shuffle(&mut rng);
    // both parts keep dataset order so metrics do not depend on the shuffle
    idx[..k_shots].sort_unstable();
    idx[k_shots..].sort_unstable();
    let support = idx[..k_shots]
        .iter()
        .map(|&i| task.examples[i].clone())
        .collect();
    let query = idx[k_shots..]
        .iter()
        .map(|&i| task.examples[i].clone())
        .collect();
    Ok((support, query))
}
