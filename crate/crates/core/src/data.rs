//! Corpus ingestion: whitespace tokenization, vocabulary construction, the
//! five-rotation split protocol, pretrained-vector loading, dataset
//! statistics, and a synthetic corpus generator for desk-scale runs.
//!
//! Every loader is a pure function of (file bytes, seed); splits and
//! synthetic corpora draw from dedicated rng streams so regenerating them
//! never perturbs training noise.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{PAD_ID, RESERVED_IDS, UNK_ID};
use crate::rng::{stream, Domain};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::training::PreparedData;

/// Display names for the reserved ids. They never appear in corpora; a
/// literal "<unk>" token in text is an ordinary vocabulary entry.
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";

/// Which experimental role a corpus plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Train,
    Dev,
    Test,
    Unlabeled,
}

/// One document: whitespace tokens plus an optional class id into the
/// owning corpus's class table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusRow {
    pub tokens: Vec<String>,
    pub label: Option<usize>,
}

/// Token rows with a shared class-name table. Rows are never empty; empty
/// inputs are dropped at load time and only counted.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub rows: Vec<CorpusRow>,
    pub classes: Vec<String>,
    pub provenance: Provenance,
    pub dropped_empty: usize,
}

impl Corpus {
    pub fn new(provenance: Provenance) -> Self {
        Corpus {
            rows: Vec::new(),
            classes: Vec::new(),
            provenance,
            dropped_empty: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// True when every row carries a label.
    pub fn is_labeled(&self) -> bool {
        self.rows.iter().all(|r| r.label.is_some())
    }

    /// Class name of a row, if labeled.
    pub fn class_name(&self, row: usize) -> Option<&str> {
        self.rows[row]
            .label
            .map(|l| self.classes[l].as_str())
    }

    /// Label bounds and the no-empty-rows invariant.
    pub fn validate(&self) -> Result<()> {
        for (i, row) in self.rows.iter().enumerate() {
            if row.tokens.is_empty() {
                return Err(Error::invalid(format!("corpus row {i} has no tokens")));
            }
            if let Some(label) = row.label {
                if label >= self.classes.len() {
                    return Err(Error::invalid(format!(
                        "corpus row {i} has label {label} outside class table of {}",
                        self.classes.len()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Split on runs of Unicode whitespace. No lowercasing, no punctuation
/// stripping; vocabulary statistics depend on leaving text untouched.
pub fn tokenize_whitespace(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}

/// Token-to-id map. Ids 0..4 are reserved (pad, unk, bos, eos); real tokens
/// occupy a dense block above them, ordered by descending frequency with
/// ties broken by first occurrence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    counts: Vec<u64>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    fn from_entries(entries: Vec<(String, u64)>) -> Result<Self> {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut counts = Vec::with_capacity(entries.len());
        let mut ids = HashMap::with_capacity(entries.len());
        for (token, count) in entries {
            let id = RESERVED_IDS + tokens.len();
            if ids.insert(token.clone(), id).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token `{token}`")));
            }
            tokens.push(token);
            counts.push(count);
        }
        Ok(Vocabulary { tokens, counts, ids })
    }

    /// Total id count, reserved block included.
    pub fn size(&self) -> usize {
        RESERVED_IDS + self.tokens.len()
    }

    /// Id of a known token; `None` keeps unknown distinct from the unk id.
    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    /// Id of a token, mapping unknowns to the unk id.
    pub fn id(&self, token: &str) -> usize {
        self.lookup(token).unwrap_or(UNK_ID)
    }

    /// Token text for an id, reserved names included.
    pub fn token(&self, id: usize) -> Option<&str> {
        match id {
            PAD_ID => Some(PAD_TOKEN),
            UNK_ID => Some(UNK_TOKEN),
            2 => Some(BOS_TOKEN),
            3 => Some(EOS_TOKEN),
            _ => self.tokens.get(id - RESERVED_IDS).map(String::as_str),
        }
    }

    /// Training-corpus frequency of a token (0 for unknown and reserved).
    pub fn count(&self, token: &str) -> u64 {
        self.lookup(token)
            .map(|id| self.counts[id - RESERVED_IDS])
            .unwrap_or(0)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// One `token<TAB>count` line per id, in id order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (token, count) in self.tokens.iter().zip(&self.counts) {
            out.push_str(token);
            out.push('\t');
            out.push_str(&count.to_string());
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let loc = path.display().to_string();
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let (token, count) = line.split_once('\t').ok_or_else(|| Error::MalformedLine {
                path: loc.clone(),
                line: i + 1,
                reason: "expected `token<TAB>count`".into(),
            })?;
            let count: u64 = count.parse().map_err(|_| Error::MalformedLine {
                path: loc.clone(),
                line: i + 1,
                reason: format!("malformed count `{count}`"),
            })?;
            entries.push((token.to_string(), count));
        }
        Vocabulary::from_entries(entries)
    }
}

/// Build a vocabulary over one or more corpora. Tokens with frequency below
/// `min_count` map to unk. Ordering: descending frequency, ties by first
/// occurrence across the corpora in the order given.
pub fn build_vocab(corpora: &[&Corpus], min_count: u64) -> Vocabulary {
    let mut first_seen: HashMap<&str, usize> = HashMap::new();
    let mut entries: Vec<(&str, u64)> = Vec::new();
    for corpus in corpora {
        for row in &corpus.rows {
            for token in &row.tokens {
                match first_seen.get(token.as_str()) {
                    Some(&slot) => entries[slot].1 += 1,
                    None => {
                        first_seen.insert(token, entries.len());
                        entries.push((token, 1));
                    }
                }
            }
        }
    }
    // Stable sort keeps first-occurrence order among equal counts.
    entries.sort_by(|a, b| b.1.cmp(&a.1));
    let kept = entries
        .into_iter()
        .filter(|&(_, c)| c >= min_count.max(1))
        .map(|(t, c)| (t.to_string(), c))
        .collect();
    Vocabulary::from_entries(kept).expect("distinct by construction")
}

/// Parse a TSV dataset: `label<TAB>text` per line, or bare `text` for an
/// unlabeled file. The first non-blank line fixes which form the file uses;
/// mixing forms is rejected. Blank and empty-after-tokenization rows are
/// dropped and counted. CRLF is accepted everywhere.
pub fn load_tsv_dataset(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path)?;
    let loc = path.display().to_string();
    let mut corpus = Corpus::new(Provenance::Train);
    let mut class_ids: HashMap<String, usize> = HashMap::new();
    let mut labeled_mode: Option<bool> = None;
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            corpus.dropped_empty += 1;
            continue;
        }
        let split = line.split_once('\t');
        let labeled = split.is_some();
        match labeled_mode {
            None => labeled_mode = Some(labeled),
            Some(mode) if mode != labeled => {
                return Err(Error::MalformedLine {
                    path: loc,
                    line: i + 1,
                    reason: "mixed labeled and unlabeled rows in one file".into(),
                })
            }
            Some(_) => {}
        }
        let (label, body) = match split {
            Some((label, body)) => (Some(label), body),
            None => (None, line),
        };
        if let Some(label) = label {
            if label.is_empty() {
                return Err(Error::MalformedLine {
                    path: loc,
                    line: i + 1,
                    reason: "empty label before tab".into(),
                });
            }
        }
        let tokens = tokenize_whitespace(body);
        if tokens.is_empty() {
            corpus.dropped_empty += 1;
            continue;
        }
        let label = label.map(|name| {
            *class_ids.entry(name.to_string()).or_insert_with(|| {
                corpus.classes.push(name.to_string());
                corpus.classes.len() - 1
            })
        });
        corpus.rows.push(CorpusRow { tokens, label });
    }
    Ok(corpus)
}

/// Inverse of `load_tsv_dataset`: one line per row, tokens joined by single
/// spaces. Read-back reproduces rows and the class table exactly when the
/// table is in first-use order.
pub fn save_tsv_dataset(path: &Path, corpus: &Corpus) -> Result<()> {
    corpus.validate()?;
    let mut out = String::new();
    for row in &corpus.rows {
        if let Some(label) = row.label {
            out.push_str(&corpus.classes[label]);
            out.push('\t');
        }
        out.push_str(&row.tokens.join(" "));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Rotations in the split protocol.
pub const ROTATIONS: usize = 5;
/// Dev-split size at full scale; 4 x this is the train size per rotation.
pub const FULL_DEV_SIZE: usize = 1000;
/// Unlabeled subsample size at full scale.
pub const FULL_UNLABELED: usize = 10_000;
/// Smallest labeled corpus the scaled protocol accepts (10 rows per split).
pub const MIN_LABELED_ROWS: usize = 50;

/// Row indices for one rotation: dev split r, train the other four.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rotation {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
}

/// Five pairwise-disjoint dev splits over a labeled corpus plus a fixed
/// unlabeled subsample. Indices refer to the corpora given to `make_splits`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitPlan {
    pub dev: Vec<Vec<usize>>,
    pub unlabeled: Vec<usize>,
    pub seed: u64,
}

/// Deterministic split protocol: shuffle the labeled corpus by seed, carve
/// five disjoint dev splits of 1K (or n/5 below full scale), and subsample
/// up to 10K unlabeled rows. Rotation r trains on the four splits other
/// than r, so train:dev is always 4:1.
pub fn make_splits(labeled: &Corpus, unlabeled: &Corpus, seed: u64) -> Result<SplitPlan> {
    let n = labeled.len();
    if n < MIN_LABELED_ROWS {
        return Err(Error::config(format!(
            "split protocol needs at least {MIN_LABELED_ROWS} labeled rows, got {n}"
        )));
    }
    let dev_size = if n >= ROTATIONS * FULL_DEV_SIZE {
        FULL_DEV_SIZE
    } else {
        n / ROTATIONS
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, Domain::SplitShuffle, 0));
    let dev = order[..ROTATIONS * dev_size]
        .chunks(dev_size)
        .map(<[usize]>::to_vec)
        .collect();

    let m = unlabeled.len();
    let mut pool: Vec<usize> = (0..m).collect();
    pool.shuffle(&mut stream(seed, Domain::SplitShuffle, 1));
    pool.truncate(FULL_UNLABELED);

    Ok(SplitPlan {
        dev,
        unlabeled: pool,
        seed,
    })
}

impl SplitPlan {
    pub fn dev_size(&self) -> usize {
        self.dev.first().map(Vec::len).unwrap_or(0)
    }

    /// Train/dev index lists for rotation `r`.
    pub fn rotation(&self, r: usize) -> Result<Rotation> {
        if r >= self.dev.len() {
            return Err(Error::invalid(format!(
                "rotation {r} out of range ({} splits)",
                self.dev.len()
            )));
        }
        let train = self
            .dev
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != r)
            .flat_map(|(_, split)| split.iter().copied())
            .collect();
        Ok(Rotation {
            train,
            dev: self.dev[r].clone(),
        })
    }

    /// Subsample of rotation r's train split for labeled-fraction runs. The
    /// dev split is never subsampled. Fraction 1 returns the full split in
    /// protocol order; smaller fractions reshuffle deterministically by
    /// (seed, rotation) and keep at least one row.
    pub fn train_fraction(&self, r: usize, fraction: f64) -> Result<Vec<usize>> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::invalid(format!(
                "labeled fraction must be in (0, 1], got {fraction}"
            )));
        }
        let mut train = self.rotation(r)?.train;
        if fraction == 1.0 {
            return Ok(train);
        }
        train.shuffle(&mut stream(self.seed, Domain::SplitShuffle, 2 + r as u64));
        let keep = ((train.len() as f64 * fraction).round() as usize).max(1);
        train.truncate(keep);
        Ok(train)
    }

    /// Disjointness, equal split sizes, and index bounds.
    pub fn validate(&self, labeled_len: usize, unlabeled_len: usize) -> Result<()> {
        if self.dev.len() != ROTATIONS {
            return Err(Error::invalid(format!(
                "expected {ROTATIONS} dev splits, found {}",
                self.dev.len()
            )));
        }
        let size = self.dev_size();
        let mut seen = vec![false; labeled_len];
        for (r, split) in self.dev.iter().enumerate() {
            if split.len() != size {
                return Err(Error::invalid(format!(
                    "dev split {r} has {} rows, expected {size}",
                    split.len()
                )));
            }
            for &idx in split {
                if idx >= labeled_len {
                    return Err(Error::invalid(format!(
                        "dev split {r} index {idx} outside labeled corpus of {labeled_len}"
                    )));
                }
                if seen[idx] {
                    return Err(Error::invalid(format!(
                        "labeled row {idx} appears in two dev splits"
                    )));
                }
                seen[idx] = true;
            }
        }
        let mut used = vec![false; unlabeled_len];
        for &idx in &self.unlabeled {
            if idx >= unlabeled_len {
                return Err(Error::invalid(format!(
                    "unlabeled index {idx} outside corpus of {unlabeled_len}"
                )));
            }
            if used[idx] {
                return Err(Error::invalid(format!("unlabeled row {idx} selected twice")));
            }
            used[idx] = true;
        }
        Ok(())
    }

    /// Plain-text manifest: `[dev-r]` sections with one row index per line,
    /// then `[unlabeled]` and `[seed]`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (r, split) in self.dev.iter().enumerate() {
            out.push_str(&format!("[dev-{r}]\n"));
            for idx in split {
                out.push_str(&idx.to_string());
                out.push('\n');
            }
        }
        out.push_str("[unlabeled]\n");
        for idx in &self.unlabeled {
            out.push_str(&idx.to_string());
            out.push('\n');
        }
        out.push_str(&format!("[seed]\n{}\n", self.seed));
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let loc = path.display().to_string();
        let mut dev = vec![Vec::new(); ROTATIONS];
        let mut unlabeled = Vec::new();
        let mut seed: Option<u64> = None;
        let mut filled = vec![false; ROTATIONS];

        enum Section {
            Dev(usize),
            Unlabeled,
            Seed,
        }
        let mut section: Option<Section> = None;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r').trim();
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| Error::MalformedLine {
                path: loc.clone(),
                line: i + 1,
                reason,
            };
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = Some(match name {
                    "unlabeled" => Section::Unlabeled,
                    "seed" => Section::Seed,
                    _ => {
                        let r: usize = name
                            .strip_prefix("dev-")
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| bad(format!("unknown section `{name}`")))?;
                        if r >= ROTATIONS {
                            return Err(bad(format!("dev split {r} out of range")));
                        }
                        if filled[r] {
                            return Err(bad(format!("duplicate section `dev-{r}`")));
                        }
                        filled[r] = true;
                        Section::Dev(r)
                    }
                });
                continue;
            }
            let value: u64 = line
                .parse()
                .map_err(|_| bad(format!("malformed index `{line}`")))?;
            match section {
                Some(Section::Dev(r)) => dev[r].push(value as usize),
                Some(Section::Unlabeled) => unlabeled.push(value as usize),
                Some(Section::Seed) => seed = Some(value),
                None => return Err(bad("index before any section header".into())),
            }
        }
        if let Some(r) = filled.iter().position(|&f| !f) {
            return Err(Error::invalid(format!("manifest missing section `dev-{r}`")));
        }
        let seed = seed.ok_or_else(|| Error::invalid("manifest missing `[seed]` section"))?;
        Ok(SplitPlan {
            dev,
            unlabeled,
            seed,
        })
    }
}

/// Embedding table assembled from a pretrained-vector file.
#[derive(Debug, Clone)]
pub struct PretrainedVectors<F> {
    /// [vocab size, dim]; file rows for covered tokens, uniform [-0.1, 0.1]
    /// for the rest, zero padding row.
    pub table: Tensor<F>,
    /// In-vocabulary tokens found in the file.
    pub found: usize,
    /// found / non-reserved vocabulary size.
    pub coverage: f64,
}

/// Load word vectors in the plain text format: optional `count dim` header,
/// then `token v1 .. v_dim` per line. Tokens outside the vocabulary are
/// skipped; vocabulary tokens missing from the file get uniform rows in
/// [-0.1, 0.1] from the embed-init stream, exactly as scratch training
/// would. The padding row stays zero.
pub fn load_pretrained_vectors<F: Scalar>(
    path: &Path,
    vocab: &Vocabulary,
    embed_dim: usize,
    seed: u64,
) -> Result<PretrainedVectors<F>> {
    if embed_dim == 0 {
        return Err(Error::invalid("embedding dim must be positive"));
    }
    let text = fs::read_to_string(path)?;
    let loc = path.display().to_string();

    let scratch = crate::layers::init_embedding::<F, _>(
        &mut stream(seed, Domain::EmbedInit, 0),
        vocab.size(),
        embed_dim,
    );
    let mut table: Vec<F> = scratch.data().to_vec();
    let mut covered = vec![false; vocab.size()];

    let mut lines = text.lines().enumerate().peekable();
    if let Some(&(_, first)) = lines.peek() {
        let fields: Vec<&str> = first.split_whitespace().collect();
        if fields.len() == 2 {
            if let (Ok(_count), Ok(dim)) = (fields[0].parse::<u64>(), fields[1].parse::<u64>()) {
                if dim as usize != embed_dim {
                    return Err(Error::MalformedLine {
                        path: loc,
                        line: 1,
                        reason: format!(
                            "vector dim {dim} does not match configured embedding dim {embed_dim}"
                        ),
                    });
                }
                lines.next();
            }
        }
    }
    for (i, raw) in lines {
        let mut fields = raw.split_whitespace();
        let Some(token) = fields.next() else { continue };
        let values: Vec<&str> = fields.collect();
        if values.len() != embed_dim {
            return Err(Error::MalformedLine {
                path: loc.clone(),
                line: i + 1,
                reason: format!("expected {embed_dim} values, found {}", values.len()),
            });
        }
        let Some(id) = vocab.lookup(token) else { continue };
        for (j, field) in values.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::MalformedLine {
                path: loc.clone(),
                line: i + 1,
                reason: format!("malformed float `{field}`"),
            })?;
            table[id * embed_dim + j] = F::from_f64(v);
        }
        covered[id] = true;
    }
    table[PAD_ID * embed_dim..(PAD_ID + 1) * embed_dim].fill(F::from_f64(0.0));
    let found = covered.iter().filter(|&&c| c).count();
    let real = vocab.size() - RESERVED_IDS;
    let coverage = if real == 0 {
        1.0
    } else {
        found as f64 / real as f64
    };
    Ok(PretrainedVectors {
        table: Tensor::new(vec![vocab.size(), embed_dim], table)?,
        found,
        coverage,
    })
}

/// Token-length and class summary in the style used for dataset tables.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusStats {
    pub rows: usize,
    pub classes: usize,
    pub mean_len: f64,
    /// Population standard deviation of per-row token counts.
    pub std_len: f64,
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:.2}±{:.2} tokens, {} classes, {} rows",
            self.mean_len, self.std_len, self.classes, self.rows
        )
    }
}

pub fn corpus_stats(corpus: &Corpus) -> Result<CorpusStats> {
    if corpus.is_empty() {
        return Err(Error::invalid("corpus_stats on an empty corpus"));
    }
    let n = corpus.len() as f64;
    let mean = corpus.rows.iter().map(|r| r.tokens.len() as f64).sum::<f64>() / n;
    let var = corpus
        .rows
        .iter()
        .map(|r| {
            let d = r.tokens.len() as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    let mut labels: Vec<usize> = corpus.rows.iter().filter_map(|r| r.label).collect();
    labels.sort_unstable();
    labels.dedup();
    Ok(CorpusStats {
        rows: corpus.len(),
        classes: labels.len(),
        mean_len: mean,
        std_len: var.sqrt(),
    })
}

/// Generator spec for synthetic classification corpora. Tokens are named
/// `w0..w{vocab-1}` and classes `c0..c{classes-1}`; rows cycle through
/// classes so every split is class-balanced, then draw a length uniformly
/// in [min_len, max_len] and tokens i.i.d. from the class distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub vocab: usize,
    /// [classes][vocab] rows, each summing to 1.
    pub class_dist: Vec<Vec<f64>>,
    pub min_len: usize,
    pub max_len: usize,
    pub labeled_rows: usize,
    pub unlabeled_rows: usize,
    pub test_rows: usize,
    pub seed: u64,
}

const DIST_TOL: f64 = 1e-9;

impl SynthSpec {
    /// Disjoint-dominant family: class k puts `dominant` mass uniformly on
    /// its own block of `block` tokens and the rest uniformly on a shared
    /// background block no class owns. Any own-block token identifies the
    /// class exactly, so the Bayes bound below is 1 - (1-dominant)^min_len.
    /// `dominant` = 1 gives fully disjoint class vocabularies.
    pub fn disjoint_dominant(
        classes: usize,
        block: usize,
        dominant: f64,
        min_len: usize,
        max_len: usize,
        labeled_rows: usize,
        unlabeled_rows: usize,
        test_rows: usize,
        seed: u64,
    ) -> Result<Self> {
        if !(dominant > 0.0 && dominant <= 1.0) {
            return Err(Error::invalid(format!(
                "dominant mass must be in (0, 1], got {dominant}"
            )));
        }
        if block == 0 {
            return Err(Error::invalid("class block size must be positive"));
        }
        let vocab = (classes + 1) * block;
        let background = (1.0 - dominant) / block as f64;
        let own = dominant / block as f64;
        let class_dist = (0..classes)
            .map(|k| {
                let mut row = vec![0.0; vocab];
                row[k * block..(k + 1) * block].fill(own);
                row[classes * block..].fill(background);
                row
            })
            .collect();
        let spec = SynthSpec {
            classes,
            vocab,
            class_dist,
            min_len,
            max_len,
            labeled_rows,
            unlabeled_rows,
            test_rows,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid("synthetic spec needs at least 2 classes"));
        }
        if self.vocab == 0 {
            return Err(Error::invalid("synthetic vocab must be nonempty"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::invalid(format!(
                "invalid length range [{}, {}]",
                self.min_len, self.max_len
            )));
        }
        if self.labeled_rows == 0 || self.test_rows == 0 {
            return Err(Error::invalid("labeled and test row counts must be positive"));
        }
        if self.class_dist.len() != self.classes {
            return Err(Error::invalid(format!(
                "expected {} class distributions, found {}",
                self.classes,
                self.class_dist.len()
            )));
        }
        for (k, row) in self.class_dist.iter().enumerate() {
            if row.len() != self.vocab {
                return Err(Error::invalid(format!(
                    "class {k} distribution has {} entries, vocab is {}",
                    row.len(),
                    self.vocab
                )));
            }
            if row.iter().any(|&p| !p.is_finite() || p < 0.0) {
                return Err(Error::NotNormalized(format!(
                    "class {k} distribution has a negative or non-finite entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > DIST_TOL {
                return Err(Error::NotNormalized(format!(
                    "class {k} distribution sums to {sum}"
                )));
            }
        }
        Ok(())
    }

    /// Lower bound on Bayes accuracy. A token with positive probability
    /// under exactly one class certifies that class (the others assign the
    /// row probability zero), so a class-k row is classified correctly
    /// whenever it contains one; guessing covers the rest at 1/K.
    pub fn bayes_lower_bound(&self) -> f64 {
        let chance = 1.0 / self.classes as f64;
        let certified: f64 = (0..self.classes)
            .map(|k| {
                let exclusive: f64 = (0..self.vocab)
                    .filter(|&t| {
                        (0..self.classes).all(|j| j == k || self.class_dist[j][t] == 0.0)
                    })
                    .map(|t| self.class_dist[k][t])
                    .sum();
                1.0 - (1.0 - exclusive).powi(self.min_len as i32)
            })
            .sum::<f64>()
            / self.classes as f64;
        (certified.max(chance)).min(1.0)
    }

    /// Domain-shifted copy for out-of-domain runs: every class distribution
    /// blended toward uniform over the same vocabulary, so class evidence
    /// weakens but stays aligned with the source domain.
    pub fn shifted(&self, blend: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&blend) {
            return Err(Error::invalid(format!(
                "blend must be in [0, 1), got {blend}"
            )));
        }
        let uniform = 1.0 / self.vocab as f64;
        let mut out = self.clone();
        for row in &mut out.class_dist {
            for p in row.iter_mut() {
                *p = (1.0 - blend) * *p + blend * uniform;
            }
        }
        Ok(out)
    }
}

fn sample_from(cum: &[f64], u: f64) -> usize {
    cum.iter().position(|&c| u < c).unwrap_or(cum.len() - 1)
}

fn synth_corpus(
    spec: &SynthSpec,
    cum: &[Vec<f64>],
    rows: usize,
    keep_labels: bool,
    provenance: Provenance,
    stream_index: u64,
) -> Corpus {
    let mut rng = stream(spec.seed, Domain::Synth, stream_index);
    let mut corpus = Corpus::new(provenance);
    corpus.classes = (0..spec.classes).map(|k| format!("c{k}")).collect();
    for i in 0..rows {
        let k = i % spec.classes;
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let tokens = (0..len)
            .map(|_| format!("w{}", sample_from(&cum[k], rng.gen::<f64>())))
            .collect();
        corpus.rows.push(CorpusRow {
            tokens,
            label: keep_labels.then_some(k),
        });
    }
    corpus
}

/// Generate (labeled, unlabeled, test) corpora from a synthetic spec. The
/// three corpora draw from disjoint rng streams of the spec seed, so
/// resizing one never changes the others.
pub fn synth_generate(spec: &SynthSpec) -> Result<(Corpus, Corpus, Corpus)> {
    spec.validate()?;
    let cum: Vec<Vec<f64>> = spec
        .class_dist
        .iter()
        .map(|row| {
            row.iter()
                .scan(0.0, |acc, &p| {
                    *acc += p;
                    Some(*acc)
                })
                .collect()
        })
        .collect();
    let labeled = synth_corpus(spec, &cum, spec.labeled_rows, true, Provenance::Train, 0);
    let unlabeled = synth_corpus(
        spec,
        &cum,
        spec.unlabeled_rows,
        false,
        Provenance::Unlabeled,
        1,
    );
    let test = synth_corpus(spec, &cum, spec.test_rows, true, Provenance::Test, 2);
    Ok((labeled, unlabeled, test))
}

/// Encode labeled rows to id sequences truncated at `max_len`. Every row
/// must carry a label.
pub fn encode_labeled(
    corpus: &Corpus,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<Vec<(Vec<usize>, usize)>> {
    corpus
        .rows
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let label = row
                .label
                .ok_or_else(|| Error::invalid(format!("row {i} has no label")))?;
            let ids = vocab.encode(&row.tokens[..row.tokens.len().min(max_len)]);
            Ok((ids, label))
        })
        .collect()
}

/// Encode unlabeled rows to id sequences truncated at `max_len`.
pub fn encode_unlabeled(corpus: &Corpus, vocab: &Vocabulary, max_len: usize) -> Vec<Vec<usize>> {
    corpus
        .rows
        .iter()
        .map(|row| vocab.encode(&row.tokens[..row.tokens.len().min(max_len)]))
        .collect()
}

/// Assemble the training view of rotation `r`: the (possibly subsampled)
/// train split, its dev split, the plan's unlabeled subsample, and the full
/// test corpus, all encoded against one vocabulary.
#[allow(clippy::too_many_arguments)]
pub fn prepare_rotation(
    labeled: &Corpus,
    unlabeled: &Corpus,
    test: &Corpus,
    plan: &SplitPlan,
    rotation: usize,
    fraction: f64,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<PreparedData> {
    plan.validate(labeled.len(), unlabeled.len())?;
    let all_labeled = encode_labeled(labeled, vocab, max_len)?;
    let train_idx = plan.train_fraction(rotation, fraction)?;
    let dev_idx = &plan.rotation(rotation)?.dev;
    let unlabeled_rows = encode_unlabeled(unlabeled, vocab, max_len);
    Ok(PreparedData {
        labeled: train_idx.iter().map(|&i| all_labeled[i].clone()).collect(),
        unlabeled: plan
            .unlabeled
            .iter()
            .map(|&i| unlabeled_rows[i].clone())
            .collect(),
        dev: dev_idx.iter().map(|&i| all_labeled[i].clone()).collect(),
        test: encode_labeled(test, vocab, max_len)?,
    })
}
