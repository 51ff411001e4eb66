//! Corpus ingestion, vocabulary construction, padded batching, and synthetic
//! parallel tasks for desk-scale experiments.
//!
//! Corpora are pairs of aligned plain-text files (`*.src`, `*.tgt`), one
//! pre-tokenized sentence per line. Vocabulary files hold one token per line
//! in id order, reserved tokens first.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("vocab max_size must exceed the {RESERVED} reserved entries, got {0}")]
    VocabTooSmall(usize),
    #[error("line counts differ: {src} source vs {tgt} target")]
    LineCountMismatch { src: usize, tgt: usize },
    #[error("vocab file is missing reserved token {0} at its fixed position")]
    BadVocabFile(String),
    #[error("io: {0}")]
    Io(#[from] io::Error),
}

const RESERVED: usize = 4;

/// Token/id mapping with four fixed reserved entries.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, usize>,
    id_to_token: Vec<String>,
}

impl Vocab {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const UNK: usize = 3;

    pub const RESERVED_TOKENS: [&'static str; RESERVED] = ["<pad>", "<s>", "</s>", "<unk>"];

    /// Count whitespace tokens over the corpus and keep the most frequent
    /// `max_size - 4`, ties broken by first occurrence.
    pub fn build<'a>(
        lines: impl IntoIterator<Item = &'a str>,
        max_size: usize,
    ) -> Result<Vocab, DataError> {
        if max_size <= RESERVED {
            return Err(DataError::VocabTooSmall(max_size));
        }
        let mut counts: HashMap<&str, (usize, usize)> = HashMap::new(); // token -> (count, first index)
        let mut next_index = 0usize;
        let mut saw_any_line = false;
        for line in lines {
            saw_any_line = true;
            for tok in line.split_whitespace() {
                let e = counts.entry(tok).or_insert((0, next_index));
                if e.0 == 0 {
                    e.1 = next_index;
                    next_index += 1;
                }
                e.0 += 1;
            }
        }
        if !saw_any_line {
            return Err(DataError::EmptyCorpus);
        }
        let mut ranked: Vec<(&str, (usize, usize))> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1 .0.cmp(&a.1 .0).then(a.1 .1.cmp(&b.1 .1)));
        ranked.truncate(max_size - RESERVED);

        let mut id_to_token: Vec<String> = Self::RESERVED_TOKENS
            .iter()
            .map(|s| s.to_string())
            .collect();
        id_to_token.extend(ranked.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id for a token, falling back to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(Self::UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.id_to_token[id]
    }

    pub fn encode_line(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Join ids back into a sentence, skipping pads and sentence markers.
    pub fn decode_ids(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids
            .iter()
            .filter(|&&id| id != Self::PAD && id != Self::BOS && id != Self::EOS)
            .map(|&id| self.token(id))
            .collect();
        toks.join(" ")
    }

    /// One token per line in id order.
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        write_atomic(path, self.id_to_token.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, DataError> {
        let text = fs::read_to_string(path)?;
        let id_to_token: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        for (i, tok) in Self::RESERVED_TOKENS.iter().enumerate() {
            if id_to_token.get(i).map(|s| s.as_str()) != Some(*tok) {
                return Err(DataError::BadVocabFile(tok.to_string()));
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

/// A padded batch. Row `i` holds `src_lens[i]` real source ids and a target
/// wrapped in `<s> ... </s>` with `tgt_lens[i]` real entries; positions past
/// the lengths are `<pad>`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub src: Vec<Vec<usize>>,
    pub src_lens: Vec<usize>,
    pub tgt: Vec<Vec<usize>>,
    pub tgt_lens: Vec<usize>,
    /// Index of each row in the original pair list, for diagnostics.
    pub pair_indices: Vec<usize>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }

    /// Source row trimmed of padding.
    pub fn src_row(&self, i: usize) -> &[usize] {
        &self.src[i][..self.src_lens[i]]
    }

    /// Wrapped target row trimmed of padding.
    pub fn tgt_row(&self, i: usize) -> &[usize] {
        &self.tgt[i][..self.tgt_lens[i]]
    }
}

/// Encode whitespace-tokenized pairs into padded batches of at most
/// `batch_size` rows, preserving pair order.
pub fn encode_batch(
    pairs: &[(String, String)],
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
    batch_size: usize,
) -> Vec<Batch> {
    let indexed: Vec<usize> = (0..pairs.len()).collect();
    encode_batch_indexed(pairs, &indexed, vocab_src, vocab_tgt, batch_size)
}

/// Like [`encode_batch`] but batching an explicit list of pair indices, so a
/// training loop can shuffle and length-sort without copying the corpus.
pub fn encode_batch_indexed(
    pairs: &[(String, String)],
    order: &[usize],
    vocab_src: &Vocab,
    vocab_tgt: &Vocab,
    batch_size: usize,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch_size must be positive");
    let mut out = Vec::new();
    for chunk in order.chunks(batch_size) {
        let rows: Vec<(Vec<usize>, Vec<usize>)> = chunk
            .iter()
            .map(|&i| {
                let (src, tgt) = &pairs[i];
                let src_ids = vocab_src.encode_line(src);
                let mut tgt_ids = vec![Vocab::BOS];
                tgt_ids.extend(vocab_tgt.encode_line(tgt));
                tgt_ids.push(Vocab::EOS);
                (src_ids, tgt_ids)
            })
            .collect();
        let src_w = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0);
        let tgt_w = rows.iter().map(|(_, t)| t.len()).max().unwrap_or(0);
        let mut batch = Batch {
            src: Vec::with_capacity(rows.len()),
            src_lens: Vec::with_capacity(rows.len()),
            tgt: Vec::with_capacity(rows.len()),
            tgt_lens: Vec::with_capacity(rows.len()),
            pair_indices: chunk.to_vec(),
        };
        for (mut s, mut t) in rows {
            batch.src_lens.push(s.len());
            batch.tgt_lens.push(t.len());
            s.resize(src_w, Vocab::PAD);
            t.resize(tgt_w, Vocab::PAD);
            batch.src.push(s);
            batch.tgt.push(t);
        }
        out.push(batch);
    }
    out
}

/// Synthetic parallel tasks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticTask {
    /// Target equals the source.
    Copy,
    /// Target is the reversed source.
    Reverse,
    /// The source stutters each token 1..=3 times; the target emits each run
    /// once. Over-translation shows up directly as duplicate n-grams.
    RepeatTrap,
}

impl SyntheticTask {
    pub fn parse(s: &str) -> Option<SyntheticTask> {
        match s {
            "copy" => Some(SyntheticTask::Copy),
            "reverse" => Some(SyntheticTask::Reverse),
            "repeat-trap" => Some(SyntheticTask::RepeatTrap),
            _ => None,
        }
    }
}

/// A generated corpus, already split 90/5/5 by a content hash of the source
/// line so splits are disjoint by construction.
#[derive(Debug, Default)]
pub struct SyntheticCorpus {
    pub train: Vec<(String, String)>,
    pub valid: Vec<(String, String)>,
    pub test: Vec<(String, String)>,
}

/// FNV-1a 64-bit, the split hash. Fixed constants, stable across runs.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

fn split_of(src_line: &str) -> usize {
    // 0..17 train, 18 valid, 19 test
    (fnv1a64(src_line.as_bytes()) % 20) as usize
}

/// Generate `count` pairs for the task. Tokens are decimal ids below
/// `vocab_size`. `len_range` bounds the source length inclusive.
pub fn gen_synthetic(
    task: SyntheticTask,
    count: usize,
    vocab_size: usize,
    len_range: (usize, usize),
    seed: u64,
) -> SyntheticCorpus {
    assert!(vocab_size >= 5, "vocab_size must be at least 5");
    let (lo, hi) = len_range;
    assert!(lo >= 1 && lo <= hi, "invalid length range");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut corpus = SyntheticCorpus::default();
    for _ in 0..count {
        let (src, tgt) = gen_pair(task, vocab_size, lo, hi, &mut rng);
        let bucket = split_of(&src);
        let pair = (src, tgt);
        match bucket {
            18 => corpus.valid.push(pair),
            19 => corpus.test.push(pair),
            _ => corpus.train.push(pair),
        }
    }
    corpus
}

fn gen_pair(
    task: SyntheticTask,
    vocab_size: usize,
    lo: usize,
    hi: usize,
    rng: &mut ChaCha8Rng,
) -> (String, String) {
    let src_len = rng.gen_range(lo..=hi);
    match task {
        SyntheticTask::Copy | SyntheticTask::Reverse => {
            let toks: Vec<String> = (0..src_len)
                .map(|_| rng.gen_range(0..vocab_size).to_string())
                .collect();
            let src = toks.join(" ");
            let tgt = if task == SyntheticTask::Copy {
                src.clone()
            } else {
                toks.iter().rev().cloned().collect::<Vec<_>>().join(" ")
            };
            (src, tgt)
        }
        SyntheticTask::RepeatTrap => {
            // Runs of one token repeated 1..=3 times; adjacent runs use
            // distinct tokens so run-length collapse is unambiguous.
            let mut src = Vec::with_capacity(src_len);
            let mut tgt = Vec::new();
            let mut prev_tok = usize::MAX;
            while src.len() < src_len {
                let mut tok = rng.gen_range(0..vocab_size);
                while tok == prev_tok {
                    tok = rng.gen_range(0..vocab_size);
                }
                prev_tok = tok;
                let reps = rng.gen_range(1..=3usize).min(src_len - src.len());
                for _ in 0..reps {
                    src.push(tok.to_string());
                }
                tgt.push(tok.to_string());
            }
            (src.join(" "), tgt.join(" "))
        }
    }
}

/// Collapse stuttered runs, the reference transform of the repeat-trap task.
pub fn collapse_runs(line: &str) -> String {
    let mut out: Vec<&str> = Vec::new();
    for tok in line.split_whitespace() {
        if out.last() != Some(&tok) {
            out.push(tok);
        }
    }
    out.join(" ")
}

/// Write `name.src` / `name.tgt` pairs for the three splits under `dir`.
pub fn write_corpus(dir: &Path, corpus: &SyntheticCorpus) -> Result<(), DataError> {
    fs::create_dir_all(dir)?;
    for (name, pairs) in [
        ("train", &corpus.train),
        ("valid", &corpus.valid),
        ("test", &corpus.test),
    ] {
        let mut src = String::new();
        let mut tgt = String::new();
        for (s, t) in pairs.iter() {
            src.push_str(s);
            src.push('\n');
            tgt.push_str(t);
            tgt.push('\n');
        }
        write_atomic(&dir.join(format!("{name}.src")), src)?;
        write_atomic(&dir.join(format!("{name}.tgt")), tgt)?;
    }
    Ok(())
}

/// Read an aligned pair of corpus files.
pub fn read_parallel(src: &Path, tgt: &Path) -> Result<Vec<(String, String)>, DataError> {
    let s = fs::read_to_string(src)?;
    let t = fs::read_to_string(tgt)?;
    let src_lines: Vec<&str> = s.lines().collect();
    let tgt_lines: Vec<&str> = t.lines().collect();
    if src_lines.len() != tgt_lines.len() {
        return Err(DataError::LineCountMismatch {
            src: src_lines.len(),
            tgt: tgt_lines.len(),
        });
    }
    Ok(src_lines
        .into_iter()
        .zip(tgt_lines)
        .map(|(a, b)| (a.to_string(), b.to_string()))
        .collect())
}

pub fn read_lines(path: &Path) -> Result<Vec<String>, DataError> {
    Ok(fs::read_to_string(path)?
        .lines()
        .map(|l| l.to_string())
        .collect())
}

/// Write via a sibling temp file and rename, so rerunning a command never
/// leaves half-written outputs.
pub fn write_atomic(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), io::Error> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Deterministically shuffle indices with the given rng.
pub fn shuffle_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}
