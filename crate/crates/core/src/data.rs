//! Corpora: byte-level text ingestion and a synthetic Markov source with a
//! known entropy rate.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;
/// Data vocabulary of the byte-level tokenizer (bytes, BOS, EOS). The mask id is 258.
pub const BYTE_VOCAB: usize = 258;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<u32>,
    #[serde(default)]
    pub class: Option<u32>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<u32>) -> Self {
        Self { tokens, class: None }
    }

    pub fn with_class(tokens: Vec<u32>, class: u32) -> Self {
        Self {
            tokens,
            class: Some(class),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum VocabKind {
    Bytes,
    Markov { states: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub kind: VocabKind,
    /// Number of data tokens `N`, BOS and EOS included.
    pub size: usize,
    pub bos: u32,
    pub eos: u32,
}

impl Vocab {
    pub fn bytes() -> Self {
        Self {
            kind: VocabKind::Bytes,
            size: BYTE_VOCAB,
            bos: BYTE_BOS,
            eos: BYTE_EOS,
        }
    }

    pub fn markov(states: usize) -> Self {
        Self {
            kind: VocabKind::Markov { states },
            size: states + 2,
            bos: states as u32,
            eos: states as u32 + 1,
        }
    }

    /// Renders tokens as text for byte vocabularies and as ids otherwise.
    pub fn render(&self, tokens: &[u32]) -> String {
        match self.kind {
            VocabKind::Bytes => {
                let bytes: Vec<u8> = tokens
                    .iter()
                    .filter(|&&t| t < 256)
                    .map(|&t| t as u8)
                    .collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
            VocabKind::Markov { .. } => render_ids(tokens),
        }
    }
}

pub fn render_ids(tokens: &[u32]) -> String {
    tokens.iter().map(u32::to_string).collect::<Vec<_>>().join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub vocab: Vocab,
    pub seq_len: usize,
    pub sequences: Vec<TokenSequence>,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.sequences.iter().map(TokenSequence::len).sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.tokens.first() != Some(&self.vocab.bos) {
                return Err(Error::Validation(format!("sequence {i} does not start with BOS")));
            }
            if s.len() > self.seq_len {
                return Err(Error::Validation(format!("sequence {i} is longer than {}", self.seq_len)));
            }
            if let Some(t) = s.tokens.iter().find(|&&t| t as usize >= self.vocab.size) {
                return Err(Error::Validation(format!("sequence {i} holds out-of-vocabulary id {t}")));
            }
        }
        Ok(())
    }

    /// Splits off the last `fraction` of sequences (at least one) for validation.
    pub fn split(mut self, fraction: f64) -> Result<(Corpus, Corpus)> {
        if !(0.0..1.0).contains(&fraction) || self.len() < 2 {
            return Err(Error::Argument("cannot split corpus".into()));
        }
        let n_val = ((self.len() as f64 * fraction).ceil() as usize).clamp(1, self.len() - 1);
        let val = self.sequences.split_off(self.len() - n_val);
        let val = Corpus {
            vocab: self.vocab,
            seq_len: self.seq_len,
            sequences: val,
        };
        Ok((self, val))
    }
}

/// Packs byte documents into BOS-prefixed windows of length `seq_len`, with
/// EOS after every document. The final window may be shorter.
pub fn pack_documents(docs: &[&[u8]], seq_len: usize) -> Result<Corpus> {
    if seq_len < 2 {
        return Err(Error::Config("window length must be at least 2".into()));
    }
    let mut stream = Vec::new();
    for d in docs {
        stream.extend(d.iter().map(|&b| u32::from(b)));
        stream.push(BYTE_EOS);
    }
    if docs.iter().all(|d| d.is_empty()) {
        return Err(Error::Ingestion("no text to ingest".into()));
    }
    let sequences = stream
        .chunks(seq_len - 1)
        .map(|chunk| {
            let mut tokens = Vec::with_capacity(chunk.len() + 1);
            tokens.push(BYTE_BOS);
            tokens.extend_from_slice(chunk);
            TokenSequence::new(tokens)
        })
        .collect();
    Ok(Corpus {
        vocab: Vocab::bytes(),
        seq_len,
        sequences,
    })
}

/// Reads a UTF-8 (or arbitrary byte) file. Documents are separated by blank lines.
pub fn ingest_text(path: &Path, seq_len: usize) -> Result<Corpus> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.is_empty() {
        return Err(Error::Ingestion(format!("{} is empty", path.display())));
    }
    let text = String::from_utf8_lossy(&bytes);
    let docs: Vec<&[u8]> = text
        .split("\n\n")
        .map(|d| d.trim_matches('\n').as_bytes())
        .filter(|d| !d.is_empty())
        .collect();
    pack_documents(&docs, seq_len)
}

/// First-order Markov chain over `states` symbols.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarkovChain {
    pub transition: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
}

impl MarkovChain {
    pub fn new(transition: Vec<Vec<f64>>) -> Result<Self> {
        let n = transition.len();
        if n < 2 {
            return Err(Error::Argument("a chain needs at least two states".into()));
        }
        for row in &transition {
            let s: f64 = row.iter().sum();
            if row.len() != n || (s - 1.0).abs() > 1e-9 || row.iter().any(|&p| p < 0.0) {
                return Err(Error::Argument("transition matrix is not row-stochastic".into()));
            }
        }
        let stationary = stationary_distribution(&transition);
        Ok(Self {
            transition,
            stationary,
        })
    }

    /// Rows drawn from a flat Dirichlet.
    pub fn random<R: Rng + ?Sized>(states: usize, rng: &mut R) -> Result<Self> {
        let rows = (0..states)
            .map(|_| {
                let g: Vec<f64> = (0..states).map(|_| Exp1.sample(rng)).collect();
                let s: f64 = g.iter().sum();
                g.into_iter().map(|v| v / s).collect()
            })
            .collect();
        Self::new(rows)
    }

    pub fn states(&self) -> usize {
        self.transition.len()
    }

    /// `−Σ_s π_s Σ_s' P(s'|s) ln P(s'|s)` in nats.
    pub fn entropy_rate(&self) -> f64 {
        self.stationary
            .iter()
            .zip(&self.transition)
            .map(|(pi, row)| pi * row.iter().filter(|&&p| p > 0.0).map(|p| -p * p.ln()).sum::<f64>())
            .sum()
    }

    /// Samples `len` states, the first from the stationary distribution.
    pub fn sample<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Vec<u32> {
        let mut out = Vec::with_capacity(len);
        let mut dist = &self.stationary;
        for _ in 0..len {
            let s = draw(dist, rng);
            out.push(s as u32);
            dist = &self.transition[s];
        }
        out
    }
}

fn draw<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &q) in p.iter().enumerate() {
        acc += q;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&q| q > 0.0).unwrap_or(0)
}

fn stationary_distribution(p: &[Vec<f64>]) -> Vec<f64> {
    let n = p.len();
    // Lazy chain: same stationary law, but periodic chains still converge.
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for (i, row) in p.iter().enumerate() {
            for (j, &q) in row.iter().enumerate() {
                next[j] += pi[i] * q;
            }
        }
        let mut delta = 0.0;
        for j in 0..n {
            let v = 0.5 * (pi[j] + next[j]);
            delta += (v - pi[j]).abs();
            pi[j] = v;
        }
        if delta < 1e-15 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.iter().map(|v| v / s).collect()
}

/// Synthetic corpus: each sequence is BOS followed by `seq_len − 1` chain states.
pub fn synth_markov(
    states: usize,
    seed: u64,
    n_sequences: usize,
    seq_len: usize,
) -> Result<(Corpus, MarkovChain)> {
    if states < 2 {
        return Err(Error::Argument("states must be at least 2".into()));
    }
    if seq_len < 2 {
        return Err(Error::Config("sequence length must be at least 2".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chain = MarkovChain::random(states, &mut rng)?;
    let corpus = markov_corpus(&chain, &mut rng, n_sequences, seq_len);
    Ok((corpus, chain))
}

pub fn markov_corpus<R: Rng + ?Sized>(chain: &MarkovChain, rng: &mut R, n_sequences: usize, seq_len: usize) -> Corpus {
    let vocab = Vocab::markov(chain.states());
    let sequences = (0..n_sequences)
        .map(|_| {
            let mut tokens = Vec::with_capacity(seq_len);
            tokens.push(vocab.bos);
            tokens.extend(chain.sample(seq_len - 1, rng));
            TokenSequence::new(tokens)
        })
        .collect();
    Corpus {
        vocab,
        seq_len,
        sequences,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_fit_window() {
        let doc = vec![b'a'; 62];
        let c = pack_documents(&[&doc], 64).unwrap();
        assert_eq!(c.len(), 1);
        let s = &c.sequences[0].tokens;
        assert_eq!(s.len(), 64);
        assert_eq!(s[0], BYTE_BOS);
        assert_eq!(s[63], BYTE_EOS);
        c.validate().unwrap();
    }

    #[test]
    fn packing_counts() {
        let docs: [&[u8]; 3] = [b"hello world", b"second document here", b"x"];
        for l in [2, 3, 5, 8, 64] {
            let c = pack_documents(&docs, l).unwrap();
            let bytes: usize = docs.iter().map(|d| d.len()).sum();
            assert_eq!(c.total_tokens(), bytes + docs.len() + c.len());
            c.validate().unwrap();
        }
        let c = pack_documents(&docs[..2], 64).unwrap();
        let s = &c.sequences[0].tokens;
        assert_eq!(s[12], BYTE_EOS);
        assert_eq!(s[13], u32::from(b's'));
    }

    #[test]
    fn ingest_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        std::fs::write(&p, "one\n\ntwo\n").unwrap();
        let c = ingest_text(&p, 16).unwrap();
        assert_eq!(
            c.sequences[0].tokens,
            vec![BYTE_BOS, 111, 110, 101, BYTE_EOS, 116, 119, 111, BYTE_EOS]
        );
        let e = dir.path().join("empty.txt");
        std::fs::write(&e, "").unwrap();
        assert!(matches!(ingest_text(&e, 16), Err(Error::Ingestion(_))));
    }

    #[test]
    fn entropy_rates() {
        let u = MarkovChain::new(vec![vec![0.25; 4]; 4]).unwrap();
        assert!((u.entropy_rate() - 4f64.ln()).abs() < 1e-12);
        let cyc = MarkovChain::new(vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        assert_eq!(cyc.entropy_rate(), 0.0);
        for p in &cyc.stationary {
            assert!((p - 1.0 / 3.0).abs() < 1e-9);
        }
    }

    #[test]
    fn empirical_transitions() {
        let (corpus, chain) = synth_markov(4, 11, 1000, 1001).unwrap();
        let n = chain.states();
        let mut counts = vec![vec![0.0; n]; n];
        for s in &corpus.sequences {
            for w in s.tokens[1..].windows(2) {
                counts[w[0] as usize][w[1] as usize] += 1.0;
            }
        }
        for (row, p) in counts.iter().zip(&chain.transition) {
            let tot: f64 = row.iter().sum();
            let tv: f64 = row.iter().zip(p).map(|(c, q)| (c / tot - q).abs()).sum::<f64>() / 2.0;
            assert!(tv < 0.01, "total variation {tv}");
        }
        corpus.validate().unwrap();
    }

    #[test]
    fn split_keeps_all() {
        let (c, _) = synth_markov(3, 1, 10, 8).unwrap();
        let (a, b) = c.split(0.2).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
    }
}
