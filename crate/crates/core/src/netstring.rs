//! Graph-to-string conversion, tokenization and vocabulary.
//!
//! A graph is emitted as newline-separated records `Op|id|k=v,k=v,...` in the
//! order the nodes are visited. `id` is the emission counter. Attributes are
//! sorted by key. Wiring is carried by `srcN` attributes (emission ids of the
//! inputs, `-1` for the graph input); they are omitted when a node's only
//! input is the record emitted just before it, or when the first record reads
//! the graph input.
//!
//! Op names start with an ASCII uppercase letter and attribute keys with a
//! lowercase one, which lets a token stream be parsed back into records.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graphir::{postorder, validate, CompGraph};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const EOS: u32 = 2;
pub const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<eos>"];

const VOCAB_FORMAT: &str = "seval-vocab";
const VOCAB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetStringError {
    #[error("graph cannot be traversed: {0}")]
    Traversal(String),
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("malformed token stream at position {pos}: {reason}")]
    Detokenize { pos: usize, reason: String },
    #[error("vocabulary json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("vocabulary: {0}")]
    Vocab(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Traversal {
    /// Recursive visit of inputs (ascending id) before the node itself,
    /// starting from the sink.
    #[default]
    PostorderDfs,
    /// Level order from the sink, inputs in ascending id.
    Bfs,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetString {
    pub text: String,
}

impl NetString {
    pub fn records(&self) -> impl Iterator<Item = &str> {
        self.text.lines()
    }

    pub fn fields(&self) -> impl Iterator<Item = &str> {
        split_fields(&self.text)
    }

    /// SHA-256 of the text, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.text.as_bytes()))
    }
}

impl fmt::Display for NetString {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.text)
    }
}

fn split_fields(text: &str) -> impl Iterator<Item = &str> {
    text.split(['|', ',', '=', '\n']).filter(|f| !f.is_empty())
}

fn visit_order(graph: &CompGraph, traversal: Traversal) -> Vec<usize> {
    match traversal {
        Traversal::PostorderDfs => postorder(graph),
        Traversal::Bfs => {
            let n = graph.nodes.len();
            let sink = n - 1;
            let mut seen = vec![false; n];
            let mut order = Vec::with_capacity(n);
            let mut queue = VecDeque::from([sink]);
            seen[sink] = true;
            while let Some(node) = queue.pop_front() {
                order.push(node);
                let children: BTreeSet<usize> = graph.nodes[node].inputs.iter().copied().collect();
                for child in children {
                    if !seen[child] {
                        seen[child] = true;
                        queue.push_back(child);
                    }
                }
            }
            order
        }
    }
}

/// Emit the canonical string of a validated graph.
pub fn graph_to_string(graph: &CompGraph, traversal: Traversal) -> Result<NetString, NetStringError> {
    validate(graph).map_err(|v| NetStringError::Traversal(format!("{v:?}")))?;
    let order = visit_order(graph, traversal);
    let mut emitted = vec![usize::MAX; graph.nodes.len()];
    for (counter, &node) in order.iter().enumerate() {
        emitted[node] = counter;
    }
    let mut text = String::new();
    for (counter, &id) in order.iter().enumerate() {
        let node = &graph.nodes[id];
        let mut attrs: Vec<(String, i64)> =
            node.attrs.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let srcs: Vec<i64> = node.inputs.iter().map(|&i| emitted[i] as i64).collect();
        let implicit = match srcs.as_slice() {
            [] => counter == 0,
            [only] => *only == counter as i64 - 1,
            _ => false,
        };
        if !implicit {
            if srcs.is_empty() {
                attrs.push(("src0".to_string(), -1));
            }
            for (k, s) in srcs.iter().enumerate() {
                attrs.push((format!("src{k}"), *s));
            }
        }
        attrs.sort();
        if counter > 0 {
            text.push('\n');
        }
        text.push_str(&node.op);
        text.push('|');
        text.push_str(&counter.to_string());
        text.push('|');
        let body: Vec<String> = attrs.iter().map(|(k, v)| format!("{k}={v}")).collect();
        text.push_str(&body.join(","));
    }
    Ok(NetString { text })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabDocument {
    format: String,
    version: u32,
    reserved: Vec<String>,
    tokens: Vec<String>,
}

impl Vocab {
    fn from_tokens(non_reserved: Vec<String>) -> Result<Self, NetStringError> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(non_reserved);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(NetStringError::Vocab(format!("duplicate token `{t}`")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.len() == RESERVED.len()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn entries(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    pub fn to_json(&self) -> String {
        let doc = VocabDocument {
            format: VOCAB_FORMAT.into(),
            version: VOCAB_VERSION,
            reserved: RESERVED.iter().map(|s| s.to_string()).collect(),
            tokens: self.entries().to_vec(),
        };
        serde_json::to_string_pretty(&doc).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, NetStringError> {
        let doc: VocabDocument = serde_json::from_str(text)?;
        if doc.format != VOCAB_FORMAT || doc.version != VOCAB_VERSION {
            return Err(NetStringError::Vocab(format!(
                "unsupported vocabulary {} v{}",
                doc.format, doc.version
            )));
        }
        if doc.reserved != RESERVED {
            return Err(NetStringError::Vocab("reserved header mismatch".into()));
        }
        Self::from_tokens(doc.tokens)
    }
}

/// Every distinct field of the corpus, sorted, after the reserved ids.
pub fn build_vocab<'a, I>(corpus: I) -> Result<Vocab, NetStringError>
where
    I: IntoIterator<Item = &'a NetString>,
{
    let mut fields = BTreeSet::new();
    let mut any = false;
    for s in corpus {
        any = true;
        fields.extend(s.fields().map(str::to_string));
    }
    if !any {
        return Err(NetStringError::EmptyCorpus);
    }
    Vocab::from_tokens(fields.into_iter().collect())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub tokens: Vec<u32>,
    /// Length before truncation, EOS included.
    pub full_len: usize,
    pub truncated: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One token per field, EOS appended, cut to `max_len`.
pub fn tokenize(s: &NetString, vocab: &Vocab, max_len: usize) -> TokenSeq {
    let mut tokens: Vec<u32> = s.fields().map(|f| vocab.id(f)).collect();
    tokens.push(EOS);
    let full_len = tokens.len();
    let truncated = full_len > max_len;
    tokens.truncate(max_len);
    TokenSeq {
        tokens,
        full_len,
        truncated,
    }
}

fn is_int(s: &str) -> bool {
    s.parse::<i64>().is_ok()
}

/// Rebuild record text from tokens. Fails on UNK or a stream that does not
/// follow the record grammar.
pub fn detokenize(seq: &TokenSeq, vocab: &Vocab) -> Result<String, NetStringError> {
    let words: Vec<(usize, &str)> = seq
        .tokens
        .iter()
        .enumerate()
        .take_while(|(_, &t)| t != EOS)
        .filter(|(_, &t)| t != PAD)
        .map(|(pos, &t)| {
            if t == UNK {
                return Err(NetStringError::Detokenize {
                    pos,
                    reason: "unknown token".into(),
                });
            }
            vocab
                .token(t)
                .map(|w| (pos, w))
                .ok_or_else(|| NetStringError::Detokenize {
                    pos,
                    reason: format!("id {t} outside vocabulary"),
                })
        })
        .collect::<Result<_, _>>()?;
    let mut out = String::new();
    let mut i = 0;
    while i < words.len() {
        let (pos, op) = words[i];
        if !op.starts_with(|c: char| c.is_ascii_uppercase()) {
            return Err(NetStringError::Detokenize {
                pos,
                reason: format!("expected op name, got `{op}`"),
            });
        }
        let (pos, id) = *words.get(i + 1).ok_or(NetStringError::Detokenize {
            pos,
            reason: "record without id".into(),
        })?;
        if !is_int(id) {
            return Err(NetStringError::Detokenize {
                pos,
                reason: format!("expected node id, got `{id}`"),
            });
        }
        if !out.is_empty() {
            out.push('\n');
        }
        out.push_str(op);
        out.push('|');
        out.push_str(id);
        out.push('|');
        i += 2;
        let mut first = true;
        while let Some(&(pos, key)) = words.get(i) {
            if !key.starts_with(|c: char| c.is_ascii_lowercase()) {
                break;
            }
            let value = match words.get(i + 1) {
                Some(&(_, v)) if is_int(v) => v,
                _ => {
                    return Err(NetStringError::Detokenize {
                        pos,
                        reason: format!("attribute `{key}` without value"),
                    })
                }
            };
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(key);
            out.push('=');
            out.push_str(value);
            i += 2;
        }
    }
    Ok(out)
}
