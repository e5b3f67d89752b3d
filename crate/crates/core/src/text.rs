//! User profile → prompt → frozen text embedding.
//!
//! Profiles are rendered into short natural-language prompts and mapped to
//! unit-norm vectors by a [`TextEncoder`]. Two encoders ship: a signed
//! feature-hashing encoder and a lookup into embeddings precomputed offline
//! by any sentence encoder. [`EmbeddingCache`] guarantees each user is
//! encoded once per experiment unless their profile changes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::{InteractionDataset, UserProfile};
use crate::error::{Error, Result};
use crate::linalg::norm;

pub const MOVIELENS_TEMPLATE: &str =
    "The user is a {age}-year-old {gender} working as {occupation} in area {zip}.";
pub const GENERIC_TEMPLATE: &str = "User {user_id} has {interaction_count} interactions.";

pub const DEFAULT_TEXT_DIM: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptText(String);

impl PromptText {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Template matching the attributes a profile carries.
pub fn default_template(profile: &UserProfile) -> &'static str {
    if profile.get("age").is_some() {
        MOVIELENS_TEMPLATE
    } else if profile.get("interaction_count").is_some() {
        GENERIC_TEMPLATE
    } else {
        "User {user_id}."
    }
}

/// Substitutes every `{name}` in `template` with the profile attribute of
/// that name.
pub fn render_prompt(profile: &UserProfile, template: &str) -> Result<PromptText> {
    let mut out = String::with_capacity(template.len() + 32);
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let Some(close) = after.find('}') else {
            out.push_str(&rest[open..]);
            rest = "";
            break;
        };
        let name = &after[..close];
        let value = profile.get(name).ok_or_else(|| Error::Template {
            placeholder: name.to_string(),
        })?;
        out.push_str(value);
        rest = &after[close + 1..];
    }
    out.push_str(rest);
    if out.trim().is_empty() {
        return Err(Error::Template {
            placeholder: "<empty prompt>".into(),
        });
    }
    Ok(PromptText(out))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub user_id: u32,
    pub vector: Vec<f64>,
    pub encoder_id: String,
}

pub trait TextEncoder: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    /// Lookup-style encoders key on `user_id` and may ignore the prompt.
    fn encode(&self, user_id: u32, prompt: &PromptText) -> Result<Vec<f64>>;
}

/// Signed feature hashing of lowercase word unigrams and per-word character
/// trigrams, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEncoder {
    dim: usize,
    seed: u64,
    id: String,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(seed: u64, kind: u8, bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in seed.to_le_bytes().iter().chain(std::iter::once(&kind)).chain(bytes) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    // fmix64 so the high bit used for the sign is well mixed.
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

impl HashEncoder {
    pub fn new(dim: usize, seed: u64) -> Result<Self> {
        if dim < 8 {
            return Err(Error::Parameter(format!("hash encoder dimension {dim} < 8")));
        }
        Ok(HashEncoder {
            dim,
            seed,
            id: format!("hash-d{dim}-s{seed}"),
        })
    }

    fn add(&self, v: &mut [f64], kind: u8, feature: &[u8]) {
        let h = fnv1a(self.seed, kind, feature);
        let bucket = (h & 0x7fff_ffff_ffff_ffff) % self.dim as u64;
        v[bucket as usize] += if h >> 63 == 1 { -1.0 } else { 1.0 };
    }

    pub fn encode_text(&self, text: &str) -> Vec<f64> {
        let lower = text.to_lowercase();
        let mut v = vec![0.0; self.dim];
        for word in lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
            self.add(&mut v, b'w', word.as_bytes());
            let padded: Vec<char> = std::iter::once('<')
                .chain(word.chars())
                .chain(std::iter::once('>'))
                .collect();
            for tri in padded.windows(3) {
                let s: String = tri.iter().collect();
                self.add(&mut v, b't', s.as_bytes());
            }
        }
        if v.iter().all(|&x| x == 0.0) {
            self.add(&mut v, b'e', b"");
        }
        normalize(&mut v);
        v
    }
}

impl TextEncoder for HashEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, _user_id: u32, prompt: &PromptText) -> Result<Vec<f64>> {
        Ok(self.encode_text(prompt.as_str()))
    }
}

/// Convenience wrapper returning a full [`TextEmbedding`].
pub fn encode_hash(user_id: u32, prompt: &PromptText, d1: usize, seed: u64) -> Result<TextEmbedding> {
    let enc = HashEncoder::new(d1, seed)?;
    Ok(TextEmbedding {
        user_id,
        vector: enc.encode_text(prompt.as_str()),
        encoder_id: enc.id,
    })
}

fn normalize(v: &mut [f64]) -> bool {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= n);
    true
}

/// Reads a precomputed embedding file: a `#dim=<d1>` header line followed by
/// `user_id \t f1 \t ... \t f_d1` rows. Rows are L2-normalized on load.
pub fn load_precomputed(path: &Path) -> Result<BTreeMap<u32, TextEmbedding>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut lines = body.lines().enumerate();
    let dim: usize = lines
        .next()
        .and_then(|(_, l)| l.trim().strip_prefix("#dim="))
        .and_then(|d| d.trim().parse().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::EmbeddingFormat(format!("{}: missing `#dim=<d1>` header", path.display())))?;
    let encoder_id = format!(
        "file:{}",
        path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default()
    );
    let mut out = BTreeMap::new();
    for (idx, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let lineno = idx + 1;
        let mut fields = line.split('\t');
        let user_id: u32 = fields
            .next()
            .and_then(|f| f.trim().parse().ok())
            .ok_or_else(|| Error::EmbeddingFormat(format!("line {lineno}: bad user id")))?;
        let mut vector = fields
            .map(|f| f.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| Error::EmbeddingFormat(format!("line {lineno}: {e}")))?;
        if vector.len() != dim {
            return Err(Error::EmbeddingFormat(format!(
                "line {lineno}: {} values under header dim {dim}",
                vector.len()
            )));
        }
        if !normalize(&mut vector) {
            return Err(Error::EmbeddingFormat(format!("line {lineno}: zero or non-finite vector")));
        }
        out.insert(
            user_id,
            TextEmbedding {
                user_id,
                vector,
                encoder_id: encoder_id.clone(),
            },
        );
    }
    Ok(out)
}

/// Serves embeddings loaded by [`load_precomputed`] through the encoder
/// interface.
pub struct PrecomputedEncoder {
    dim: usize,
    id: String,
    table: BTreeMap<u32, Vec<f64>>,
}

impl PrecomputedEncoder {
    /// Fails with the list of dataset users the table does not cover.
    pub fn new(table: BTreeMap<u32, TextEmbedding>, dataset: &InteractionDataset) -> Result<Self> {
        let missing: Vec<u32> = dataset
            .users()
            .iter()
            .map(|u| u.user_id)
            .filter(|id| !table.contains_key(id))
            .collect();
        if !missing.is_empty() {
            return Err(Error::Coverage(missing));
        }
        let first = table
            .values()
            .next()
            .ok_or_else(|| Error::EmbeddingFormat("empty embedding table".into()))?;
        let dim = first.vector.len();
        let id = first.encoder_id.clone();
        Ok(PrecomputedEncoder {
            dim,
            id,
            table: table.into_iter().map(|(k, v)| (k, v.vector)).collect(),
        })
    }
}

impl TextEncoder for PrecomputedEncoder {
    fn id(&self) -> &str {
        &self.id
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, user_id: u32, _prompt: &PromptText) -> Result<Vec<f64>> {
        self.table
            .get(&user_id)
            .cloned()
            .ok_or_else(|| Error::Coverage(vec![user_id]))
    }
}

/// Frozen per-user text vectors, indexed like the dataset's users.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    rows: Vec<TextEmbedding>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, rows: Vec<TextEmbedding>) -> Result<Self> {
        if let Some(bad) = rows.iter().find(|r| r.vector.len() != dim) {
            return Err(Error::EmbeddingFormat(format!(
                "user {} has {} values, expected {dim}",
                bad.user_id,
                bad.vector.len()
            )));
        }
        Ok(EmbeddingTable { dim, rows })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn get(&self, user: usize) -> &TextEmbedding {
        &self.rows[user]
    }

    pub fn rows(&self) -> &[TextEmbedding] {
        &self.rows
    }
}

/// Encodes each user once and re-encodes only users whose rendered prompt
/// changed since the last pass.
pub struct EmbeddingCache {
    encoder: Box<dyn TextEncoder>,
    template: Option<String>,
    prompts: Vec<PromptText>,
    table: EmbeddingTable,
    invocations: usize,
}

impl EmbeddingCache {
    /// `template = None` picks [`default_template`] per profile.
    pub fn build(
        dataset: &InteractionDataset,
        encoder: Box<dyn TextEncoder>,
        template: Option<String>,
    ) -> Result<Self> {
        let mut cache = EmbeddingCache {
            table: EmbeddingTable {
                dim: encoder.dim(),
                rows: Vec::new(),
            },
            encoder,
            template,
            prompts: Vec::new(),
            invocations: 0,
        };
        for idx in 0..dataset.num_users() {
            let prompt = cache.prompt_for(dataset.profile(idx))?;
            let row = cache.encode(dataset.user(idx).user_id, &prompt)?;
            cache.prompts.push(prompt);
            cache.table.rows.push(row);
        }
        Ok(cache)
    }

    fn prompt_for(&self, profile: &UserProfile) -> Result<PromptText> {
        let template = self.template.as_deref().unwrap_or_else(|| default_template(profile));
        render_prompt(profile, template)
    }

    fn encode(&mut self, user_id: u32, prompt: &PromptText) -> Result<TextEmbedding> {
        self.invocations += 1;
        let mut vector = self.encoder.encode(user_id, prompt)?;
        if vector.len() != self.encoder.dim() {
            return Err(Error::EmbeddingFormat(format!(
                "encoder {} returned {} values, expected {}",
                self.encoder.id(),
                vector.len(),
                self.encoder.dim()
            )));
        }
        if !normalize(&mut vector) {
            return Err(Error::EmbeddingFormat(format!("zero embedding for user {user_id}")));
        }
        Ok(TextEmbedding {
            user_id,
            vector,
            encoder_id: self.encoder.id().to_string(),
        })
    }

    /// Re-renders every prompt and re-encodes only the users whose prompt
    /// differs from the cached one. Returns how many users were re-encoded.
    pub fn refresh(&mut self, dataset: &InteractionDataset) -> Result<usize> {
        let mut changed = 0;
        for idx in 0..dataset.num_users() {
            let prompt = self.prompt_for(dataset.profile(idx))?;
            if prompt != self.prompts[idx] {
                let row = self.encode(dataset.user(idx).user_id, &prompt)?;
                self.table.rows[idx] = row;
                self.prompts[idx] = prompt;
                changed += 1;
            }
        }
        Ok(changed)
    }

    pub fn table(&self) -> &EmbeddingTable {
        &self.table
    }

    pub fn prompt(&self, user: usize) -> &PromptText {
        &self.prompts[user]
    }

    /// Total encoder calls since the cache was built.
    pub fn invocations(&self) -> usize {
        self.invocations
    }
}

/// Builds the cache for every user (the one-time encoding pass).
pub fn embed_all_once(dataset: &InteractionDataset, encoder: Box<dyn TextEncoder>) -> Result<EmbeddingCache> {
    EmbeddingCache::build(dataset, encoder, None)
}
