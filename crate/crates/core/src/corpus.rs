//! Dataset model: caption normalization, vocabulary, manifests, unpaired
//! caption sampling and the synthetic toy corpus used for desk-scale runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{load_features, FeatureMatrix, N_MELS};

pub type TokenId = u32;

/// Number of human references per clip.
pub const REFS_PER_CLIP: usize = 5;

pub const PAD: TokenId = 0;
pub const SOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Lowercases, strips every character that is neither alphanumeric nor
/// whitespace, and collapses runs of whitespace to single spaces.
pub fn normalize(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect();
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyFile", into = "VocabularyFile")]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    counts: BTreeMap<String, u64>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    tokens: Vec<String>,
    counts: BTreeMap<String, u64>,
}

impl TryFrom<VocabularyFile> for Vocabulary {
    type Error = String;

    fn try_from(file: VocabularyFile) -> std::result::Result<Self, String> {
        if file.tokens.len() < SPECIALS.len()
            || file.tokens[..SPECIALS.len()]
                .iter()
                .zip(SPECIALS)
                .any(|(a, b)| a != b)
        {
            return Err("vocabulary must start with <pad> <sos> <eos> <unk>".into());
        }
        let token_to_id: HashMap<String, TokenId> = file
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        if token_to_id.len() != file.tokens.len() {
            return Err("duplicate tokens in vocabulary".into());
        }
        Ok(Self {
            id_to_token: file.tokens,
            token_to_id,
            counts: file.counts,
        })
    }
}

impl From<Vocabulary> for VocabularyFile {
    fn from(v: Vocabulary) -> Self {
        Self {
            tokens: v.id_to_token,
            counts: v.counts,
        }
    }
}

impl Vocabulary {
    /// Builds a vocabulary from already-normalized caption strings. Content
    /// tokens are assigned dense ids after the four specials, in lexical
    /// order so the mapping is independent of corpus order.
    pub fn build<S: AsRef<str>>(captions: &[S]) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::RejectedInput(
                "cannot build a vocabulary from an empty corpus".into(),
            ));
        }
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        for caption in captions {
            for word in caption.as_ref().split_whitespace() {
                *counts.entry(word.to_string()).or_default() += 1;
            }
        }
        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(counts.keys().filter(|t| !SPECIALS.contains(&t.as_str())).cloned());
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        Ok(Self {
            id_to_token,
            token_to_id,
            counts,
        })
    }

    /// Total number of ids, specials included.
    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }
}

/// A token-id sequence beginning with the start sentinel. Complete captions
/// end with the end sentinel; generated captions cut off by the length cap
/// do not.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Caption {
    tokens: Vec<TokenId>,
    text: String,
}

impl Caption {
    /// Builds a caption from decoder output (the tokens after the start
    /// sentinel, possibly ending with the end sentinel).
    pub fn from_generated(generated: &[TokenId], vocab: &Vocabulary) -> Self {
        let mut tokens = Vec::with_capacity(generated.len() + 1);
        tokens.push(SOS);
        for &t in generated {
            tokens.push(t);
            if t == EOS {
                break;
            }
        }
        let text = render(&tokens, vocab);
        Self { tokens, text }
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    /// Tokens after the start sentinel: what a decoder emits.
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    /// Content tokens, sentinels excluded.
    pub fn content(&self) -> &[TokenId] {
        let end = if self.is_terminated() {
            self.tokens.len() - 1
        } else {
            self.tokens.len()
        };
        &self.tokens[1..end]
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn words(&self) -> Vec<&str> {
        self.text.split_whitespace().collect()
    }

    /// Number of content tokens.
    pub fn len(&self) -> usize {
        self.content().len()
    }

    pub fn is_empty(&self) -> bool {
        self.content().is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.tokens.len() > 1 && self.tokens.last() == Some(&EOS)
    }
}

fn render(tokens: &[TokenId], vocab: &Vocabulary) -> String {
    tokens
        .iter()
        .filter(|&&t| t != SOS && t != EOS && t != PAD)
        .map(|&t| vocab.token(t).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn normalize_and_tokenize(raw: &str, vocab: &Vocabulary) -> Result<Caption> {
    let text = normalize(raw);
    if text.is_empty() {
        return Err(Error::RejectedInput(format!(
            "caption {raw:?} is empty after normalization"
        )));
    }
    let mut tokens = vec![SOS];
    tokens.extend(text.split_whitespace().map(|w| vocab.id(w).unwrap_or(UNK)));
    tokens.push(EOS);
    let text = render(&tokens, vocab);
    Ok(Caption { tokens, text })
}

pub fn detokenize(caption: &Caption) -> &str {
    caption.text()
}

/// One audio item with its five normalized human references.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub clip_id: String,
    pub features: FeatureMatrix,
    pub references: Vec<String>,
}

impl AudioClip {
    pub fn new(clip_id: String, features: FeatureMatrix, references: Vec<String>) -> Result<Self> {
        if references.len() != REFS_PER_CLIP {
            return Err(Error::RejectedInput(format!(
                "clip {clip_id}: expected {REFS_PER_CLIP} references, got {}",
                references.len()
            )));
        }
        let references = references
            .iter()
            .map(|r| {
                let n = normalize(r);
                if n.is_empty() {
                    Err(Error::RejectedInput(format!(
                        "clip {clip_id}: reference {r:?} is empty after normalization"
                    )))
                } else {
                    Ok(n)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            clip_id,
            features,
            references,
        })
    }

    pub fn tokenized_references(&self, vocab: &Vocabulary) -> Result<Vec<Caption>> {
        self.references
            .iter()
            .map(|r| normalize_and_tokenize(r, vocab))
            .collect()
    }
}

/// All reference strings of a collection of clips, in clip order.
pub fn all_references(clips: &[AudioClip]) -> Vec<String> {
    clips
        .iter()
        .flat_map(|c| c.references.iter().cloned())
        .collect()
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    pub features: PathBuf,
    pub captions: Vec<String>,
}

pub fn load_manifest(path: &Path) -> Result<Vec<AudioClip>> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let file = fs::File::open(path).map_err(|e| Error::Manifest {
        path: path.to_path_buf(),
        line: 0,
        msg: format!("cannot open: {e}"),
    })?;
    let mut clips = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line_no = idx + 1;
        let err = |msg: String| Error::Manifest {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let line = line.map_err(|e| err(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| err(format!("malformed entry: {e}")))?;
        if entry.captions.len() != REFS_PER_CLIP {
            return Err(err(format!(
                "clip {} has {} captions, expected {REFS_PER_CLIP}",
                entry.clip_id,
                entry.captions.len()
            )));
        }
        let feature_path = base.join(&entry.features);
        if !feature_path.is_file() {
            return Err(err(format!(
                "missing feature file {}",
                feature_path.display()
            )));
        }
        let features = load_features(&feature_path).map_err(|e| err(e.to_string()))?;
        let clip = AudioClip::new(entry.clip_id, features, entry.captions)
            .map_err(|e| err(e.to_string()))?;
        clips.push(clip);
    }
    Ok(clips)
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = fs::File::create(path)?;
    for e in entries {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// An unpaired caption together with the clip it was taken from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Unpaired {
    pub origin: String,
    pub text: String,
}

/// Draws `count` captions per clip from the references of *other* clips in
/// the batch: first a donor clip uniformly among the rest, then one of its
/// references uniformly.
pub fn sample_unpaired<R: Rng>(
    batch: &[&AudioClip],
    count: usize,
    rng: &mut R,
) -> Result<BTreeMap<String, Vec<Unpaired>>> {
    if batch.len() < 2 {
        return Err(Error::RejectedInput(
            "unpaired sampling needs at least two clips in the batch".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for (i, clip) in batch.iter().enumerate() {
        let mut picks = Vec::with_capacity(count);
        for _ in 0..count {
            let mut j = rng.random_range(0..batch.len() - 1);
            if j >= i {
                j += 1;
            }
            let donor = batch[j];
            let r = rng.random_range(0..donor.references.len());
            picks.push(Unpaired {
                origin: donor.clip_id.clone(),
                text: donor.references[r].clone(),
            });
        }
        out.insert(clip.clip_id.clone(), picks);
    }
    Ok(out)
}

/// Sound classes of the toy corpus: (noun, present tense, progressive).
pub const TOY_CLASSES: [(&str, &str, &str); 5] = [
    ("dog", "barks", "barking"),
    ("bird", "chirps", "chirping"),
    ("car", "passes", "passing"),
    ("bell", "rings", "ringing"),
    ("engine", "hums", "humming"),
];
/// Loudness attributes: (adjective, adverb, log-energy lift).
pub const TOY_ATTRIBUTES: [(&str, &str, f32); 2] = [("loud", "loudly", 7.0), ("quiet", "quietly", 3.5)];
const TOY_PLACES: [&str; 4] = ["nearby", "outside", "in the distance", "again and again"];
const TOY_TEMPLATES: usize = 5;
/// Frames per toy clip (a little under 0.75 s at 44.1 kHz / hop 512).
pub const TOY_FRAMES: usize = 64;

/// Latent assignment behind a toy clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyLabel {
    pub class: usize,
    pub attribute: usize,
}

/// Class and attribute of toy clip `index`: classes cycle fastest so any
/// run of `classes × attributes` consecutive clips covers every pairing.
pub fn toy_label(index: usize) -> ToyLabel {
    let k = TOY_CLASSES.len();
    ToyLabel {
        class: index % k,
        attribute: (index / k) % TOY_ATTRIBUTES.len(),
    }
}

fn toy_sentence(template: usize, place: &str, label: ToyLabel) -> String {
    let (noun, verb, progressive) = TOY_CLASSES[label.class];
    let (adj, adv, _) = TOY_ATTRIBUTES[label.attribute];
    match template {
        0 => format!("a {adj} {noun} {verb} {place}"),
        1 => format!("the {noun} {verb} {adv} {place}"),
        2 => format!("someone hears a {adj} {noun} {place}"),
        3 => format!("a {noun} is heard {place}"),
        _ => format!("there is a {adj} {noun} {progressive} {place}"),
    }
}

/// Class-specific temporal envelope for frame `t`.
fn toy_envelope(class: usize, t: usize, frames: usize) -> f32 {
    match class {
        0 => (t / 4).is_multiple_of(2) as u8 as f32,
        1 => (t % 8 < 2) as u8 as f32,
        2 => {
            let x = t as f32 / frames as f32;
            (1.0 - (2.0 * x - 1.0).abs()).max(0.0)
        }
        3 => (-(((t % 16) as f32) / 5.0)).exp(),
        _ => 1.0,
    }
}

/// Harmonic comb of the class: one-bin stripes every `3 + 2·class` bins,
/// a pattern that survives pooling over frequency.
fn toy_band(class: usize, bin: usize) -> bool {
    let spacing = 3 + 2 * class;
    (4..60).contains(&bin) && (bin - 4).is_multiple_of(spacing)
}

/// Deterministic synthetic corpus. Clip `i` belongs to class `i % 5` with
/// attribute `(i / 5) % 2`; its features carry the class comb layout and
/// envelope lifted by the attribute's loudness over a noisy floor, and its
/// five references are distinct template sentences naming class and
/// loudness with varied carriers.
pub fn make_toy_dataset(seed: u64, n_clips: usize) -> Result<Vec<AudioClip>> {
    if n_clips < 2 {
        return Err(Error::RejectedInput(format!(
            "toy dataset needs at least 2 clips, got {n_clips}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, 0.5).expect("valid std");
    let mut clips = Vec::with_capacity(n_clips);
    for i in 0..n_clips {
        let label = toy_label(i);
        let lift = TOY_ATTRIBUTES[label.attribute].2;
        let mut data = vec![0f32; TOY_FRAMES * N_MELS];
        for t in 0..TOY_FRAMES {
            let env = toy_envelope(label.class, t, TOY_FRAMES);
            for b in 0..N_MELS {
                let mut v = -8.0 + noise.sample(&mut rng);
                if toy_band(label.class, b) {
                    v += lift * env;
                }
                data[t * N_MELS + b] = v;
            }
        }
        let features = FeatureMatrix::new(TOY_FRAMES, data)?;
        let combos = sample_indices(&mut rng, TOY_TEMPLATES * TOY_PLACES.len(), REFS_PER_CLIP);
        let references = combos
            .iter()
            .map(|c| toy_sentence(c / TOY_PLACES.len(), TOY_PLACES[c % TOY_PLACES.len()], label))
            .collect();
        clips.push(AudioClip::new(format!("toy{seed}_{i:04}"), features, references)?);
    }
    Ok(clips)
}

/// Distinct content words over a set of normalized strings.
pub fn distinct_words<S: AsRef<str>>(texts: &[S]) -> BTreeSet<String> {
    texts
        .iter()
        .flat_map(|t| t.as_ref().split_whitespace().map(str::to_string))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(&["a dog barks", "water flows"]).unwrap()
    }

    #[test]
    fn tokenizes_with_sentinels() {
        let v = vocab();
        let c = normalize_and_tokenize("A Dog Barks.", &v).unwrap();
        let words: Vec<_> = c.tokens().iter().map(|&t| v.token(t).unwrap()).collect();
        assert_eq!(words, ["<sos>", "a", "dog", "barks", "<eos>"]);
        assert_eq!(c.text(), "a dog barks");
        assert_eq!(c.len(), 3);
    }

    #[test]
    fn single_word_caption() {
        let v = vocab();
        let c = normalize_and_tokenize("water", &v).unwrap();
        assert_eq!(c.tokens(), &[SOS, v.id("water").unwrap(), EOS]);
        assert_eq!(c.len(), 1);
    }

    #[test]
    fn punctuation_only_is_rejected() {
        assert!(matches!(
            normalize_and_tokenize("!!!", &vocab()),
            Err(Error::RejectedInput(_))
        ));
    }

    #[test]
    fn oov_maps_to_unknown() {
        let c = normalize_and_tokenize("a cat", &vocab()).unwrap();
        assert_eq!(c.content()[1], UNK);
    }

    #[test]
    fn vocabulary_counts_by_hand() {
        let v = Vocabulary::build(&["a a", "a b"]).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.counts().get("a"), Some(&3));
        assert_eq!(v.counts().get("b"), Some(&1));
        assert_eq!(v.counts().len(), 2);
    }

    #[test]
    fn vocabulary_is_dense_and_inverse() {
        let v = vocab();
        for (i, t) in v.tokens().iter().enumerate() {
            assert_eq!(v.id(t), Some(i as TokenId));
            assert_eq!(v.token(i as TokenId), Some(t.as_str()));
        }
    }

    #[test]
    fn vocabulary_json_round_trip() {
        let v = vocab();
        let s = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&s).unwrap(), v);
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocabulary::build::<&str>(&[]).is_err());
    }

    #[test]
    fn normalization_strips_and_collapses() {
        assert_eq!(normalize("  Birds, chirp!\tloudly "), "birds chirp loudly");
        assert_eq!(normalize("Rock-n-roll"), "rocknroll");
    }

    #[test]
    fn toy_dataset_is_deterministic() {
        let a = make_toy_dataset(7, 20).unwrap();
        let b = make_toy_dataset(7, 20).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, make_toy_dataset(8, 20).unwrap());
    }

    #[test]
    fn toy_captions_name_their_class() {
        for (i, clip) in make_toy_dataset(3, 12).unwrap().iter().enumerate() {
            let noun = TOY_CLASSES[toy_label(i).class].0;
            assert_eq!(clip.references.len(), 5);
            assert!(distinct_words(&clip.references).len() > 3);
            for r in &clip.references {
                assert!(r.split(' ').any(|w| w == noun), "{r}");
                let n = r.split(' ').count();
                assert!((5..=9).contains(&n), "{r}");
            }
            let unique: BTreeSet<_> = clip.references.iter().collect();
            assert_eq!(unique.len(), 5);
        }
    }

    #[test]
    fn toy_needs_two_clips() {
        assert!(make_toy_dataset(1, 1).is_err());
    }

    #[test]
    fn unpaired_from_two_clips_comes_from_the_other() {
        let clips = make_toy_dataset(1, 2).unwrap();
        let batch: Vec<_> = clips.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_unpaired(&batch, 3, &mut rng).unwrap();
        for (i, clip) in clips.iter().enumerate() {
            let other = &clips[1 - i];
            for u in &out[&clip.clip_id] {
                assert_eq!(u.origin, other.clip_id);
                assert!(other.references.contains(&u.text));
            }
        }
    }

    #[test]
    fn unpaired_single_clip_errors() {
        let clips = make_toy_dataset(1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_unpaired(&[&clips[0]], 1, &mut rng).is_err());
    }

    #[test]
    fn unpaired_is_seed_deterministic() {
        let clips = make_toy_dataset(1, 32).unwrap();
        let batch: Vec<_> = clips.iter().collect();
        let a = sample_unpaired(&batch, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = sample_unpaired(&batch, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        for (id, picks) in &a {
            assert_eq!(picks.len(), 1);
            assert!(picks.iter().all(|u| &u.origin != id));
        }
    }
}
