//! Synthetic rewrite corpus with a controllable information split: the
//! detail suffix of each attractive question is predictable only from the
//! side feature vector, while the emotion prefix is predictable only from
//! the bland text. This makes conditioning measurable: a text-only model
//! can at best guess the suffix class.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fnv1a64, sample_normal, TextError, TripleExample};

/// Prefix is selected by `fnv1a64(bland) % 6`, a fixed function of the
/// bland text alone.
pub const EMOTION_PREFIXES: [&str; 6] = [
    "wow , stunning !",
    "this is gorgeous !",
    "so beautiful !",
    "love this !",
    "amazing find !",
    "absolutely perfect !",
];

/// One noun per detail class; class d yields the suffix
/// `what is the {noun} ?`.
pub const DETAIL_NOUNS: [&str; 64] = [
    "wood", "color", "size", "stain", "finish", "brand", "price", "fabric",
    "style", "maker", "height", "width", "depth", "material", "pattern", "texture",
    "origin", "cost", "weight", "shade", "gloss", "trim", "vendor", "model",
    "paint", "grain", "tone", "hue", "sheen", "varnish", "veneer", "molding",
    "frame", "panel", "shelf", "drawer", "handle", "knob", "hinge", "leg",
    "base", "top", "edge", "backing", "seat", "cushion", "cover", "liner",
    "thread", "seam", "weave", "pile", "nap", "lacquer", "primer", "sealant",
    "glaze", "enamel", "pigment", "dye", "plating", "coating", "inlay", "carving",
];

const MATERIALS: [&str; 8] = ["wood", "metal", "fabric", "paint", "tile", "stone", "glass", "leather"];
const DEMONSTRATIVES: [&str; 2] = ["this", "that"];
const VERBS: [&str; 3] = ["get", "buy", "find"];
const ITEMS: [&str; 8] = ["table", "chair", "lamp", "rug", "sofa", "mirror", "cabinet", "bench"];
const ADJECTIVES: [&str; 3] = ["big", "tall", "wide"];

/// Noise level added to the one-hot class embedding.
pub const FEATURE_NOISE: f32 = 0.1;

#[derive(Clone, Debug)]
pub struct SynthConfig {
    pub n: usize,
    pub k_details: usize,
    pub seed: u64,
    /// Width of the pooled feature vector the class is embedded into.
    pub feature_dim: usize,
}

impl SynthConfig {
    pub fn new(n: usize, k_details: usize, seed: u64) -> Self {
        SynthConfig { n, k_details, seed, feature_dim: 64 }
    }
}

/// Generated corpus plus its pooled feature table and the ground-truth
/// detail class of every triple.
pub struct SynthData {
    pub triples: Vec<TripleExample>,
    pub features: HashMap<String, Vec<f32>>,
    pub detail_classes: Vec<usize>,
}

pub fn emotion_prefix(bland: &str) -> &'static str {
    EMOTION_PREFIXES[(fnv1a64(bland) % EMOTION_PREFIXES.len() as u64) as usize]
}

pub fn detail_suffix(d: usize) -> String {
    format!("what is the {} ?", DETAIL_NOUNS[d])
}

fn bland_question(rng: &mut ChaCha8Rng) -> String {
    match rng.random_range(0..3u8) {
        0 => format!(
            "what {} is {} ?",
            MATERIALS[rng.random_range(0..MATERIALS.len())],
            DEMONSTRATIVES[rng.random_range(0..DEMONSTRATIVES.len())],
        ),
        1 => format!(
            "where did you {} the {} ?",
            VERBS[rng.random_range(0..VERBS.len())],
            ITEMS[rng.random_range(0..ITEMS.len())],
        ),
        _ => format!(
            "how {} is the {} ?",
            ADJECTIVES[rng.random_range(0..ADJECTIVES.len())],
            ITEMS[rng.random_range(0..ITEMS.len())],
        ),
    }
}

/// Generate `n` triples. Each feature vector is the one-hot of the detail
/// class embedded in `feature_dim` dimensions plus N(0, 0.1^2) noise; the
/// class is drawn independently of the bland text.
pub fn synth_generate(cfg: &SynthConfig) -> Result<SynthData, TextError> {
    if cfg.n == 0 {
        return Err(TextError::EmptySynth);
    }
    if !(2..=DETAIL_NOUNS.len()).contains(&cfg.k_details) {
        return Err(TextError::InvalidDetailCount(cfg.k_details));
    }
    if cfg.feature_dim < cfg.k_details {
        return Err(TextError::FeatureDimTooSmall { dim: cfg.feature_dim, k: cfg.k_details });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut triples = Vec::with_capacity(cfg.n);
    let mut features = HashMap::with_capacity(cfg.n);
    let mut detail_classes = Vec::with_capacity(cfg.n);

    for i in 0..cfg.n {
        let bland = bland_question(&mut rng);
        let d = rng.random_range(0..cfg.k_details);
        let attractive = format!("{} {} {}", emotion_prefix(&bland), bland, detail_suffix(d));

        let mut c = vec![0.0f32; cfg.feature_dim];
        c[d] = 1.0;
        for v in c.iter_mut() {
            *v += FEATURE_NOISE * sample_normal(&mut rng);
        }

        let feature_ref = format!("synth-{i:05}");
        features.insert(feature_ref.clone(), c);
        detail_classes.push(d);
        triples.push(TripleExample {
            id: format!("s{i:05}"),
            feature_ref,
            bland,
            attractive,
        });
    }

    Ok(SynthData { triples, features, detail_classes })
}

/// Recover the detail class from an attractive question by its suffix
/// noun. Used when only the serialized triples are available.
pub fn detail_class_of(attractive: &str, k_details: usize) -> Option<usize> {
    (0..k_details).find(|&d| attractive.ends_with(&detail_suffix(d)))
}
