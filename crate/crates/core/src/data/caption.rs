//! View-conditioned caption grammar and the whitespace tokenizer.
//!
//! Each view draws from its own slice of the factor vocabulary. Background
//! and main-object word sets are fully disjoint, and a background caption's
//! token set is an exact function of `background_id`, which keeps the
//! ground-truth retrievability contract crisp.

use std::collections::HashMap;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::scene::LatentScene;
use crate::error::{Error, Result};

pub const UNK_TOKEN: usize = 0;
pub const EOS_TOKEN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewTag {
    Details,
    Nouns,
    MainObject,
    Background,
    Style,
    RawAlt,
}

impl ViewTag {
    pub const ALL_CAPTIONED: [ViewTag; 5] = [
        ViewTag::Details,
        ViewTag::Nouns,
        ViewTag::MainObject,
        ViewTag::Background,
        ViewTag::Style,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ViewTag::Details => "details",
            ViewTag::Nouns => "nouns",
            ViewTag::MainObject => "main_object",
            ViewTag::Background => "background",
            ViewTag::Style => "style",
            ViewTag::RawAlt => "raw_alt",
        }
    }

    pub fn parse(name: &str) -> Result<ViewTag> {
        match name {
            "details" => Ok(ViewTag::Details),
            "nouns" => Ok(ViewTag::Nouns),
            "main_object" => Ok(ViewTag::MainObject),
            "background" => Ok(ViewTag::Background),
            "style" => Ok(ViewTag::Style),
            "raw_alt" => Ok(ViewTag::RawAlt),
            other => Err(Error::UnsupportedView(other.to_string())),
        }
    }
}

impl std::fmt::Display for ViewTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.name())
    }
}

pub const SHAPES: [&str; 4] = ["disc", "block", "wedge", "rhomb"];
pub const COLORS: [&str; 4] = ["crimson", "azure", "amber", "viridian"];
pub const ATTRIBUTES: [&str; 8] = [
    "glossy", "matte", "striped", "dotted", "rimmed", "hollow", "beveled", "frosted",
];
pub const BACKGROUNDS: [&str; 8] = [
    "meadow", "tundra", "reef", "dunes", "orchard", "quarry", "marsh", "glacier",
];
const BACKGROUND_MODS: [&str; 8] = [
    "sprawling", "hazy", "windswept", "sunlit", "shadowed", "endless", "quiet", "rippled",
];
pub const STYLE_WORDS: [&str; 4] = ["natural", "shifted", "dimmed", "faded"];

const DETAILS_FILLER: [&str; 4] = ["panorama", "featuring", "amid", "terrain"];
const MAIN_OBJECT_FILLER: [&str; 4] = ["solitary", "centered", "form", "bearing"];
const BACKGROUND_FILLER: [&str; 4] = ["expanse", "stretches", "behind", "backdrop"];
const STYLE_FILLER: [&str; 3] = ["tone", "cast", "overall"];

/// Fixed token->id map covering every word the grammar can emit, plus the
/// unknown and terminal specials.
pub struct Vocabulary {
    id_of: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    fn build() -> Vocabulary {
        let mut tokens: Vec<String> = vec!["<unk>".into(), "<eos>".into()];
        for group in [
            &SHAPES[..],
            &COLORS[..],
            &ATTRIBUTES[..],
            &BACKGROUNDS[..],
            &BACKGROUND_MODS[..],
            &STYLE_WORDS[..],
            &DETAILS_FILLER[..],
            &MAIN_OBJECT_FILLER[..],
            &BACKGROUND_FILLER[..],
            &STYLE_FILLER[..],
        ] {
            tokens.extend(group.iter().map(|s| s.to_string()));
        }
        let id_of = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { id_of, tokens }
    }

    pub fn builtin() -> &'static Vocabulary {
        static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
        VOCAB.get_or_init(Vocabulary::build)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.id_of.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Whitespace words with surrounding punctuation stripped, lowercased.
    pub fn words(text: &str) -> Vec<String> {
        text.split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .collect()
    }

    /// Token ids for a text, unknown words mapped to `<unk>`, with the
    /// terminal token appended.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = Self::words(text)
            .iter()
            .map(|w| self.id(w).unwrap_or(UNK_TOKEN))
            .collect();
        ids.push(EOS_TOKEN);
        ids
    }

    /// Stable token->id JSON map.
    pub fn to_json(&self) -> String {
        let map: std::collections::BTreeMap<&str, usize> = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i))
            .collect();
        serde_json::to_string_pretty(&map).expect("vocabulary serializes")
    }
}

fn object_words(object_id: usize) -> (&'static str, &'static str) {
    (COLORS[object_id / 4], SHAPES[object_id % 4])
}

/// Two fixed modifier words per background id.
fn background_mods(background_id: usize) -> (&'static str, &'static str) {
    (
        BACKGROUND_MODS[background_id],
        BACKGROUND_MODS[(background_id + 3) % BACKGROUND_MODS.len()],
    )
}

/// The attribute-free canonical phrase for an object class; used as the
/// zero-shot classification text.
pub fn object_class_text(object_id: usize) -> String {
    let (color, shape) = object_words(object_id);
    format!("solitary {color} {shape} centered form")
}

/// Canonical phrase for one background class.
pub fn background_class_text(background_id: usize) -> String {
    let (m1, m2) = background_mods(background_id);
    let bg = BACKGROUNDS[background_id];
    format!("{m1} {m2} {bg} expanse stretches behind backdrop")
}

/// Grammar-generated caption for one view of a scene. Word choice is a pure
/// function of the scene factors; the seed only varies arrangement.
pub fn caption_view(scene: &LatentScene, view: ViewTag, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (color, shape) = object_words(scene.object_id);
    let attrs: Vec<&str> = scene.attributes.iter().map(|&a| ATTRIBUTES[a]).collect();
    let (m1, m2) = background_mods(scene.background_id);
    let bg = BACKGROUNDS[scene.background_id];

    let text = match view {
        ViewTag::Details => {
            let mut shuffled = attrs.clone();
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, rng.gen_range(0..=i));
            }
            let attr_run = if shuffled.is_empty() {
                String::new()
            } else {
                format!("{} ", shuffled.join(" "))
            };
            if rng.gen_bool(0.5) {
                format!("panorama featuring {attr_run}{color} {shape} amid {m1} {m2} {bg} terrain")
            } else {
                format!("amid {m1} {m2} {bg} terrain panorama featuring {attr_run}{color} {shape}")
            }
        }
        ViewTag::Nouns => {
            let mut nouns = vec![shape, bg, color];
            nouns.extend(attrs.iter().take(2));
            nouns.join(", ")
        }
        ViewTag::MainObject => {
            if attrs.is_empty() {
                format!("solitary {color} {shape} centered form")
            } else if rng.gen_bool(0.5) {
                format!("solitary {color} {shape} form bearing {}", attrs.join(" "))
            } else {
                format!("centered {color} {shape} form bearing {}", attrs.join(" "))
            }
        }
        ViewTag::Background => {
            if rng.gen_bool(0.5) {
                format!("{m1} {m2} {bg} expanse stretches behind backdrop")
            } else {
                format!("backdrop behind {bg} expanse stretches {m1} {m2}")
            }
        }
        ViewTag::Style => {
            let style = STYLE_WORDS[scene.style_id];
            if rng.gen_bool(0.5) {
                format!("{style} tone cast overall")
            } else {
                format!("overall {style} cast tone")
            }
        }
        ViewTag::RawAlt => return Err(Error::UnsupportedView("raw_alt".into())),
    };
    Ok(text)
}

/// L2-normalized bag-of-words vector over the builtin vocabulary; the
/// model-free text embedding used for diversity statistics and grouping
/// before a trained encoder exists.
pub fn bow_embedding(text: &str) -> Result<crate::tensor::Tensor> {
    let vocab = Vocabulary::builtin();
    let mut counts = vec![0.0; vocab.len()];
    for w in Vocabulary::words(text) {
        counts[vocab.id(&w).unwrap_or(UNK_TOKEN)] += 1.0;
    }
    crate::tensor::l2_normalize(&crate::tensor::Tensor::vector(counts)?)
}
