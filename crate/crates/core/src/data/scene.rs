//! Ground-truth latent factors behind each synthetic image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const OBJECT_COUNT: usize = 16;
pub const BACKGROUND_COUNT: usize = 8;
pub const STYLE_COUNT: usize = 4;
pub const ATTRIBUTE_COUNT: usize = 8;
pub const RELATION_COUNT: usize = 4;
const MAX_ATTRIBUTES: usize = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentScene {
    pub object_id: usize,
    pub background_id: usize,
    pub style_id: usize,
    /// Distinct attribute ids, ascending.
    pub attributes: Vec<usize>,
    /// Placement code for the secondary glyph: 0 left, 1 right, 2 above,
    /// 3 below.
    pub relation: usize,
    pub seed: u64,
}

/// Deterministic scene draw with uniform factor marginals. The raw seed is
/// splitmixed first so dense seed ranges (0, 1, 2, ...) decorrelate.
pub fn generate_scene(seed: u64) -> LatentScene {
    let mut rng = ChaCha8Rng::seed_from_u64(crate::data::mix_seed(seed, 0x5CEE_D5CE));
    let object_id = rng.gen_range(0..OBJECT_COUNT);
    let background_id = rng.gen_range(0..BACKGROUND_COUNT);
    let style_id = rng.gen_range(0..STYLE_COUNT);
    let count = rng.gen_range(0..=MAX_ATTRIBUTES);
    let mut pool: Vec<usize> = (0..ATTRIBUTE_COUNT).collect();
    let mut attributes = Vec::with_capacity(count);
    for _ in 0..count {
        let pick = rng.gen_range(0..pool.len());
        attributes.push(pool.swap_remove(pick));
    }
    attributes.sort_unstable();
    let relation = rng.gen_range(0..RELATION_COUNT);
    LatentScene {
        object_id,
        background_id,
        style_id,
        attributes,
        relation,
        seed,
    }
}
