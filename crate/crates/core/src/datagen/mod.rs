//! Synthetic compositional corpus and multiple-choice VQA set.
//!
//! Each scene holds one to three distinct glyphs. Its caption names the
//! object count and every glyph; each object also yields a box pair made of
//! the scene re-rendered with that glyph alone and the glyph's name. Box
//! captions are therefore sub-phrases of the scene caption, and box images
//! are sub-images of the scene.

pub mod io;
pub mod noise;
pub mod render;
pub mod vocab;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
pub use noise::{neftune, neftune_noise, text_noise};
pub use render::{hflip, Placement, IMAGE_SIDE, N_SLOTS};

pub const MIN_GLYPHS: usize = 4;
pub const MAX_GLYPHS: usize = vocab::GLYPH_NAMES.len();
pub const MAX_OBJECTS: usize = 3;
pub const N_CANDIDATES: usize = 4;

/// Derives the seed of item `index` from a master seed (splitmix64 mixing),
/// so any item can be generated independently of the others.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn item_rng(master: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, index as u64))
}

fn default_glyph_set_size() -> usize {
    MAX_GLYPHS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_samples: usize,
    #[serde(default = "default_glyph_set_size")]
    pub glyph_set_size: usize,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_GLYPHS..=MAX_GLYPHS).contains(&self.glyph_set_size) {
            return Err(Error::config(format!(
                "glyph_set_size must be in {MIN_GLYPHS}..={MAX_GLYPHS}, got {}",
                self.glyph_set_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxPair {
    pub glyph: usize,
    pub image: Tensor,
    pub caption: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionalSample {
    pub image: Tensor,
    pub caption: Vec<u32>,
    pub objects: Vec<Placement>,
    pub boxes: Vec<BoxPair>,
}

/// Draws the glyphs and slots of one scene.
fn draw_scene<R: Rng + ?Sized>(rng: &mut R, glyph_set_size: usize) -> (Tensor, Vec<Placement>) {
    let n = rng.random_range(1..=MAX_OBJECTS);
    let glyphs = rand::seq::index::sample(rng, glyph_set_size, n);
    let slots = rand::seq::index::sample(rng, N_SLOTS, n);
    let objects = glyphs.iter().zip(slots.iter()).map(|(glyph, slot)| Placement { glyph, slot }).collect();
    (render::background(rng), objects)
}

pub fn scene_caption(objects: &[Placement]) -> Vec<u32> {
    let mut out = vec![vocab::count_token(objects.len())];
    for (i, p) in objects.iter().enumerate() {
        if i > 0 {
            out.push(vocab::id("and").expect("in vocabulary"));
        }
        out.push(vocab::glyph_token(p.glyph));
    }
    out.push(vocab::EOT);
    out
}

pub fn box_caption(glyph: usize) -> Vec<u32> {
    vec![vocab::glyph_token(glyph), vocab::EOT]
}

pub fn sample(master: u64, index: usize, glyph_set_size: usize) -> CompositionalSample {
    let mut rng = item_rng(master, index);
    let (bg, objects) = draw_scene(&mut rng, glyph_set_size);
    let boxes = objects
        .iter()
        .map(|&p| BoxPair { glyph: p.glyph, image: render::render(&bg, &[p]), caption: box_caption(p.glyph) })
        .collect();
    CompositionalSample { image: render::render(&bg, &objects), caption: scene_caption(&objects), objects, boxes }
}

pub fn generate_corpus(cfg: &CorpusConfig) -> Result<Vec<CompositionalSample>> {
    cfg.validate()?;
    Ok((0..cfg.n_samples).map(|i| sample(cfg.seed, i, cfg.glyph_set_size)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuestionKind {
    Presence,
    Count,
}

/// A four-way question. `question` and the candidates are bare word ids;
/// the end-of-text marker is added when queries are formed.
#[derive(Clone, Debug, PartialEq)]
pub struct VqaItem {
    pub image: Tensor,
    pub kind: QuestionKind,
    pub question: Vec<u32>,
    pub candidates: [Vec<u32>; N_CANDIDATES],
    pub gold_index: usize,
}

pub const PRESENCE_QUESTION: &str = "which object is present ?";
pub const COUNT_QUESTION: &str = "how many objects ?";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VqaConfig {
    pub seed: u64,
    pub n_items: usize,
    #[serde(default = "default_glyph_set_size")]
    pub glyph_set_size: usize,
}

impl VqaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_items == 0 {
            return Err(Error::config("a VQA set needs at least one item"));
        }
        CorpusConfig { seed: self.seed, n_samples: self.n_items, glyph_set_size: self.glyph_set_size }.validate()
    }
}

/// Pads `options` (gold first) to four by repeating one incorrect option,
/// then shuffles. Returns the candidates and the gold position.
fn finish_candidates<R: Rng + ?Sized>(mut options: Vec<u32>, rng: &mut R) -> ([Vec<u32>; N_CANDIDATES], usize) {
    while options.len() < N_CANDIDATES {
        let dup = *options[1..].choose(rng).expect("at least one incorrect option");
        options.push(dup);
    }
    let mut order: Vec<usize> = (0..N_CANDIDATES).collect();
    order.shuffle(rng);
    let gold = order.iter().position(|&i| i == 0).expect("gold is present");
    let cands = std::array::from_fn(|j| vec![options[order[j]]]);
    (cands, gold)
}

pub fn vqa_item(master: u64, index: usize, glyph_set_size: usize) -> VqaItem {
    let mut rng = item_rng(master, index);
    let (bg, objects) = draw_scene(&mut rng, glyph_set_size);
    let image = render::render(&bg, &objects);
    let kind = if rng.random_bool(0.5) { QuestionKind::Presence } else { QuestionKind::Count };
    let (question, options) = match kind {
        QuestionKind::Presence => {
            let gold = objects.choose(&mut rng).expect("scene has objects").glyph;
            let absent: Vec<usize> = (0..glyph_set_size).filter(|g| objects.iter().all(|p| p.glyph != *g)).collect();
            let k = absent.len().min(N_CANDIDATES - 1);
            let mut opts = vec![vocab::glyph_token(gold)];
            opts.extend(absent.choose_multiple(&mut rng, k).map(|&g| vocab::glyph_token(g)));
            (PRESENCE_QUESTION, opts)
        }
        QuestionKind::Count => {
            let n = objects.len();
            let mut opts = vec![vocab::count_token(n)];
            opts.extend((1..=MAX_OBJECTS).filter(|&c| c != n).map(vocab::count_token));
            (COUNT_QUESTION, opts)
        }
    };
    let (candidates, gold_index) = finish_candidates(options, &mut rng);
    VqaItem {
        image,
        kind,
        question: vocab::words(question).expect("fixed question is in the vocabulary"),
        candidates,
        gold_index,
    }
}

pub fn generate_vqa(cfg: &VqaConfig) -> Result<Vec<VqaItem>> {
    cfg.validate()?;
    Ok((0..cfg.n_items).map(|i| vqa_item(cfg.seed, i, cfg.glyph_set_size)).collect())
}
