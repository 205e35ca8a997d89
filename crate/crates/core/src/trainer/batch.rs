//! Batch sampling and the forward pass from corpus samples to embeddings.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamSet, Session, Tensor, Var};
use crate::datagen::{hflip, text_noise, CompositionalSample};
use crate::encoder::DualEncoder;
use crate::error::{Error, Result};
use crate::objectives::manifold::{lift, Curvature};
use crate::objectives::BatchEmbeddings;
use crate::peft::MANIFOLD_PARAM_NAMES;

/// Draws batches by walking through shuffled epochs of the corpus.
pub struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    pub fn new(n: usize, batch: usize, rng: ChaCha8Rng) -> Result<Self> {
        if n < batch {
            return Err(Error::config(format!("corpus of {n} samples is smaller than the batch size {batch}")));
        }
        let mut b = Self { order: (0..n).collect(), pos: n, rng };
        b.order.shrink_to_fit();
        Ok(b)
    }

    pub fn next(&mut self, batch: usize) -> Vec<usize> {
        if self.pos + batch > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let out = self.order[self.pos..self.pos + batch].to_vec();
        self.pos += batch;
        out
    }
}

/// Identifies an image of the corpus: a scene (`None`) or one of its boxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageKey {
    pub sample: usize,
    pub part: Option<usize>,
}

/// Hidden states of the frozen leading vision blocks, keyed by image.
///
/// When no tensor at or before vision block `upto` is trainable, the output
/// of blocks `0..upto` for a given image never changes during adaptation,
/// so it is computed once and replayed as a constant.
pub struct VisionCache {
    upto: usize,
    store: HashMap<ImageKey, Tensor>,
}

impl VisionCache {
    /// Returns `None` when the very first vision computation is trainable.
    pub fn for_params(model: &DualEncoder, params: &ParamSet) -> Option<Self> {
        let n = model.config.vision.n_layers;
        let stem_trainable = params.trainable().any(|(name, _)| {
            name == "vision.patch_embed.weight" || name == "vision.pos_embed"
        });
        if stem_trainable {
            return None;
        }
        let upto = (0..n)
            .find(|l| {
                let pre = format!("vision.blocks.{l}.");
                params.trainable().any(|(name, _)| name.starts_with(&pre))
            })
            .unwrap_or(n);
        (upto > 0).then(|| Self { upto, store: HashMap::new() })
    }

    pub fn upto(&self) -> usize {
        self.upto
    }

    pub fn len(&self) -> usize {
        self.store.len()
    }

    pub fn is_empty(&self) -> bool {
        self.store.is_empty()
    }

    /// Stacked cached hidden states for `keys`, filling gaps first.
    fn hidden(
        &mut self,
        model: &DualEncoder,
        params: &ParamSet,
        keys: &[ImageKey],
        images: &[&Tensor],
    ) -> Result<Tensor> {
        let missing: Vec<usize> = (0..keys.len()).filter(|&i| !self.store.contains_key(&keys[i])).collect();
        if !missing.is_empty() {
            let mut s = Session::new(params);
            let imgs: Vec<&Tensor> = missing.iter().map(|&i| images[i]).collect();
            let x = model.image_prefix(&mut s, &imgs, self.upto)?;
            let x = s.graph.value(x);
            let g = model.config.n_patches();
            for (j, &i) in missing.iter().enumerate() {
                let rows = (j * g..(j + 1) * g).flat_map(|r| x.row_slice(r).to_vec()).collect();
                self.store.insert(keys[i], Tensor::new(g, x.cols(), rows)?);
            }
        }
        let g = model.config.n_patches();
        let d = model.config.vision.d_model;
        let data = keys.iter().flat_map(|k| self.store[k].data().to_vec()).collect();
        Tensor::new(keys.len() * g, d, data)
    }
}

/// Options of one forward pass over corpus samples.
pub struct EmbedOptions<'a> {
    /// NEFTune coefficient and noise source for the text tower.
    pub noise: Option<(f64, &'a mut ChaCha8Rng)>,
    pub cache: Option<&'a mut VisionCache>,
    /// Mirror each sample (scene and boxes together) with probability 1/2.
    pub flip: Option<&'a mut ChaCha8Rng>,
}

impl EmbedOptions<'_> {
    pub fn clean() -> Self {
        Self { noise: None, cache: None, flip: None }
    }
}

/// Euclidean embeddings of scenes and boxes, with `box_owner` mapping each
/// box row to its sample's position in the batch.
pub struct RawEmbeddings {
    pub image: Var,
    pub text: Var,
    pub image_box: Option<Var>,
    pub text_box: Option<Var>,
    pub box_owner: Vec<usize>,
}

pub fn embed(
    model: &DualEncoder,
    s: &mut Session<'_>,
    samples: &[(usize, &CompositionalSample)],
    opts: EmbedOptions<'_>,
) -> Result<RawEmbeddings> {
    let n = samples.len();
    let mut keys = Vec::new();
    let mut owned: Vec<Tensor> = Vec::new();
    let mut images: Vec<&Tensor> = Vec::new();
    let mut box_owner = Vec::new();
    let flips: Vec<bool> = match opts.flip {
        Some(rng) => samples.iter().map(|_| rng.random_bool(0.5)).collect(),
        None => vec![false; n],
    };
    for (pos, (idx, smp)) in samples.iter().enumerate() {
        keys.push(ImageKey { sample: *idx, part: None });
        if flips[pos] {
            owned.push(hflip(&smp.image));
        }
    }
    for (pos, (idx, smp)) in samples.iter().enumerate() {
        for (b, bx) in smp.boxes.iter().enumerate() {
            keys.push(ImageKey { sample: *idx, part: Some(b) });
            box_owner.push(pos);
            if flips[pos] {
                owned.push(hflip(&bx.image));
            }
        }
    }
    let mut flipped = owned.iter();
    for (pos, (_, smp)) in samples.iter().enumerate() {
        images.push(if flips[pos] { flipped.next().expect("flipped scene") } else { &smp.image });
    }
    for (pos, (_, smp)) in samples.iter().enumerate() {
        for bx in &smp.boxes {
            images.push(if flips[pos] { flipped.next().expect("flipped box") } else { &bx.image });
        }
    }
    let all_img = match opts.cache {
        Some(cache) if !flips.iter().any(|&f| f) => {
            let h = cache.hidden(model, s.params(), &keys, &images)?;
            let h = s.graph.constant(h);
            model.image_from_hidden(s, h, images.len(), cache.upto())?
        }
        _ => model.encode_image_batch(s, &images)?,
    };
    let mut texts: Vec<&[u32]> = samples.iter().map(|(_, smp)| smp.caption.as_slice()).collect();
    for (_, smp) in samples {
        texts.extend(smp.boxes.iter().map(|b| b.caption.as_slice()));
    }
    let noise = opts.noise.map(|(alpha, rng)| text_noise(&texts, model.config.text.d_model, alpha, rng));
    let all_txt = model.encode_text_batch(s, &texts, noise.as_ref())?;
    let scene: Vec<usize> = (0..n).collect();
    let boxes: Vec<usize> = (n..n + box_owner.len()).collect();
    let image = s.graph.gather_rows(all_img, &scene)?;
    let text = s.graph.gather_rows(all_txt, &scene)?;
    let (image_box, text_box) = if boxes.is_empty() {
        (None, None)
    } else {
        (Some(s.graph.gather_rows(all_img, &boxes)?), Some(s.graph.gather_rows(all_txt, &boxes)?))
    };
    Ok(RawEmbeddings { image, text, image_box, text_box, box_owner })
}

/// Lifts raw embeddings onto the hyperboloid with the model's scalars.
pub fn lift_embeddings(s: &mut Session<'_>, raw: &RawEmbeddings) -> Result<(BatchEmbeddings, Curvature)> {
    let lk = s.param(MANIFOLD_PARAM_NAMES[0])?;
    let c = Curvature::from_log(&mut s.graph, lk);
    let ai = s.param(MANIFOLD_PARAM_NAMES[1])?;
    let at = s.param(MANIFOLD_PARAM_NAMES[2])?;
    let image = lift(&mut s.graph, raw.image, ai, &c)?;
    let text = lift(&mut s.graph, raw.text, at, &c)?;
    let (image_box, text_box) = match (raw.image_box, raw.text_box) {
        (Some(ib), Some(tb)) => (lift(&mut s.graph, ib, ai, &c)?, lift(&mut s.graph, tb, at, &c)?),
        _ => {
            let d = s.graph.value(raw.image).cols();
            let empty = |s: &mut Session<'_>, cols| s.graph.constant(Tensor::zeros(0, cols));
            let e = crate::objectives::manifold::Points { space: empty(s, d), time: empty(s, 1) };
            (e, e)
        }
    };
    Ok((BatchEmbeddings { image, text, image_box, text_box, box_owner: raw.box_owner.clone() }, c))
}
