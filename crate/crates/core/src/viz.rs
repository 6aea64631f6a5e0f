//! Which words image patches attend to: per-patch and per-region token
//! rankings from cross-attention weights, and heatmap rendering.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;
use crate::synth::Vocab;

/// Token ids never reported: specials, punctuation and function words.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopList {
    ids: BTreeSet<u32>,
}

impl StopList {
    pub fn standard() -> Self {
        Self {
            ids: Vocab::standard().stop_ids().collect(),
        }
    }

    pub fn contains(&self, id: u32) -> bool {
        id == Vocab::PAD || self.ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Post-softmax weights `[heads, queries, keys]` of one image-text pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
    pub weights: Vec<f32>,
}

impl AttentionMap {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (heads, queries, keys) = t.dims3()?;
        Ok(Self {
            heads,
            queries,
            keys,
            weights: t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?,
        })
    }

    pub fn row(&self, head: usize, query: usize) -> &[f32] {
        let start = (head * self.queries + query) * self.keys;
        &self.weights[start..start + self.keys]
    }

    fn check(&self, head: usize, tokens: &[u32]) -> Result<()> {
        if head >= self.heads {
            return Err(Error::Invalid(format!("head {head} out of range for {} heads", self.heads)));
        }
        if tokens.len() != self.keys {
            return Err(Error::Shape(format!("{} tokens for {} attention keys", tokens.len(), self.keys)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub token: String,
    pub id: u32,
    /// Key position in the sequence.
    pub position: usize,
    pub weight: f32,
}

/// Top `k` non-stop keys by weight; equal weights go to the lower token id,
/// then the earlier position.
fn rank(weights: &[f32], tokens: &[u32], stop: &StopList, k: usize) -> Vec<RankedToken> {
    let mut keys: Vec<usize> = (0..tokens.len()).filter(|&j| !stop.contains(tokens[j])).collect();
    keys.sort_by(|&a, &b| {
        weights[b]
            .total_cmp(&weights[a])
            .then(tokens[a].cmp(&tokens[b]))
            .then(a.cmp(&b))
    });
    let vocab = Vocab::standard();
    keys.into_iter()
        .take(k)
        .map(|j| RankedToken {
            token: vocab.word(tokens[j]).to_string(),
            id: tokens[j],
            position: j,
            weight: weights[j],
        })
        .collect()
}

/// Ranked tokens for every patch (query) under one head.
pub fn top_tokens_per_patch(
    attn: &AttentionMap,
    tokens: &[u32],
    stop: &StopList,
    k: usize,
    head: usize,
) -> Result<Vec<Vec<RankedToken>>> {
    attn.check(head, tokens)?;
    Ok((0..attn.queries)
        .map(|q| rank(attn.row(head, q), tokens, stop, k))
        .collect())
}

/// A non-empty 4-connected set of patches on a square grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatchRegion {
    patches: BTreeSet<usize>,
}

impl PatchRegion {
    pub fn new(patches: impl IntoIterator<Item = usize>, grid: usize) -> Result<Self> {
        let patches: BTreeSet<usize> = patches.into_iter().collect();
        let Some(&first) = patches.first() else {
            return Err(Error::Invalid("empty patch region".into()));
        };
        if let Some(&bad) = patches.iter().find(|&&p| p >= grid * grid) {
            return Err(Error::Invalid(format!("patch {bad} outside the {grid}x{grid} grid")));
        }
        let mut seen = BTreeSet::from([first]);
        let mut queue = VecDeque::from([first]);
        while let Some(p) = queue.pop_front() {
            let (r, c) = (p / grid, p % grid);
            let mut next = Vec::with_capacity(4);
            if r > 0 {
                next.push(p - grid);
            }
            if r + 1 < grid {
                next.push(p + grid);
            }
            if c > 0 {
                next.push(p - 1);
            }
            if c + 1 < grid {
                next.push(p + 1);
            }
            for n in next {
                if patches.contains(&n) && seen.insert(n) {
                    queue.push_back(n);
                }
            }
        }
        if seen.len() != patches.len() {
            return Err(Error::Invalid("patch region is not 4-connected".into()));
        }
        Ok(Self { patches })
    }

    pub fn patches(&self) -> impl Iterator<Item = usize> + '_ {
        self.patches.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }
}

/// Ranks keys by their mean weight over the region's patches.
pub fn region_top_tokens(
    attn: &AttentionMap,
    region: &PatchRegion,
    tokens: &[u32],
    stop: &StopList,
    k: usize,
    head: usize,
) -> Result<Vec<RankedToken>> {
    attn.check(head, tokens)?;
    if let Some(p) = region.patches().find(|&p| p >= attn.queries) {
        return Err(Error::Invalid(format!("patch {p} beyond {} queries", attn.queries)));
    }
    let mut mean = vec![0f64; attn.keys];
    for p in region.patches() {
        for (m, &w) in mean.iter_mut().zip(attn.row(head, p)) {
            *m += w as f64;
        }
    }
    let n = region.len() as f64;
    let mean: Vec<f32> = mean.into_iter().map(|m| (m / n) as f32).collect();
    Ok(rank(&mean, tokens, stop, k))
}

/// Blends the image at 50% with red proportional to each patch's weight
/// over the maximum weight.
pub fn heatmap(image: &ImageBuffer, patch_weights: &[f32], patch: usize) -> Result<ImageBuffer> {
    let (gw, gh) = image.check_patch_grid(patch)?;
    if patch_weights.len() != gw * gh {
        return Err(Error::Shape(format!("{} weights for {} patches", patch_weights.len(), gw * gh)));
    }
    let max = patch_weights.iter().copied().fold(0f32, f32::max);
    let mut out = ImageBuffer::new(image.width, image.height);
    for y in 0..image.height {
        for x in 0..image.width {
            let w = patch_weights[(y / patch) * gw + x / patch];
            let red = if max > 0.0 { w / max } else { 0.0 };
            let [r, g, b] = image.get(x, y);
            out.set(x, y, [0.5 * r + 0.5 * red, 0.5 * g, 0.5 * b]);
        }
    }
    Ok(out)
}

/// Writes the heatmap of every patch's attention to key `token_index`.
pub fn export_heatmap(
    image: &ImageBuffer,
    attn: &AttentionMap,
    token_index: usize,
    head: usize,
    patch: usize,
    path: &Path,
) -> Result<()> {
    if head >= attn.heads || token_index >= attn.keys {
        return Err(Error::Invalid(format!(
            "head {head} / token {token_index} outside {} heads and {} keys",
            attn.heads, attn.keys
        )));
    }
    let weights: Vec<f32> = (0..attn.queries).map(|q| attn.row(head, q)[token_index]).collect();
    heatmap(image, &weights, patch)?.write_ppm(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab_id(w: &str) -> u32 {
        Vocab::standard().id(w)
    }

    fn map(heads: usize, queries: usize, keys: usize, f: impl Fn(usize, usize, usize) -> f32) -> AttentionMap {
        let mut weights = Vec::new();
        for h in 0..heads {
            for q in 0..queries {
                weights.extend((0..keys).map(|k| f(h, q, k)));
            }
        }
        AttentionMap {
            heads,
            queries,
            keys,
            weights,
        }
    }

    #[test]
    fn stoplist_excludes_content_words() {
        let s = StopList::standard();
        assert!(!s.is_empty());
        assert!(s.contains(vocab_id("the")) && s.contains(vocab_id(".")) && s.contains(Vocab::PAD));
        for w in ["casino", "kids", "battle", "adults", "puzzle"] {
            assert!(!s.contains(vocab_id(w)), "{w}");
        }
    }

    #[test]
    fn single_token_dominates_and_stopwords_vanish() {
        let tokens = [vocab_id("the"), vocab_id("casino"), vocab_id("kids"), vocab_id(".")];
        let a = map(2, 4, 4, |_, _, k| [0.99, 0.006, 0.003, 0.001][k]);
        let out = top_tokens_per_patch(&a, &tokens, &StopList::standard(), 3, 1).unwrap();
        for row in &out {
            assert_eq!(row[0].token, "casino");
            assert_eq!(row.len(), 2);
            assert!(row.iter().all(|r| r.token != "the" && r.token != "."));
        }
        assert!(top_tokens_per_patch(&a, &tokens, &StopList::standard(), 0, 0).unwrap().iter().all(Vec::is_empty));
        assert!(top_tokens_per_patch(&a, &tokens, &StopList::standard(), 3, 2).is_err());
    }

    #[test]
    fn regions() {
        assert!(PatchRegion::new([], 8).is_err());
        assert!(PatchRegion::new([0, 2], 8).is_err());
        assert!(PatchRegion::new([7, 8], 8).is_err());
        assert!(PatchRegion::new([64], 8).is_err());
        assert_eq!(PatchRegion::new([9, 1, 0], 8).unwrap(), PatchRegion::new([0, 1, 9], 8).unwrap());

        let tokens = [vocab_id("casino"), vocab_id("kids"), vocab_id("poker")];
        // patch 0: [0.6, 0.3, 0.1], patch 1: [0.0, 0.5, 0.5] -> means [0.3, 0.4, 0.3]
        let rows = [[0.6, 0.3, 0.1], [0.0, 0.5, 0.5], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let a = map(1, 4, 3, |_, q, k| rows[q][k]);
        let stop = StopList::standard();
        let r = region_top_tokens(&a, &PatchRegion::new([0, 1], 2).unwrap(), &tokens, &stop, 3, 0).unwrap();
        let got: Vec<(&str, f32)> = r.iter().map(|t| (t.token.as_str(), t.weight)).collect();
        let (lo, hi) = if vocab_id("casino") < vocab_id("poker") { ("casino", "poker") } else { ("poker", "casino") };
        assert_eq!(got, [("kids", 0.4), (lo, 0.3), (hi, 0.3)]);
        let single = region_top_tokens(&a, &PatchRegion::new([1], 2).unwrap(), &tokens, &stop, 3, 0).unwrap();
        assert_eq!(single, top_tokens_per_patch(&a, &tokens, &stop, 3, 0).unwrap()[1]);
    }

    #[test]
    fn uniform_weights_rank_by_token_id() {
        let words = ["poker", "kids", "casino", "adults"];
        let tokens: Vec<u32> = words.iter().map(|w| vocab_id(w)).collect();
        let a = map(1, 1, 4, |_, _, _| 0.25);
        let r = top_tokens_per_patch(&a, &tokens, &StopList::standard(), 4, 0).unwrap();
        let ids: Vec<u32> = r[0].iter().map(|t| t.id).collect();
        let mut sorted = tokens.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn heatmap_blending() {
        let img = ImageBuffer::filled(16, 16, [0.8, 0.4, 0.2]);
        let dim = heatmap(&img, &[0.0; 4], 8).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                assert_eq!(dim.get(x, y), [0.4, 0.2, 0.1]);
            }
        }
        let hot = heatmap(&img, &[0.0, 1.0, 0.0, 0.0], 8).unwrap();
        assert_eq!(hot.get(12, 3), [0.9, 0.2, 0.1]);
        assert_eq!(hot.get(3, 3), [0.4, 0.2, 0.1]);
        assert_eq!(hot.encode_ppm(), heatmap(&img, &[0.0, 1.0, 0.0, 0.0], 8).unwrap().encode_ppm());
        assert!(heatmap(&img, &[0.0; 3], 8).is_err());
    }
}
