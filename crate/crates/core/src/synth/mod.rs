//! Procedural app generator whose ratings are a known function of
//! separable content, style and text factors.

mod augment;
mod render;
mod text;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{write_manifest, AppRecord, Snapshot, Tag, MANIFEST_FILE};
use crate::rating::ContentRating;
use crate::rng::{derive_rng, stream};

pub use augment::{
    augment_image, apply_augment, mask_patches, mask_with_anchors, sample_augment,
    sample_mask_anchors, AugmentParams, MASK_BLOCK, MASK_BLOCKS,
};
pub use render::{render_image, STENCIL_SIZE};
pub use text::{
    chunk_description, describe, split_sentences, tokenize, Vocab, MAX_TOKENS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Content {
    Star,
    Heart,
    Dice,
    Bottle,
    Weapon,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Pastel,
    Primary,
    Neon,
    Grayscale,
    Dark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Audience {
    Kids,
    Neutral,
    Adults,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Theme {
    None,
    Casino,
    Battle,
}

impl Content {
    pub const ALL: [Content; 5] = [
        Content::Star,
        Content::Heart,
        Content::Dice,
        Content::Bottle,
        Content::Weapon,
    ];
    pub fn severity(self) -> i32 {
        match self {
            Content::Star | Content::Heart => 0,
            Content::Dice | Content::Bottle => 2,
            Content::Weapon => 3,
        }
    }
}

impl Style {
    pub const ALL: [Style; 5] = [
        Style::Pastel,
        Style::Primary,
        Style::Neon,
        Style::Grayscale,
        Style::Dark,
    ];
    pub fn severity(self) -> i32 {
        match self {
            Style::Pastel | Style::Primary => 0,
            Style::Neon | Style::Grayscale => 1,
            Style::Dark => 2,
        }
    }
}

impl Audience {
    pub const ALL: [Audience; 3] = [Audience::Kids, Audience::Neutral, Audience::Adults];
    pub fn modifier(self) -> i32 {
        match self {
            Audience::Kids => -1,
            Audience::Neutral => 0,
            Audience::Adults => 1,
        }
    }
}

impl Theme {
    pub const ALL: [Theme; 3] = [Theme::None, Theme::Casino, Theme::Battle];
    pub fn modifier(self) -> i32 {
        match self {
            Theme::None => 0,
            Theme::Casino | Theme::Battle => 1,
        }
    }
}

/// Hidden generative factors of a synthetic app.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LatentFactors {
    pub content: Content,
    pub style: Style,
    pub audience: Audience,
    pub theme: Theme,
}

impl LatentFactors {
    pub fn all() -> impl Iterator<Item = LatentFactors> {
        Content::ALL.into_iter().flat_map(|content| {
            Style::ALL.into_iter().flat_map(move |style| {
                Audience::ALL.into_iter().flat_map(move |audience| {
                    Theme::ALL.into_iter().map(move |theme| LatentFactors {
                        content,
                        style,
                        audience,
                        theme,
                    })
                })
            })
        })
    }

    /// True when some other style alone would change the rating.
    pub fn is_style_critical(&self) -> bool {
        let r = rating_of(self);
        Style::ALL
            .into_iter()
            .any(|style| rating_of(&LatentFactors { style, ..*self }) != r)
    }

    /// True when some other theme alone would change the rating.
    pub fn is_fusion_critical(&self) -> bool {
        let r = rating_of(self);
        Theme::ALL
            .into_iter()
            .any(|theme| rating_of(&LatentFactors { theme, ..*self }) != r)
    }

    pub fn tags(&self) -> BTreeSet<Tag> {
        let mut tags = BTreeSet::new();
        if self.is_style_critical() {
            tags.insert(Tag::StyleCritical);
        }
        if self.is_fusion_critical() {
            tags.insert(Tag::FusionCritical);
        }
        tags
    }
}

/// Ground-truth rating of a latent factor combination.
pub fn rating_of(latent: &LatentFactors) -> ContentRating {
    ContentRating::from_clamped(
        latent.content.severity()
            + latent.style.severity()
            + latent.audience.modifier()
            + latent.theme.modifier(),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub n_apps: usize,
    pub screenshots_per_app: (usize, usize),
    pub sentences_per_description: (usize, usize),
    pub class_balance: [f64; 5],
    pub seed: u64,
    pub frac_style_critical: f64,
    pub frac_fusion_critical: f64,
    pub image_size: usize,
    pub id_prefix: String,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n_apps: 2000,
            screenshots_per_app: (0, 1),
            sentences_per_description: (6, 12),
            class_balance: [1.0; 5],
            seed: 42,
            frac_style_critical: 0.5,
            frac_fusion_critical: 0.5,
            image_size: 64,
            id_prefix: "app-".into(),
        }
    }
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        let (s0, s1) = self.screenshots_per_app;
        let (t0, t1) = self.sentences_per_description;
        if s0 > s1 || t0 > t1 || t0 == 0 {
            return Err(Error::Config("empty range in data spec".into()));
        }
        if self.class_balance.iter().any(|w| !(*w >= 0.0))
            || self.class_balance.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::Config(
                "class weights must be non-negative with a positive sum".into(),
            ));
        }
        for f in [self.frac_style_critical, self.frac_fusion_critical] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config("critical fractions must lie in [0, 1]".into()));
            }
        }
        if self.image_size < STENCIL_SIZE {
            return Err(Error::Config(format!(
                "image_size must be at least {STENCIL_SIZE}"
            )));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items over the class weights.
pub fn class_counts(n: usize, weights: &[f64; 5]) -> [usize; 5] {
    let total: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts = [0usize; 5];
    for (c, e) in counts.iter_mut().zip(&exact) {
        *c = e.floor() as usize;
    }
    let mut order: Vec<usize> = (0..5).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = n - counts.iter().sum::<usize>();
    for &k in order.iter().cycle() {
        if left == 0 {
            break;
        }
        if weights[k] > 0.0 {
            counts[k] += 1;
            left -= 1;
        }
    }
    counts
}

const DAY: i64 = 86_400;
/// Market observation times: launch, three months, nine months.
const SNAPSHOT_TIMES: [i64; 3] = [0, 90 * DAY, 270 * DAY];

fn sample_latent(target: ContentRating, style_crit: bool, fusion_crit: bool, rng: &mut crate::rng::Rng) -> LatentFactors {
    let by_rating: Vec<LatentFactors> = LatentFactors::all()
        .filter(|l| rating_of(l) == target)
        .collect();
    let constrained: Vec<LatentFactors> = by_rating
        .iter()
        .copied()
        .filter(|l| (!style_crit || l.is_style_critical()) && (!fusion_crit || l.is_fusion_critical()))
        .collect();
    let pool = if constrained.is_empty() { &by_rating } else { &constrained };
    pool[rng.random_range(0..pool.len())]
}

/// Generates records and their image assets into `out`.
///
/// Each app draws from its own stream keyed by `(seed, index)`, so the
/// output is byte-identical for a fixed spec.
pub fn gen_dataset(spec: &DataSpec, out: &Path) -> Result<Vec<AppRecord>> {
    spec.validate()?;
    let images = out.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let counts = class_counts(spec.n_apps, &spec.class_balance);
    let mut labels: Vec<ContentRating> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &c)| std::iter::repeat_n(ContentRating::ALL[k], c))
        .collect();
    labels.shuffle(&mut derive_rng(spec.seed, &[stream::LABELS]));

    let mut records = Vec::with_capacity(spec.n_apps);
    for (index, &target) in labels.iter().enumerate() {
        let mut rng = derive_rng(spec.seed, &[stream::APP, index as u64]);
        let style_crit = rng.random::<f64>() < spec.frac_style_critical;
        let fusion_crit = rng.random::<f64>() < spec.frac_fusion_critical;
        let latent = sample_latent(target, style_crit, fusion_crit, &mut rng);

        let app_id = format!("{}{index:05}", spec.id_prefix);
        let n_shots = rng.random_range(spec.screenshots_per_app.0..=spec.screenshots_per_app.1);
        let mut paths = Vec::with_capacity(n_shots + 1);
        for k in 0..=n_shots {
            let rel = format!("images/{app_id}_{k}.ppm");
            render_image(&latent, spec.image_size, &mut rng).write_ppm(&out.join(&rel))?;
            paths.push(rel);
        }
        let n_sent = rng.random_range(spec.sentences_per_description.0..=spec.sentences_per_description.1);
        let description = describe(&latent, n_sent, &mut rng);
        let downloads = 10f64.powf(rng.random_range(0.0..7.0)).floor() as u64;

        let removed_at = if rng.random::<f64>() < 0.15 {
            Some(rng.random_range(1..SNAPSHOT_TIMES.len()))
        } else {
            None
        };
        let snapshots = SNAPSHOT_TIMES
            .iter()
            .enumerate()
            .map(|(k, &ts)| Snapshot {
                ts,
                alive: removed_at.is_none_or(|r| k < r),
            })
            .collect();

        let icon = paths.remove(0);
        records.push(AppRecord {
            app_id,
            declared: rating_of(&latent),
            icon,
            screenshots: paths,
            description,
            downloads,
            snapshots,
            tags: latent.tags(),
            latent: Some(latent),
        });
    }
    write_manifest(&out.join(MANIFEST_FILE), &records)?;
    Ok(records)
}
