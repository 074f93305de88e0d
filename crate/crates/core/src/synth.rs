//! Seeded synthetic embedding fixture.
//!
//! Categories get unit-norm prompt vectors. `ambiguity` pairs of categories
//! get nearly collinear prompts (cosine ≈ 0.995), so the frozen-prompt head
//! confuses them. Each sample's vision embedding is its category prompt plus
//! a category-specific appearance direction (weight `(1 - ocr_signal) ·
//! appearance`) and isotropic noise. Its OCR embedding mixes a
//! category-specific text prototype (weight `ocr_signal`) with a per-sample
//! random text vector; text prototypes share the category's appearance
//! direction, as text and image embeddings do in a joint space. A fraction `empty_ocr` of elements carry no text and
//! resolve to the empty word, which is the zero vector here.
//!
//! Samples are laid out as elements on synthetic screens, each text box
//! covering a tenth of its element, so the whole link, train and evaluate
//! path runs on the output.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{build_proposals, CategorySet, LabeledProposals, ProposalOptions, ScreenAnnotation, Split};
use crate::error::{Error, Result};
use crate::geometry::{BBox, ElementAnnotation, OcrItem};
use crate::head::CategoryPrompts;
use crate::math::{dot, norm, sqrt};
use crate::store::{image_key, ocr_key, prompt_key, EmbeddingStore, EMPTY_WORD_KEY};

const UI_NAMES: [&str; 18] = [
    "product", "icon", "button", "card", "tips", "menu", "tab", "search", "banner", "dialog", "checkbox", "toggle",
    "slider", "input", "badge", "avatar", "title", "image",
];

/// Prompt offset size for ambiguous pairs: cos = 1 / sqrt(1 + 0.1²) ≈ 0.995.
const AMBIGUOUS_OFFSET: f64 = 0.1;
const ELEMENT_W: f64 = 160.0;
const ELEMENT_H: f64 = 80.0;
const SCREEN_W: u32 = 360;
const STATUS_BAR: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub dim: usize,
    pub categories: usize,
    /// Training samples per category.
    pub n_train: usize,
    /// Validation samples per category.
    pub n_val: usize,
    pub vision_noise: f64,
    pub ocr_signal: f64,
    pub ambiguity: usize,
    pub appearance: f64,
    pub empty_ocr: f64,
    /// The last `novel` categories are marked novel.
    pub novel: usize,
    pub elements_per_screen: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            dim: 64,
            categories: 6,
            n_train: 200,
            n_val: 100,
            vision_noise: 0.8,
            ocr_signal: 0.7,
            ambiguity: 2,
            appearance: 1.0,
            empty_ocr: 0.2,
            novel: 0,
            elements_per_screen: 8,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.dim < 4 {
            return bad(format!("dim must be >= 4, got {}", self.dim));
        }
        if self.categories < 2 {
            return bad(format!("need at least 2 categories, got {}", self.categories));
        }
        if self.n_val < 1 {
            return bad("n_val must be >= 1".into());
        }
        if 2 * self.ambiguity > self.categories {
            return bad(format!("{} ambiguous pairs need {} categories", self.ambiguity, 2 * self.ambiguity));
        }
        if self.novel >= self.categories {
            return bad("at least one category must stay base".into());
        }
        if !(0.0..=1.0).contains(&self.ocr_signal) || !(0.0..=1.0).contains(&self.empty_ocr) {
            return bad("ocr_signal and empty_ocr must lie in [0, 1]".into());
        }
        if !(self.vision_noise >= 0.0 && self.appearance >= 0.0) {
            return bad("vision_noise and appearance must be >= 0".into());
        }
        if self.elements_per_screen == 0 {
            return bad("elements_per_screen must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub config: SynthConfig,
    pub store: EmbeddingStore,
    pub train: Vec<ScreenAnnotation>,
    pub val: Vec<ScreenAnnotation>,
    pub categories: CategorySet,
    /// Index pairs with near-collinear prompts.
    pub ambiguous_pairs: Vec<(usize, usize)>,
}

impl SynthDataset {
    /// Proposals for the train and validation screens plus the prompts of
    /// the categories admitted by `options.filter`.
    pub fn proposals(&self, options: &ProposalOptions) -> Result<(LabeledProposals, LabeledProposals, CategoryPrompts)> {
        let train = build_proposals(&self.train, &self.store, &self.categories, options)?;
        let val = build_proposals(&self.val, &self.store, &self.categories, options)?;
        let prompts = CategoryPrompts::from_store(&self.store, &self.categories, options.filter)?;
        Ok((train, val, prompts))
    }
}

pub fn category_name(k: usize) -> String {
    UI_NAMES.get(k).map_or_else(|| format!("category{k}"), |s| String::from(*s))
}

fn gaussian(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    v.iter_mut().for_each(|x| *x /= n);
    v
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    unit(gaussian(rng, d))
}

/// Unit vector orthogonal to unit `t`.
fn orthogonal_unit(rng: &mut ChaCha8Rng, t: &[f64]) -> Vec<f64> {
    loop {
        let mut u = gaussian(rng, t.len());
        let p = dot(&u, t);
        u.iter_mut().zip(t).for_each(|(x, y)| *x -= p * y);
        if norm(&u) > 1e-6 {
            return unit(u);
        }
    }
}

fn axpy(a: f64, x: &[f64], y: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(yv, xv)| yv + a * xv).collect()
}

/// `normalize(s·proto + (1 − s)·z)`; at `s = 0` the prototype drops out.
fn mix_text(proto: &[f64], z: &[f64], s: f64) -> Vec<f64> {
    let mixed: Vec<f64> = proto.iter().zip(z).map(|(p, q)| s * p + (1.0 - s) * q).collect();
    if norm(&mixed) > 0.0 { unit(mixed) } else { z.to_vec() }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let d = config.dim;
    let m = config.categories;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let ambiguous_pairs: Vec<(usize, usize)> = (0..config.ambiguity).map(|k| (2 * k, 2 * k + 1)).collect();
    let partner = |c: usize| ambiguous_pairs.iter().find_map(|&(a, b)| (a == c).then_some(b).or((b == c).then_some(a)));

    // Prompts: pairwise cosine < 0.8 outside ambiguous pairs.
    let mut prompts: Vec<Vec<f64>> = Vec::with_capacity(m);
    for c in 0..m {
        let t = match partner(c) {
            Some(p) if p < c => {
                let u = orthogonal_unit(&mut rng, &prompts[p]);
                unit(axpy(AMBIGUOUS_OFFSET, &u, &prompts[p]))
            }
            _ => loop {
                let t = random_unit(&mut rng, d);
                if prompts.iter().all(|q| dot(q, &t) < 0.8) {
                    break t;
                }
            },
        };
        prompts.push(t);
    }

    // Appearance directions: orthogonal to the own prompt, and the noiseless
    // vision prototype must keep its own prompt as the strict argmax among
    // the non-ambiguous alternatives.
    let weight = (1.0 - config.ocr_signal) * config.appearance;
    let mut appearance = Vec::with_capacity(m);
    for c in 0..m {
        let r = loop {
            let r = orthogonal_unit(&mut rng, &prompts[c]);
            let proto = unit(axpy(weight, &r, &prompts[c]));
            let own = dot(&proto, &prompts[c]);
            let ok = (0..m).filter(|&k| k != c && Some(k) != partner(c)).all(|k| dot(&proto, &prompts[k]) < own - 0.05);
            if ok {
                break r;
            }
        };
        appearance.push(r);
    }
    // Text and image of one element live in a shared embedding space: the
    // text prototype carries the same category cue as the appearance.
    let text_protos: Vec<Vec<f64>> = (0..m).map(|c| unit(axpy(1.0, &appearance[c], &prompts[c]))).collect();

    let names: Vec<String> = (0..m).map(category_name).collect();
    let categories = CategorySet::new(
        names
            .iter()
            .enumerate()
            .map(|(k, n)| (n.clone(), if k >= m - config.novel { Split::Novel } else { Split::Base }))
            .collect(),
    )?;

    let mut store = EmbeddingStore::new(d)?;
    store.insert(EMPTY_WORD_KEY, vec![0.0; d])?;
    for (n, t) in names.iter().zip(&prompts) {
        store.insert_f64(prompt_key(n), t)?;
    }

    let sample = |rng: &mut ChaCha8Rng, c: usize| -> (Vec<f64>, Option<Vec<f64>>) {
        let noise = gaussian(rng, d);
        let scale = config.vision_noise / sqrt(d as f64);
        let mut f = axpy(weight, &appearance[c], &prompts[c]);
        f = axpy(scale, &noise, &f);
        let f = unit(f);
        let has_text = rng.random::<f64>() >= config.empty_ocr;
        let z = random_unit(rng, d);
        let text = has_text.then(|| mix_text(&text_protos[c], &z, config.ocr_signal));
        (f, text)
    };

    let build_split = |prefix: &str, per_class: usize, rng: &mut ChaCha8Rng, store: &mut EmbeddingStore| -> Result<Vec<ScreenAnnotation>> {
        let mut labels: Vec<usize> = (0..m).flat_map(|c| core::iter::repeat_n(c, per_class)).collect();
        // deterministic interleave so every screen mixes categories
        for i in (1..labels.len()).rev() {
            let j = rng.random_range(0..=i);
            labels.swap(i, j);
        }
        let per_screen = config.elements_per_screen;
        let rows = per_screen.div_ceil(2);
        let height = (STATUS_BAR + 8.0 + rows as f64 * (ELEMENT_H + 16.0)) as u32;
        let mut screens = Vec::new();
        for (s, chunk) in labels.chunks(per_screen).enumerate() {
            let image_id = format!("{prefix}-{s:04}");
            let mut elements = Vec::with_capacity(chunk.len());
            let mut ocr = Vec::new();
            ocr.push(OcrItem {
                bbox: BBox::new(300.0, 4.0, 350.0, 20.0)?,
                text: String::from("12:30"),
                index: 0,
            });
            for (k, &c) in chunk.iter().enumerate() {
                let x = 12.0 + (k % 2) as f64 * (ELEMENT_W + 16.0);
                let y = STATUS_BAR + 8.0 + (k / 2) as f64 * (ELEMENT_H + 16.0);
                let bbox = BBox::new(x, y, x + ELEMENT_W, y + ELEMENT_H)?;
                let (f, text) = sample(rng, c);
                store.insert_f64(image_key(&image_id, k), &f)?;
                if let Some(t) = text {
                    let phrase = format!("{}-{image_id}-{k}", names[c]);
                    store.insert_f64(ocr_key(&phrase), &t)?;
                    // 40 × 32 box: a tenth of the element
                    ocr.push(OcrItem {
                        bbox: BBox::new(x + 8.0, y + 8.0, x + 48.0, y + 40.0)?,
                        text: phrase,
                        index: ocr.len(),
                    });
                }
                elements.push(ElementAnnotation { bbox, category: names[c].clone(), index: k });
            }
            screens.push(ScreenAnnotation { image_id, width: SCREEN_W, height, elements, ocr, links: None });
        }
        Ok(screens)
    };

    let train = build_split("train", config.n_train, &mut rng, &mut store)?;
    let val = build_split("val", config.n_val, &mut rng, &mut store)?;
    store.insert_f64(ocr_key("12:30"), &random_unit(&mut rng, d))?;

    Ok(SynthDataset { config: *config, store, train, val, categories, ambiguous_pairs })
}
