//! Language-targeted selection and editing of Gaussians.
//!
//! Each Gaussian's decoded feature is compared with every prompt embedding
//! by cosine similarity; a softmax over prompts gives `p(prompt | j)`. A
//! decaying threshold on the target's probability picks the selection with
//! the best separation margin.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{decode_gaussian, DistillError, FeatureDecoder, SyntheticEncoder};
use crate::parser::lexicon::Lexicons;
use crate::parser::EditVerb;
use crate::scene::{Gaussian3D, GaussianScene, ObjectKind, Vec3};

/// Extra prompt that soaks up probability for non-object Gaussians.
pub const BACKGROUND_PROMPT: &str = "background";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EditError {
    #[error("cosine similarity is undefined for a zero vector")]
    ZeroNorm,
    #[error("query set needs at least one prompt")]
    NoPrompts,
    #[error("target {0:?} is not part of the query set")]
    TargetNotQueried(String),
    #[error("no threshold selects any Gaussian for {target:?}")]
    EmptySelection { target: String },
    #[error("unknown color {0:?}")]
    UnknownColor(String),
    #[error("recolor needs a color")]
    MissingColor,
    #[error("invalid threshold configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Distill(#[from] DistillError),
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `f . q / (|f| |q|)`.
pub fn cosine_similarity(f: &[f64], q: &[f64]) -> Result<f64, EditError> {
    let (nf, nq) = (norm(f), norm(q));
    if nf == 0.0 || nq == 0.0 {
        return Err(EditError::ZeroNorm);
    }
    let d: f64 = f.iter().zip(q).map(|(a, b)| a * b).sum();
    Ok((d / (nf * nq)).clamp(-1.0, 1.0))
}

/// Cosine similarity between a Gaussian's decoded feature and `q`.
pub fn similarity(g: &Gaussian3D, decoder: &FeatureDecoder, q: &[f64]) -> Result<f64, EditError> {
    cosine_similarity(&decode_gaussian(decoder, g)?, q)
}

pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let mut out = scores.to_vec();
    crate::guidance::softmax_in_place(&mut out);
    out
}

/// Candidate prompts and their embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuerySet {
    pub prompts: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl QuerySet {
    pub fn new(prompts: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self, EditError> {
        if prompts.is_empty() || prompts.len() != embeddings.len() {
            return Err(EditError::NoPrompts);
        }
        if embeddings.iter().any(|e| norm(e) == 0.0) {
            return Err(EditError::ZeroNorm);
        }
        Ok(Self { prompts, embeddings })
    }

    /// `target` followed by `distractors` (duplicates dropped), embedded
    /// with `enc`.
    pub fn from_prompts<S: AsRef<str>>(
        target: &str,
        distractors: &[S],
        enc: &SyntheticEncoder,
    ) -> Result<Self, EditError> {
        let mut prompts = vec![target.to_string()];
        for d in distractors {
            let d = d.as_ref();
            if !prompts.iter().any(|p| p == d) {
                prompts.push(d.to_string());
            }
        }
        let embeddings = prompts.iter().map(|p| enc.embed_prompt(p)).collect();
        Self::new(prompts, embeddings)
    }

    /// Target plus every catalog tag and the background prompt.
    pub fn with_default_distractors(target: &str, enc: &SyntheticEncoder) -> Result<Self, EditError> {
        Self::from_prompts(target, &default_distractors(), enc)
    }

    pub fn index_of(&self, prompt: &str) -> Option<usize> {
        self.prompts.iter().position(|p| p == prompt)
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }
}

/// Catalog tags plus the background prompt.
pub fn default_distractors() -> Vec<String> {
    ObjectKind::ALL
        .iter()
        .map(|k| k.default_tag().to_string())
        .chain(std::iter::once(BACKGROUND_PROMPT.to_string()))
        .collect()
}

/// `p(prompt | j)` for every prompt, in query order.
pub fn prompt_probabilities(
    g: &Gaussian3D,
    decoder: &FeatureDecoder,
    queries: &QuerySet,
) -> Result<Vec<f64>, EditError> {
    let f = decode_gaussian(decoder, g)?;
    let s = queries
        .embeddings
        .iter()
        .map(|q| cosine_similarity(&f, q))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(softmax(&s))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// Mean target probability of the selection minus that of the rest.
    Margin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdConfig {
    pub initial: f64,
    pub decay: f64,
    pub min: f64,
    pub max_iters: usize,
    pub scoring: Scoring,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            initial: 0.9,
            decay: 0.9,
            min: 0.3,
            max_iters: 20,
            scoring: Scoring::Margin,
        }
    }
}

/// Scores one candidate selection. Implement this to delegate the choice to
/// an external judge.
pub trait ThresholdScorer {
    fn score(&self, threshold: f64, probabilities: &[f64], selected: &[usize]) -> f64;
}

impl ThresholdScorer for Scoring {
    fn score(&self, _threshold: f64, probabilities: &[f64], selected: &[usize]) -> f64 {
        match self {
            Scoring::Margin => margin_score(probabilities, selected),
        }
    }
}

/// `(mean p over selected - mean p over the rest) * [selection nonempty]`,
/// with an empty rest contributing zero.
pub fn margin_score(probabilities: &[f64], selected: &[usize]) -> f64 {
    if selected.is_empty() {
        return 0.0;
    }
    let sel_sum: f64 = selected.iter().map(|&j| probabilities[j]).sum();
    let total: f64 = probabilities.iter().sum();
    let rest = probabilities.len() - selected.len();
    let sel_mean = sel_sum / selected.len() as f64;
    let rest_mean = if rest == 0 {
        0.0
    } else {
        (total - sel_sum) / rest as f64
    };
    sel_mean - rest_mean
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTrial {
    pub threshold: f64,
    pub score: f64,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub target: String,
    /// `p(target | j)` per Gaussian.
    pub probabilities: Vec<f64>,
    pub threshold: f64,
    /// Ascending Gaussian indices with `p >= threshold`.
    pub selected: Vec<usize>,
    pub trace: Vec<ThresholdTrial>,
}

/// Threshold search on a probability vector.
pub fn search_thresholds(
    target: &str,
    probabilities: Vec<f64>,
    cfg: &ThresholdConfig,
    scorer: &dyn ThresholdScorer,
) -> Result<SelectionResult, EditError> {
    if !(cfg.decay > 0.0 && cfg.decay < 1.0) {
        return Err(EditError::Config("decay must lie in (0, 1)".into()));
    }
    if !(cfg.initial > 0.0) || cfg.min > cfg.initial {
        return Err(EditError::Config("need 0 < min <= initial".into()));
    }
    let mut trace = Vec::new();
    let mut best: Option<(f64, f64, Vec<usize>)> = None;
    let mut theta = cfg.initial;
    for _ in 0..cfg.max_iters {
        if theta < cfg.min {
            break;
        }
        let selected: Vec<usize> = (0..probabilities.len())
            .filter(|&j| probabilities[j] >= theta)
            .collect();
        let score = if selected.is_empty() {
            0.0
        } else {
            scorer.score(theta, &probabilities, &selected)
        };
        trace.push(ThresholdTrial {
            threshold: theta,
            score,
            selected: selected.len(),
        });
        if !selected.is_empty() && best.as_ref().is_none_or(|(_, s, _)| score > *s) {
            best = Some((theta, score, selected));
        }
        theta *= cfg.decay;
    }
    let (threshold, _, selected) = best.ok_or_else(|| EditError::EmptySelection {
        target: target.to_string(),
    })?;
    Ok(SelectionResult {
        target: target.to_string(),
        probabilities,
        threshold,
        selected,
        trace,
    })
}

/// Selects the Gaussians of `scene` that belong to `target`.
pub fn threshold_search(
    scene: &GaussianScene,
    decoder: &FeatureDecoder,
    queries: &QuerySet,
    target: &str,
    cfg: &ThresholdConfig,
) -> Result<SelectionResult, EditError> {
    threshold_search_with(scene, decoder, queries, target, cfg, &cfg.scoring)
}

pub fn threshold_search_with(
    scene: &GaussianScene,
    decoder: &FeatureDecoder,
    queries: &QuerySet,
    target: &str,
    cfg: &ThresholdConfig,
    scorer: &dyn ThresholdScorer,
) -> Result<SelectionResult, EditError> {
    let t = queries
        .index_of(target)
        .ok_or_else(|| EditError::TargetNotQueried(target.to_string()))?;
    let probabilities = scene
        .gaussians
        .iter()
        .map(|g| prompt_probabilities(g, decoder, queries).map(|p| p[t]))
        .collect::<Result<Vec<_>, _>>()?;
    search_thresholds(target, probabilities, cfg, scorer)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ColorSpec {
    Named(String),
    Rgb(Vec3),
}

/// Resolves a color name (synonyms allowed) to linear `[0, 1]` sRGB values.
pub fn named_color(name: &str) -> Result<Vec3, EditError> {
    let lex = Lexicons::builtin();
    let key = name.trim().to_lowercase();
    let canonical = lex.colors.get(&key).unwrap_or(&key);
    let hex = lex
        .color_values
        .get(canonical)
        .ok_or_else(|| EditError::UnknownColor(name.to_string()))?;
    let raw = hex.trim_start_matches('#');
    let bytes = hex::decode(raw).map_err(|_| EditError::UnknownColor(name.to_string()))?;
    if bytes.len() != 3 {
        return Err(EditError::UnknownColor(name.to_string()));
    }
    Ok([
        bytes[0] as f64 / 255.0,
        bytes[1] as f64 / 255.0,
        bytes[2] as f64 / 255.0,
    ])
}

impl ColorSpec {
    pub fn resolve(&self) -> Result<Vec3, EditError> {
        match self {
            ColorSpec::Named(n) => named_color(n),
            ColorSpec::Rgb(c) => {
                if c.iter().all(|v| (0.0..=1.0).contains(v)) {
                    Ok(*c)
                } else {
                    Err(EditError::UnknownColor(format!("{c:?}")))
                }
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EditParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<ColorSpec>,
}

/// Applies an edit to the selected Gaussians. The scaffold is shared, so the
/// edit holds in every frame.
pub fn apply_edit(
    scene: &GaussianScene,
    selection: &[usize],
    verb: EditVerb,
    params: &EditParams,
) -> Result<GaussianScene, EditError> {
    if selection.is_empty() {
        return Err(EditError::EmptySelection {
            target: String::new(),
        });
    }
    let mut chosen = vec![false; scene.len()];
    for &j in selection {
        if let Some(c) = chosen.get_mut(j) {
            *c = true;
        }
    }
    let gaussians = match verb {
        EditVerb::Recolor => {
            let color = params.color.as_ref().ok_or(EditError::MissingColor)?.resolve()?;
            scene
                .gaussians
                .iter()
                .zip(&chosen)
                .map(|(g, &c)| if c { Gaussian3D { color, ..g.clone() } } else { g.clone() })
                .collect()
        }
        EditVerb::Remove => keep(scene, &chosen, false),
        EditVerb::Extract => keep(scene, &chosen, true),
    };
    Ok(scene.with_gaussians(gaussians))
}

fn keep(scene: &GaussianScene, chosen: &[bool], keep_chosen: bool) -> Vec<Gaussian3D> {
    scene
        .gaussians
        .iter()
        .zip(chosen)
        .filter(|(_, &c)| c == keep_chosen)
        .map(|(g, _)| g.clone())
        .collect()
}

/// Audit record written next to edit renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditManifest {
    pub verb: EditVerb,
    pub target: String,
    pub threshold_trace: Vec<ThresholdTrial>,
    pub chosen_threshold: f64,
    pub selected_count: usize,
    pub params: EditParams,
}

impl EditManifest {
    pub fn new(verb: EditVerb, selection: &SelectionResult, params: EditParams) -> Self {
        Self {
            verb,
            target: selection.target.clone(),
            threshold_trace: selection.trace.clone(),
            chosen_threshold: selection.threshold,
            selected_count: selection.selected.len(),
            params,
        }
    }
}
