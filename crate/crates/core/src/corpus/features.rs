//! Hashed lexical features.
//!
//! Each token becomes a dense vector of `dim` buckets filled by hashing its
//! lowercased form, the lowercased forms in a `±window` context, 3-character
//! prefix and suffix, and capitalization and digit flags. Vectors are
//! L2-normalized, so squared distances between tokens lie in `[0, 2]`.

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use super::{Corpus, Token};
use crate::error::{Error, Result};

pub const MIN_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeaturizerConfig {
    pub dim: usize,
    pub window: usize,
}

impl Default for FeaturizerConfig {
    fn default() -> Self {
        FeaturizerConfig {
            dim: 512,
            window: 1,
        }
    }
}

impl FeaturizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < MIN_DIM {
            return Err(Error::Config(format!(
                "feature dimension must be at least {MIN_DIM}, got {}",
                self.dim
            )));
        }
        Ok(())
    }
}

fn bucket(feature: &str, dim: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(feature.as_bytes());
    (h.finish() % dim as u64) as usize
}

fn token_features(lower: &[String], surfaces: &[&str], t: usize, window: usize) -> Vec<String> {
    let word = &lower[t];
    let mut feats = vec![format!("w={word}")];
    let m = lower.len() as isize;
    for off in -(window as isize)..=(window as isize) {
        if off == 0 {
            continue;
        }
        let pos = t as isize + off;
        let ctx = if pos < 0 {
            "<s>"
        } else if pos >= m {
            "</s>"
        } else {
            lower[pos as usize].as_str()
        };
        feats.push(format!("w[{off}]={ctx}"));
    }
    let chars: Vec<char> = word.chars().collect();
    let prefix: String = chars.iter().take(3).collect();
    let suffix: String = chars[chars.len().saturating_sub(3)..].iter().collect();
    feats.push(format!("p3={prefix}"));
    feats.push(format!("s3={suffix}"));
    if surfaces[t].chars().next().is_some_and(char::is_uppercase) {
        feats.push("cap".into());
    }
    if surfaces[t].chars().any(|c| c.is_ascii_digit()) {
        feats.push("digit".into());
    }
    feats
}

/// Feature vectors for one sequence of surface forms.
pub fn featurize_sequence(surfaces: &[&str], config: &FeaturizerConfig) -> Result<Vec<Vec<f64>>> {
    config.validate()?;
    let lower: Vec<String> = surfaces.iter().map(|s| s.to_lowercase()).collect();
    let out = (0..surfaces.len())
        .map(|t| {
            let mut v = vec![0.0; config.dim];
            for f in token_features(&lower, surfaces, t, config.window) {
                v[bucket(&f, config.dim)] += 1.0;
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            v
        })
        .collect();
    Ok(out)
}

/// Returns a copy of `corpus` whose tokens carry feature vectors.
pub fn featurize(corpus: &Corpus, config: &FeaturizerConfig) -> Result<Corpus> {
    config.validate()?;
    let mut out = corpus.clone();
    for seq in &mut out.sequences {
        let surfaces: Vec<&str> = corpus_surfaces(&seq.tokens);
        let feats = featurize_sequence(&surfaces, config)?;
        for (tok, f) in seq.tokens.iter_mut().zip(feats) {
            tok.features = f;
        }
    }
    out.feature_dim = config.dim;
    Ok(out)
}

fn corpus_surfaces(tokens: &[Token]) -> Vec<&str> {
    tokens.iter().map(|t| t.surface.as_str()).collect()
}
