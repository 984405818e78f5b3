//! Bimodal instances and their missing-modality patterns.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reserved token used to pad text sequences to a fixed length.
pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Text => "text",
            Modality::Image => "image",
        })
    }
}

/// Which modalities an instance carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MissingPattern {
    Full,
    TextMissing,
    ImageMissing,
}

impl MissingPattern {
    pub fn is_missing(self, modality: Modality) -> bool {
        matches!(
            (self, modality),
            (MissingPattern::TextMissing, Modality::Text) | (MissingPattern::ImageMissing, Modality::Image)
        )
    }
}

/// One bimodal sample. Text is a fixed-length token sequence, the image a
/// fixed `m × patch_dim` grid of raw patch features.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub id: u64,
    text: Option<Vec<u32>>,
    image: Option<Tensor>,
    pub label: usize,
}

impl Instance {
    pub fn new(id: u64, text: Option<Vec<u32>>, image: Option<Tensor>, label: usize) -> Result<Self> {
        if text.is_none() && image.is_none() {
            return Err(Error::Precondition(format!("instance {id} has no modality")));
        }
        Ok(Self { id, text, image, label })
    }

    pub fn text(&self) -> Option<&[u32]> {
        self.text.as_deref()
    }

    pub fn image(&self) -> Option<&Tensor> {
        self.image.as_ref()
    }

    pub fn has(&self, modality: Modality) -> bool {
        match modality {
            Modality::Text => self.text.is_some(),
            Modality::Image => self.image.is_some(),
        }
    }

    pub fn mask(&self) -> MissingPattern {
        match (self.text.is_some(), self.image.is_some()) {
            (true, true) => MissingPattern::Full,
            (false, _) => MissingPattern::TextMissing,
            (true, false) => MissingPattern::ImageMissing,
        }
    }

    /// Removes a modality; the remaining one must stay present.
    pub fn drop_modality(&mut self, modality: Modality) -> Result<()> {
        let other_present = match modality {
            Modality::Text => self.image.is_some(),
            Modality::Image => self.text.is_some(),
        };
        if !other_present {
            return Err(Error::Precondition(format!(
                "instance {} cannot lose its only modality",
                self.id
            )));
        }
        match modality {
            Modality::Text => self.text = None,
            Modality::Image => self.image = None,
        }
        Ok(())
    }
}

/// Pads with [`PAD_TOKEN`] or truncates to exactly `n` tokens.
pub fn pad_or_truncate(tokens: &[u32], n: usize) -> Vec<u32> {
    let mut out: Vec<u32> = tokens.iter().copied().take(n).collect();
    out.resize(n, PAD_TOKEN);
    out
}

#[derive(Deserialize)]
struct RawInstance {
    id: u64,
    #[serde(default)]
    text: Option<Vec<u32>>,
    #[serde(default)]
    image: Option<Vec<Vec<f64>>>,
    label: usize,
}

/// Reads one JSON object per line:
/// `{"id": 3, "text": [5, 9, ...], "image": [[0.1, ...], ...], "label": 1}`.
/// Text is padded or truncated to `n` tokens; `text` or `image` may be absent.
pub fn read_instances_jsonl(text: &str, n: usize) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawInstance = serde_json::from_str(line).map_err(|e| Error::Format {
            offset: start,
            reason: e.to_string(),
        })?;
        let image = match raw.image {
            Some(rows) => Some(Tensor::from_rows(&rows).map_err(|e| Error::Format {
                offset: start,
                reason: e.to_string(),
            })?),
            None => None,
        };
        let tokens = raw.text.map(|t| pad_or_truncate(&t, n));
        out.push(Instance::new(raw.id, tokens, image, raw.label)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_follows_presence() {
        let img = Tensor::zeros(&[2, 3]);
        let full = Instance::new(1, Some(vec![1, 2]), Some(img.clone()), 0).unwrap();
        assert_eq!(full.mask(), MissingPattern::Full);
        let mut t = full.clone();
        t.drop_modality(Modality::Text).unwrap();
        assert_eq!(t.mask(), MissingPattern::TextMissing);
        assert!(t.text().is_none());
        assert!(t.drop_modality(Modality::Image).is_err());
        assert!(Instance::new(2, None, None, 0).is_err());
    }

    #[test]
    fn jsonl_reader() {
        let text = "{\"id\": 4, \"text\": [3, 1], \"image\": [[0.5, 1.0]], \"label\": 1}\n\n{\"id\": 5, \"text\": [2], \"label\": 0}\n";
        let got = read_instances_jsonl(text, 3).unwrap();
        assert_eq!(got.len(), 2);
        assert_eq!(got[0].text().unwrap(), &[3, 1, 0]);
        assert_eq!(got[0].image().unwrap().shape(), &[1, 2]);
        assert_eq!(got[1].mask(), MissingPattern::ImageMissing);
        let err = read_instances_jsonl("{\"id\": 1}\n", 3).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }));
    }

    #[test]
    fn padding() {
        assert_eq!(pad_or_truncate(&[5, 6], 4), vec![5, 6, 0, 0]);
        assert_eq!(pad_or_truncate(&[5, 6, 7], 2), vec![5, 6]);
    }
}
