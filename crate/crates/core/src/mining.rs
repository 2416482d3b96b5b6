//! Pseudo-triplet mining from image-caption pairs.
//!
//! Each caption's subject phrase is replaced by pseudo slots, giving a
//! template that describes the rest of the scene; the caption itself is the
//! target and its two nearest neighbouring captions are complements.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::encoders::{inject_span, TokenSequence, PSEUDO_ROWS};
use crate::store::{FlatIndex, KnowledgeRecord};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoTriplet {
    pub image_id: usize,
    pub template: TokenSequence,
    /// Caption id of the pair itself.
    pub target: usize,
    pub complements: [usize; 2],
}

impl PseudoTriplet {
    pub fn validate(&self) -> Result<()> {
        let [a, b] = self.complements;
        if a == b || a == self.target || b == self.target {
            return Err(Error::Mining(format!(
                "triplet for image {} has complements {:?} with target {}",
                self.image_id, self.complements, self.target
            )));
        }
        if self.template.slot_count() != PSEUDO_ROWS {
            return Err(Error::Mining(format!(
                "triplet for image {} has {} pseudo slots",
                self.image_id,
                self.template.slot_count()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MiningReport {
    pub triplets: Vec<PseudoTriplet>,
    /// Records without a subject span.
    pub skipped: usize,
}

/// The two captions closest to `caption_id`, excluding itself.
pub fn find_complements(caption_id: usize, captions: &FlatIndex) -> Result<(usize, usize)> {
    let matrix = captions.matrix();
    let query = matrix.row(caption_id).ok_or(Error::Lookup {
        what: "caption",
        id: caption_id,
    })?;
    if captions.len() < 3 {
        return Err(Error::Mining(format!(
            "complements need at least 2 other captions, corpus has {}",
            captions.len()
        )));
    }
    let hits = captions.search_filtered(query, 2, |id| id != caption_id)?;
    Ok((hits[0].id, hits[1].id))
}

/// One triplet per record that has a subject span.
///
/// Record ids index both the image bank and `captions`.
pub fn mine(records: &[KnowledgeRecord], captions: &FlatIndex) -> Result<MiningReport> {
    if captions.len() < 3 {
        return Err(Error::Mining(format!("corpus of {} captions is too small", captions.len())));
    }
    let mut report = MiningReport::default();
    for rec in records {
        if rec.subject_span.is_none() {
            report.skipped += 1;
            continue;
        }
        rec.validate()?;
        let template = inject_span(rec, PSEUDO_ROWS)?;
        let (a, b) = find_complements(rec.id, captions)?;
        report.triplets.push(PseudoTriplet {
            image_id: rec.id,
            template,
            target: rec.id,
            complements: [a, b],
        });
    }
    Ok(report)
}
