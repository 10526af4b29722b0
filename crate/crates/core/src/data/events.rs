//! Codebook-driven derivation of the PAIN and SRE indicators from raw event
//! streams observed between diagnosis and treatment.

use super::{Event, EventKind};
use chrono::Datelike;
use serde::{Deserialize, Serialize};

/// Code sets for the two derived morbidity indicators.
///
/// PAIN requires co-prescription of opiates (ATC N02AA), Tramadol (N02AX02)
/// and Paracetamol (N02BE01) within a 90-day window. SRE is any inpatient
/// stay for a pathologic fracture or spinal cord compression.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Codebook {
    pub pain_atc: Vec<String>,
    pub sre_icd: Vec<String>,
    pub window_days: i64,
}

impl Default for Codebook {
    fn default() -> Self {
        Codebook {
            pain_atc: ["N02AA", "N02AX02", "N02BE01"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            sre_icd: [
                "M485", "M495", "M844", "M907", "G550", "G834", "G952", "G958", "G959", "G992",
            ]
            .iter()
            .map(|s| s.to_string())
            .collect(),
            window_days: 90,
        }
    }
}

impl Codebook {
    pub fn is_valid(&self) -> bool {
        let ok = |codes: &[String]| {
            !codes.is_empty()
                && codes
                    .iter()
                    .all(|c| !c.is_empty() && c.chars().all(|ch| ch.is_ascii_uppercase() || ch.is_ascii_digit()))
        };
        ok(&self.pain_atc) && ok(&self.sre_icd) && self.window_days > 0
    }
}

/// 1 iff some sliding window of `window_days` contains at least one
/// prescription from each of the three ATC groups.
pub fn flag_pain(events: &[Event], codebook: &Codebook) -> u8 {
    let groups: Vec<Vec<i64>> = codebook
        .pain_atc
        .iter()
        .map(|prefix| {
            events
                .iter()
                .filter(|e| e.kind == EventKind::Prescription && e.code.starts_with(prefix.as_str()))
                .map(|e| e.date.num_days_from_ce() as i64)
                .collect()
        })
        .collect();
    if groups.iter().any(|g| g.is_empty()) {
        return 0;
    }
    // A window anchored at each group-event date suffices: if some window
    // covers one event per group, so does the window starting at the
    // earliest of those events.
    for g in &groups {
        for &start in g {
            let end = start + codebook.window_days;
            if groups
                .iter()
                .all(|h| h.iter().any(|&d| d >= start && d <= end))
            {
                return 1;
            }
        }
    }
    0
}

/// 1 iff any inpatient event code is in the SRE ICD set.
pub fn flag_sre(events: &[Event], codebook: &Codebook) -> u8 {
    let hit = events.iter().any(|e| {
        e.kind == EventKind::Inpatient && codebook.sre_icd.iter().any(|c| c == &e.code)
    });
    hit as u8
}
