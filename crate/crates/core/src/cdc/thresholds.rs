//! Per-slot hit thresholds.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

/// Built-in 28-slot table, set A.
pub const GAMMA_A: [f64; 28] = [
    0.90, 0.95, 0.80, 0.80, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95, 0.90, 0.90, 0.85, 0.85, 0.90, 0.90, 0.90,
    0.90, 0.80, 0.80, 0.80, 0.10, 0.50, 0.10, 0.80, 0.10,
];

/// Built-in 28-slot table, set B.
pub const GAMMA_B: [f64; 28] = [
    0.85, 0.85, 0.80, 0.80, 0.92, 0.92, 0.92, 0.92, 0.92, 0.92, 0.92, 0.92, 0.85, 0.80, 0.80, 0.80, 0.85, 0.85, 0.85,
    0.85, 0.75, 0.75, 0.75, 0.10, 0.50, 0.10, 0.75, 0.10,
];

/// Semantic labels of the 28 built-in slots.
pub const SLOT_LABELS: [&str; 28] = [
    "Coarse Profile 1",
    "Coarse Profile 2",
    "Background 1",
    "Background 2",
    "Face Shape",
    "Face Texture",
    "Eye Shape",
    "Eye Texture",
    "Eyebrow Shape",
    "Eyebrow Texture",
    "Mouth Shape",
    "Mouth Texture",
    "Nose Shape",
    "Nose Texture",
    "Ear Shape",
    "Ear Texture",
    "Hair Shape",
    "Hair Texture",
    "Neck Shape",
    "Neck Texture",
    "Cloth Shape",
    "Cloth Texture",
    "Glass",
    "Unknown 1",
    "Hat",
    "Unknown 2",
    "Earring",
    "Unknown 3",
];

/// Resolves a threshold spec: `gamma_A`, `gamma_B`, `uniform:<v>` (needs
/// `num_slots`), or a path to a file of `slot=value` lines.
pub fn load_thresholds(spec: &str, num_slots: Option<usize>) -> Result<Vec<f64>> {
    match spec {
        "gamma_A" => Ok(GAMMA_A.to_vec()),
        "gamma_B" => Ok(GAMMA_B.to_vec()),
        _ => {
            if let Some(v) = spec.strip_prefix("uniform:") {
                let n = num_slots.ok_or_else(|| Error::config("uniform thresholds need a slot count"))?;
                let g: f64 = v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("bad uniform threshold {v:?}")))?;
                check_gamma(0, g)?;
                return Ok(vec![g; n]);
            }
            let path = Path::new(spec);
            if !path.is_file() {
                return Err(Error::config(format!(
                    "unknown threshold set {spec:?}; expected gamma_A, gamma_B, uniform:<v> or a file"
                )));
            }
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_thresholds(&text)
        }
    }
}

/// Parses `slot=value` lines; blank lines and `#` comments are skipped.
/// Slots must cover `0..n` exactly once.
pub fn parse_thresholds(text: &str) -> Result<Vec<f64>> {
    let mut table = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = || {
            Error::config(format!(
                "threshold line {}: expected slot=value, got {raw:?}",
                lineno + 1
            ))
        };
        let (k, v) = line.split_once('=').ok_or_else(bad)?;
        let slot: usize = k.trim().parse().map_err(|_| bad())?;
        let g: f64 = v.trim().parse().map_err(|_| bad())?;
        check_gamma(slot, g)?;
        if table.insert(slot, g).is_some() {
            return Err(Error::config(format!("threshold for slot {slot} given twice")));
        }
    }
    if table.is_empty() {
        return Err(Error::config("threshold file has no entries"));
    }
    let n = table.len();
    if table.keys().last() != Some(&(n - 1)) {
        return Err(Error::config(format!("threshold slots must be 0..{n} without gaps")));
    }
    Ok(table.into_values().collect())
}

fn check_gamma(slot: usize, g: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&g) {
        return Err(Error::config(format!("threshold {g} for slot {slot} outside [0, 1]")));
    }
    Ok(())
}
