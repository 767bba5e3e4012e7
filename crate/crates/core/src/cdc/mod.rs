//! Cache-enabled dynamic codebook: per-slot caches of previously sent
//! semantic vectors, cosine matching, latent reduction and restoration,
//! SNR-aware upgrades and priority eviction.
//!
//! Transmitter and receiver each own a [`SemanticCache`]. The transmitter
//! decides every mutation; the receiver replays the same sequence of
//! [`SemanticCache::touch`], [`SemanticCache::upgrade_at`] and
//! [`SemanticCache::insert`] calls, so both stay structurally identical while
//! their stored vectors differ by channel noise.

pub mod thresholds;

use serde::{Deserialize, Serialize};

use crate::channel::ReceivedIndex;
use crate::error::{ensure_len, Error, Result};
use crate::generator::LatentCode;
use crate::numerics::RngStream;
use crate::objective::metrics::cosine_unchecked;

pub use thresholds::{load_thresholds, parse_thresholds, GAMMA_A, GAMMA_B, SLOT_LABELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub vector: Vec<f64>,
    /// SNR in dB of the transmission that produced this version.
    pub snr_tag: f64,
    pub last_access: u64,
}

/// Cache parameters shared by both ends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CacheConfig {
    /// Entries per slot, `N_C`.
    pub capacity: usize,
    /// Weight of the SNR term in the eviction score.
    pub alpha: f64,
    /// dB range mapped onto `[0, 1]` for the eviction score.
    pub snr_range: (f64, f64),
    /// Threshold spec understood by [`load_thresholds`].
    pub thresholds: String,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity: 50,
            alpha: 0.5,
            snr_range: (0.0, 5.0),
            thresholds: "uniform:0.9".into(),
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<()> {
        if self.capacity == 0 {
            return Err(Error::config("cache capacity must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha must lie in [0, 1]"));
        }
        let (lo, hi) = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(Error::config("SNR range must be finite with min < max"));
        }
        Ok(())
    }

    pub fn build(&self, num_slots: usize, latent_len: usize) -> Result<SemanticCache> {
        let gammas = load_thresholds(&self.thresholds, Some(num_slots))?;
        SemanticCache::new(num_slots, latent_len, self, gammas)
    }
}

/// What [`SemanticCache::cache_store`] did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StoreOutcome {
    Inserted {
        position: usize,
        evicted: Option<usize>,
    },
    Upgraded {
        position: usize,
    },
    /// A match with a better SNR tag exists; only its timestamp moved.
    RefreshedSkip {
        position: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemanticCache {
    num_slots: usize,
    latent_len: usize,
    capacity: usize,
    alpha: f64,
    snr_range: (f64, f64),
    thresholds: Vec<f64>,
    clock: u64,
    slots: Vec<Vec<CacheEntry>>,
}

/// Outcome of matching a latent against a cache.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReductionResult {
    pub num_slots: usize,
    pub latent_len: usize,
    pub capacity: usize,
    pub hit_mask: Vec<bool>,
    /// Matched cache position of every hit slot.
    pub hit_positions: Vec<Option<usize>>,
    /// Best similarity per slot; `None` for an empty slot.
    pub similarities: Vec<Option<f64>>,
    /// Slots sent as analog vectors because they missed, in slot order.
    pub kept_slots: Vec<usize>,
    /// The kept vectors, concatenated.
    pub reduced_vectors: Vec<f64>,
    /// Hit slots whose cached copy is refreshed with a fresh analog vector.
    pub upgrade_slots: Vec<usize>,
    /// Flat indices `slot·N_C + position` of all hits, in slot order.
    pub indices_sent: Vec<usize>,
}

impl ReductionResult {
    /// `n_s = N_S − hits`.
    pub fn n_s(&self) -> usize {
        self.kept_slots.len()
    }

    pub fn hits(&self) -> usize {
        self.indices_sent.len()
    }

    pub fn is_upgrade(&self, slot: usize) -> bool {
        self.upgrade_slots.contains(&slot)
    }

    /// Slots carried by the analog signal: misses plus upgrades, in slot order.
    pub fn analog_slots(&self) -> Vec<usize> {
        (0..self.num_slots)
            .filter(|&i| !self.hit_mask[i] || self.is_upgrade(i))
            .collect()
    }

    /// Slot whose index sits at `k` in [`Self::indices_sent`].
    pub fn index_slots(&self) -> Vec<usize> {
        (0..self.num_slots).filter(|&i| self.hit_mask[i]).collect()
    }

    /// Hit slots whose value comes from the cache, not the analog signal.
    pub fn frozen_mask(&self) -> Vec<bool> {
        (0..self.num_slots)
            .map(|i| self.hit_mask[i] && !self.is_upgrade(i))
            .collect()
    }
}

/// Latent rebuilt at the receiver, with fallback bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct Restored {
    pub latent: LatentCode,
    pub fallback_slots: Vec<usize>,
    /// Fallback slots with nothing cached; they hold zeros.
    pub empty_fallback_slots: Vec<usize>,
}

impl SemanticCache {
    pub fn new(num_slots: usize, latent_len: usize, cfg: &CacheConfig, thresholds: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if num_slots == 0 || latent_len == 0 {
            return Err(Error::config("cache dimensions must be positive"));
        }
        if thresholds.len() != num_slots {
            return Err(Error::config(format!(
                "{} thresholds for {} slots",
                thresholds.len(),
                num_slots
            )));
        }
        if let Some(g) = thresholds.iter().find(|g| !(0.0..=1.0).contains(*g)) {
            return Err(Error::config(format!("threshold {g} outside [0, 1]")));
        }
        Ok(Self {
            num_slots,
            latent_len,
            capacity: cfg.capacity,
            alpha: cfg.alpha,
            snr_range: cfg.snr_range,
            thresholds,
            clock: 0,
            slots: vec![Vec::new(); num_slots],
        })
    }

    pub fn num_slots(&self) -> usize {
        self.num_slots
    }

    pub fn latent_len(&self) -> usize {
        self.latent_len
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn snr_range(&self) -> (f64, f64) {
        self.snr_range
    }

    pub fn thresholds(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn clock(&self) -> u64 {
        self.clock
    }

    pub fn slot(&self, slot: usize) -> &[CacheEntry] {
        &self.slots[slot]
    }

    pub fn len(&self) -> usize {
        self.slots.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Equal occupancy, positions, tags and timestamps; vectors ignored.
    pub fn structurally_equal(&self, other: &SemanticCache) -> bool {
        self.clock == other.clock
            && self.slots.len() == other.slots.len()
            && self.slots.iter().zip(&other.slots).all(|(a, b)| {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|(x, y)| x.snr_tag == y.snr_tag && x.last_access == y.last_access)
            })
    }

    fn check_slot(&self, slot: usize) -> Result<()> {
        if slot >= self.num_slots {
            return Err(Error::contract(format!(
                "slot {slot} out of range (N_S = {})",
                self.num_slots
            )));
        }
        Ok(())
    }

    fn tick(&mut self) -> u64 {
        self.clock += 1;
        self.clock
    }

    /// Best cosine match in `slot`, lowest position on ties.
    pub fn cache_match(&self, slot: usize, query: &[f64]) -> Result<Option<(usize, f64)>> {
        self.check_slot(slot)?;
        ensure_len("query vector", query.len(), self.latent_len)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in self.slots[slot].iter().enumerate() {
            let s = cosine_unchecked(query, &e.vector);
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((j, s));
            }
        }
        Ok(best)
    }

    /// Hit test with the inclusive boundary `similarity ≥ γ`.
    pub fn is_hit(&self, slot: usize, similarity: f64) -> bool {
        similarity >= self.thresholds[slot]
    }

    /// Dry-run reduction; the cache is not modified. With `current_snr`,
    /// hits whose stored tag is at most the current SNR become upgrades.
    pub fn plan_reduction(&self, latent: &LatentCode, current_snr: Option<f64>) -> Result<ReductionResult> {
        self.check_latent(latent)?;
        let n = self.num_slots;
        let mut r = ReductionResult {
            num_slots: n,
            latent_len: self.latent_len,
            capacity: self.capacity,
            hit_mask: vec![false; n],
            hit_positions: vec![None; n],
            similarities: vec![None; n],
            kept_slots: Vec::new(),
            reduced_vectors: Vec::new(),
            upgrade_slots: Vec::new(),
            indices_sent: Vec::new(),
        };
        for i in 0..n {
            let m = self.cache_match(i, latent.slot(i))?;
            r.similarities[i] = m.map(|(_, s)| s);
            match m {
                Some((j, s)) if self.is_hit(i, s) => {
                    r.hit_mask[i] = true;
                    r.hit_positions[i] = Some(j);
                    r.indices_sent.push(i * self.capacity + j);
                    if current_snr.is_some_and(|snr| snr >= self.slots[i][j].snr_tag) {
                        r.upgrade_slots.push(i);
                    }
                }
                _ => {
                    r.kept_slots.push(i);
                    r.reduced_vectors.extend_from_slice(latent.slot(i));
                }
            }
        }
        Ok(r)
    }

    /// Matches `latent` and refreshes the timestamps of hit entries.
    pub fn cache_reduce(&mut self, latent: &LatentCode) -> Result<ReductionResult> {
        let r = self.plan_reduction(latent, None)?;
        for (i, j) in r.hit_positions.iter().enumerate() {
            if let Some(j) = j {
                self.touch(i, *j)?;
            }
        }
        Ok(r)
    }

    fn check_latent(&self, latent: &LatentCode) -> Result<()> {
        if latent.num_slots() != self.num_slots || latent.latent_len() != self.latent_len {
            return Err(Error::contract(format!(
                "latent is {}x{}, cache is {}x{}",
                latent.num_slots(),
                latent.latent_len(),
                self.num_slots,
                self.latent_len
            )));
        }
        Ok(())
    }

    fn check_entry(&self, slot: usize, position: usize) -> Result<()> {
        self.check_slot(slot)?;
        if position >= self.slots[slot].len() {
            return Err(Error::contract(format!(
                "position {position} empty in slot {slot} ({} entries)",
                self.slots[slot].len()
            )));
        }
        Ok(())
    }

    /// Marks an entry as used now.
    pub fn touch(&mut self, slot: usize, position: usize) -> Result<()> {
        self.check_entry(slot, position)?;
        let t = self.tick();
        self.slots[slot][position].last_access = t;
        Ok(())
    }

    /// Replaces an entry in place with a fresher version.
    pub fn upgrade_at(&mut self, slot: usize, position: usize, vector: &[f64], snr_db: f64) -> Result<()> {
        self.check_entry(slot, position)?;
        ensure_len("cached vector", vector.len(), self.latent_len)?;
        check_tag(snr_db)?;
        let t = self.tick();
        let e = &mut self.slots[slot][position];
        e.vector.copy_from_slice(vector);
        e.snr_tag = snr_db;
        e.last_access = t;
        Ok(())
    }

    /// Appends a new entry, evicting first when the slot is full. Returns
    /// the new position and the evicted one.
    pub fn insert(&mut self, slot: usize, vector: &[f64], snr_db: f64) -> Result<(usize, Option<usize>)> {
        self.check_slot(slot)?;
        ensure_len("cached vector", vector.len(), self.latent_len)?;
        check_tag(snr_db)?;
        let evicted = if self.slots[slot].len() >= self.capacity {
            Some(self.evict_lowest_priority(slot)?)
        } else {
            None
        };
        let t = self.tick();
        self.slots[slot].push(CacheEntry {
            vector: vector.to_vec(),
            snr_tag: snr_db,
            last_access: t,
        });
        Ok((self.slots[slot].len() - 1, evicted))
    }

    /// Stores `vector`: upgrade a matching entry if `snr_db` is at least its
    /// tag, otherwise just refresh it; insert when nothing matches.
    pub fn cache_store(&mut self, slot: usize, vector: &[f64], snr_db: f64) -> Result<StoreOutcome> {
        check_tag(snr_db)?;
        match self.cache_match(slot, vector)? {
            Some((j, s)) if self.is_hit(slot, s) => {
                if snr_db >= self.slots[slot][j].snr_tag {
                    self.upgrade_at(slot, j, vector, snr_db)?;
                    Ok(StoreOutcome::Upgraded { position: j })
                } else {
                    self.touch(slot, j)?;
                    Ok(StoreOutcome::RefreshedSkip { position: j })
                }
            }
            _ => {
                let (position, evicted) = self.insert(slot, vector, snr_db)?;
                Ok(StoreOutcome::Inserted { position, evicted })
            }
        }
    }

    /// Eviction score `α·snr_norm + (1−α)·t_norm`; lower leaves first.
    pub fn priority(&self, entry: &CacheEntry) -> f64 {
        let (lo, hi) = self.snr_range;
        let snr_norm = ((entry.snr_tag - lo) / (hi - lo)).clamp(0.0, 1.0);
        let t_norm = if self.clock == 0 {
            0.0
        } else {
            entry.last_access as f64 / self.clock as f64
        };
        self.alpha * snr_norm + (1.0 - self.alpha) * t_norm
    }

    /// Removes the minimum-priority entry of `slot` (lowest position on ties).
    pub fn evict_lowest_priority(&mut self, slot: usize) -> Result<usize> {
        self.check_slot(slot)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in self.slots[slot].iter().enumerate() {
            let p = self.priority(e);
            if best.is_none_or(|(_, b)| p < b) {
                best = Some((j, p));
            }
        }
        let (j, _) = best.ok_or_else(|| Error::contract(format!("cannot evict from empty slot {slot}")))?;
        self.slots[slot].remove(j);
        Ok(j)
    }

    /// Decodes a received index for `slot`; `None` when it is corrupted,
    /// belongs to another slot or points at an empty position.
    pub fn decode_index(&self, slot: usize, index: &ReceivedIndex) -> Option<usize> {
        if index.corrupted || index.value / self.capacity != slot {
            return None;
        }
        let j = index.value % self.capacity;
        (j < self.slots[slot].len()).then_some(j)
    }

    /// Rebuilds the full latent from the analog vectors (`analog_vectors`
    /// holds the slots of [`ReductionResult::analog_slots`], concatenated) and
    /// the received indices, one per [`ReductionResult::index_slots`] entry.
    /// Undecodable indices fall back to a random entry of the same slot.
    pub fn cache_restore(
        &self,
        reduction: &ReductionResult,
        analog_vectors: &[f64],
        received_indices: &[ReceivedIndex],
        rng: &mut RngStream,
    ) -> Result<Restored> {
        if reduction.num_slots != self.num_slots
            || reduction.latent_len != self.latent_len
            || reduction.capacity != self.capacity
        {
            return Err(Error::contract("reduction metadata does not match this cache"));
        }
        let analog = reduction.analog_slots();
        let index_slots = reduction.index_slots();
        ensure_len("analog vectors", analog_vectors.len(), analog.len() * self.latent_len)?;
        ensure_len("received indices", received_indices.len(), index_slots.len())?;

        let nl = self.latent_len;
        let mut latent = LatentCode::zeros(self.num_slots, nl)?;
        for (k, &i) in analog.iter().enumerate() {
            latent
                .slot_mut(i)
                .copy_from_slice(&analog_vectors[k * nl..(k + 1) * nl]);
        }
        let mut fallback_slots = Vec::new();
        let mut empty_fallback_slots = Vec::new();
        for (&i, idx) in index_slots.iter().zip(received_indices) {
            if reduction.is_upgrade(i) {
                continue;
            }
            match self.decode_index(i, idx) {
                Some(j) => latent.slot_mut(i).copy_from_slice(&self.slots[i][j].vector),
                None => {
                    fallback_slots.push(i);
                    if self.slots[i].is_empty() {
                        empty_fallback_slots.push(i);
                    } else {
                        let j = rng.below(self.slots[i].len());
                        latent.slot_mut(i).copy_from_slice(&self.slots[i][j].vector);
                    }
                }
            }
        }
        Ok(Restored {
            latent,
            fallback_slots,
            empty_fallback_slots,
        })
    }
}

fn check_tag(snr_db: f64) -> Result<()> {
    if !snr_db.is_finite() {
        return Err(Error::contract("SNR tag must be finite"));
    }
    Ok(())
}
