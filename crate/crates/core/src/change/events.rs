//! Appearance and disappearance events on a semantic mask.
//!
//! Appearance copies a small instance's footprint, translated, into a
//! region of a single other class. Disappearance relabels a small instance
//! to a class sampled from its outer boundary.

use std::collections::{BTreeMap, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::instances::{extract_instances, neighbours, Instance};
use super::{ChangeError, SemanticMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    Appearance,
    Disappearance,
}

impl EventKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EventKind::Appearance => "appearance",
            EventKind::Disappearance => "disappearance",
        }
    }
}

impl std::fmt::Display for EventKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventParams {
    /// Smallest eligible instance, in pixels.
    pub min_area: usize,
    /// Largest eligible instance as a fraction of the image.
    pub max_area_fraction: f64,
    /// Placement draws before appearance gives up.
    pub max_attempts: usize,
}

impl Default for EventParams {
    fn default() -> Self {
        Self {
            min_area: 16,
            max_area_fraction: 0.05,
            max_attempts: 100,
        }
    }
}

impl EventParams {
    fn admits(&self, instance: &Instance, total: usize) -> bool {
        let area = instance.area();
        area >= self.min_area && (area as f64) <= self.max_area_fraction * total as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeEvent {
    pub kind: EventKind,
    pub source: Instance,
    /// Translation `(dx, dy)` applied to the source footprint (appearance).
    pub offset: Option<(i64, i64)>,
    /// Class written over the source footprint (disappearance).
    pub replacement_class: Option<u8>,
    pub seed: u64,
}

impl ChangeEvent {
    /// Pixels whose class the event changes, in raster order.
    pub fn changed_pixels(&self) -> Vec<(usize, usize)> {
        let mut px: Vec<(usize, usize)> = match (self.kind, self.offset) {
            (EventKind::Appearance, Some((dx, dy))) => self
                .source
                .pixels
                .iter()
                .map(|&(x, y)| ((x as i64 + dx) as usize, (y as i64 + dy) as usize))
                .collect(),
            _ => self.source.pixels.clone(),
        };
        px.sort_by_key(|&(x, y)| (y, x));
        px
    }

    /// Applies the event to `mask`, returning the edited copy.
    pub fn apply(&self, mask: &SemanticMask) -> SemanticMask {
        let mut out = mask.clone();
        let class = match self.kind {
            EventKind::Appearance => self.source.class_id,
            EventKind::Disappearance => self
                .replacement_class
                .expect("disappearance events carry a replacement class"),
        };
        for (x, y) in self.changed_pixels() {
            out.set(x, y, class);
        }
        out
    }
}

/// Stamps a translated copy of a small instance into a homogeneous region
/// of another class.
pub fn simulate_appearance(
    mask: &SemanticMask,
    seed: u64,
    params: &EventParams,
) -> Result<(SemanticMask, ChangeEvent), ChangeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = mask.total_pixels();
    let eligible: Vec<Instance> = extract_instances(mask)
        .into_iter()
        .filter(|i| params.admits(i, total))
        .collect();
    if eligible.is_empty() {
        return Err(ChangeError::NoEligibleInstance(EventKind::Appearance));
    }
    for _ in 0..params.max_attempts {
        let inst = eligible.choose(&mut rng).expect("non-empty");
        let (bw, bh) = (inst.bbox.width(), inst.bbox.height());
        if bw > mask.width() || bh > mask.height() {
            continue;
        }
        let nx = rng.random_range(0..=mask.width() - bw);
        let ny = rng.random_range(0..=mask.height() - bh);
        let dx = nx as i64 - inst.bbox.x0 as i64;
        let dy = ny as i64 - inst.bbox.y0 as i64;
        if let Some(host) = homogeneous_host(mask, inst, dx, dy) {
            if host == inst.class_id {
                continue;
            }
            let event = ChangeEvent {
                kind: EventKind::Appearance,
                source: inst.clone(),
                offset: Some((dx, dy)),
                replacement_class: None,
                seed,
            };
            return Ok((event.apply(mask), event));
        }
    }
    Err(ChangeError::NoAdmissiblePlacement {
        attempts: params.max_attempts,
    })
}

/// Class shared by every pixel of the translated footprint, if any. A
/// connected footprint of one class lies inside one maximal region.
fn homogeneous_host(mask: &SemanticMask, inst: &Instance, dx: i64, dy: i64) -> Option<u8> {
    let mut host = None;
    for &(x, y) in &inst.pixels {
        let c = mask.get((x as i64 + dx) as usize, (y as i64 + dy) as usize);
        match host {
            None => host = Some(c),
            Some(h) if h != c => return None,
            _ => {}
        }
    }
    host
}

/// Class histogram over the distinct pixels adjacent to (but outside) the
/// instance, keyed by class id.
pub fn boundary_histogram(mask: &SemanticMask, inst: &Instance) -> BTreeMap<u8, usize> {
    let own: HashSet<(usize, usize)> = inst.pixels.iter().copied().collect();
    let mut ring = HashSet::new();
    for &(x, y) in &inst.pixels {
        for n in neighbours(x, y, mask.width(), mask.height()) {
            if !own.contains(&n) {
                ring.insert(n);
            }
        }
    }
    let mut hist = BTreeMap::new();
    for (x, y) in ring {
        *hist.entry(mask.get(x, y)).or_insert(0) += 1;
    }
    hist.retain(|c, _| *c != inst.class_id);
    hist
}

/// Relabels a small instance to a class drawn from its boundary histogram
/// with probability proportional to frequency.
pub fn simulate_disappearance(
    mask: &SemanticMask,
    seed: u64,
    params: &EventParams,
) -> Result<(SemanticMask, ChangeEvent), ChangeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = mask.total_pixels();
    let eligible: Vec<(Instance, BTreeMap<u8, usize>)> = extract_instances(mask)
        .into_iter()
        .filter(|i| params.admits(i, total))
        .map(|i| {
            let hist = boundary_histogram(mask, &i);
            (i, hist)
        })
        .filter(|(_, hist)| !hist.is_empty())
        .collect();
    let (inst, hist) = eligible
        .choose(&mut rng)
        .ok_or(ChangeError::NoEligibleInstance(EventKind::Disappearance))?;
    let classes: Vec<u8> = hist.keys().copied().collect();
    let weights = WeightedIndex::new(hist.values().copied()).expect("positive counts");
    let replacement = classes[weights.sample(&mut rng)];
    let event = ChangeEvent {
        kind: EventKind::Disappearance,
        source: inst.clone(),
        offset: None,
        replacement_class: Some(replacement),
        seed,
    };
    Ok((event.apply(mask), event))
}

pub fn simulate_event(
    kind: EventKind,
    mask: &SemanticMask,
    seed: u64,
    params: &EventParams,
) -> Result<(SemanticMask, ChangeEvent), ChangeError> {
    match kind {
        EventKind::Appearance => simulate_appearance(mask, seed, params),
        EventKind::Disappearance => simulate_disappearance(mask, seed, params),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::change::{derive_change_mask, Palette};

    /// Class-0 field with one `side`×`side` class-1 square at (x0, y0).
    fn square_field(size: usize, x0: usize, y0: usize, side: usize) -> SemanticMask {
        let mut m = SemanticMask::uniform(size, size, 8, 0);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m.set(x, y, 1);
            }
        }
        m
    }

    fn small_params() -> EventParams {
        EventParams {
            min_area: 9,
            max_area_fraction: 0.05,
            max_attempts: 100,
        }
    }

    #[test]
    fn appearance_on_square_field() {
        let m = square_field(20, 3, 4, 3);
        for seed in 0..20 {
            let (y2, ev) = simulate_appearance(&m, seed, &small_params()).unwrap();
            let change = derive_change_mask(&m, &y2).unwrap();
            assert_eq!(change.count_changed(), 9);
            assert_eq!(change.changed_pixels(), ev.changed_pixels());
            let squares = extract_instances(&y2)
                .into_iter()
                .filter(|i| i.class_id == 1)
                .count();
            // Translated copy may touch the source diagonally and merge.
            assert!(squares >= 1);
            assert_eq!(y2.class_ids().iter().filter(|c| **c == 1).count(), 18);
        }
    }

    #[test]
    fn uniform_mask_has_no_eligible_instance() {
        let m = SemanticMask::uniform(16, 16, 8, 3);
        assert_eq!(
            simulate_appearance(&m, 1, &EventParams::default()),
            Err(ChangeError::NoEligibleInstance(EventKind::Appearance))
        );
        assert_eq!(
            simulate_disappearance(&m, 1, &EventParams::default()),
            Err(ChangeError::NoEligibleInstance(EventKind::Disappearance))
        );
    }

    #[test]
    fn appearance_without_room_fails() {
        // A 3x3 square filling a 3x4 strip leaves no room of another class
        // large enough for the footprint.
        let mut ids = vec![1u8; 12];
        ids[9..12].copy_from_slice(&[0, 0, 0]);
        let m = SemanticMask::new(3, 4, 2, ids, Palette::land_cover(2)).unwrap();
        let p = EventParams {
            min_area: 3,
            max_area_fraction: 1.0,
            max_attempts: 50,
        };
        assert_eq!(
            simulate_appearance(&m, 0, &EventParams { min_area: 9, ..p }),
            Err(ChangeError::NoAdmissiblePlacement { attempts: 50 })
        );
    }

    #[test]
    fn events_are_seed_deterministic() {
        let m = square_field(20, 8, 8, 4);
        let p = EventParams {
            min_area: 9,
            ..EventParams::default()
        };
        assert_eq!(
            simulate_appearance(&m, 77, &p).unwrap(),
            simulate_appearance(&m, 77, &p).unwrap()
        );
        assert_eq!(
            simulate_disappearance(&m, 77, &p).unwrap(),
            simulate_disappearance(&m, 77, &p).unwrap()
        );
    }

    #[test]
    fn disappearance_restores_surround() {
        let m = square_field(20, 3, 4, 3);
        let (y2, ev) = simulate_disappearance(&m, 5, &small_params()).unwrap();
        assert_eq!(y2, SemanticMask::uniform(20, 20, 8, 0));
        assert_eq!(ev.replacement_class, Some(0));
        let change = derive_change_mask(&m, &y2).unwrap();
        assert_eq!(change.count_changed(), 9);
        assert_eq!(change.changed_pixels(), ev.changed_pixels());
    }

    #[test]
    fn boundary_histogram_counts_distinct_ring_pixels() {
        let m = square_field(10, 2, 2, 3);
        let inst = extract_instances(&m)
            .into_iter()
            .find(|i| i.class_id == 1)
            .unwrap();
        let hist = boundary_histogram(&m, &inst);
        assert_eq!(hist.into_iter().collect::<Vec<_>>(), vec![(0, 16)]);
    }
}
