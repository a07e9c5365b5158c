//! Procedural land-cover masks: Voronoi background regions with small
//! rectangular and elliptical instances stamped on top.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::events::EventParams;
use super::instances::extract_instances;
use super::{Palette, SemanticMask};

/// Redraws before the generator settles for a mask without an eligible
/// appearance instance.
const MAX_REDRAWS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyMaskParams {
    pub size: usize,
    pub num_classes: usize,
    pub num_regions: usize,
    pub num_instances: usize,
}

impl Default for ToyMaskParams {
    fn default() -> Self {
        Self {
            size: 64,
            num_classes: 8,
            num_regions: 6,
            num_instances: 4,
        }
    }
}

impl ToyMaskParams {
    pub fn new(size: usize, num_classes: usize) -> Self {
        Self {
            size,
            num_classes,
            ..Self::default()
        }
    }
}

/// Draws a seeded toy mask. When instances are requested the draw is
/// repeated until at least one instance qualifies for an appearance event
/// under default [`EventParams`].
///
/// # Panics
///
/// Panics if `num_classes` is outside `2..=256` or `size` is zero.
pub fn generate_toy_semantic_mask(seed: u64, params: &ToyMaskParams) -> SemanticMask {
    assert!(
        (2..=256).contains(&params.num_classes),
        "toy masks need 2..=256 classes"
    );
    assert!(params.size > 0, "toy masks need a positive size");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let event = EventParams::default();
    let mut mask = draw(&mut rng, params);
    if params.num_instances == 0 {
        return mask;
    }
    for _ in 1..MAX_REDRAWS {
        let total = mask.total_pixels();
        let ok = extract_instances(&mask).iter().any(|i| {
            i.area() >= event.min_area && i.area() as f64 <= event.max_area_fraction * total as f64
        });
        if ok {
            break;
        }
        mask = draw(&mut rng, params);
    }
    mask
}

fn draw(rng: &mut ChaCha8Rng, params: &ToyMaskParams) -> SemanticMask {
    let n = params.size;
    let c = params.num_classes;
    let regions = params.num_regions.max(1);
    let seeds: Vec<(f64, f64, u8)> = (0..regions)
        .map(|_| {
            (
                rng.random_range(0.0..n as f64),
                rng.random_range(0.0..n as f64),
                rng.random_range(0..c) as u8,
            )
        })
        .collect();
    let mut ids = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let nearest = seeds
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 - px).powi(2) + (a.1 - py).powi(2);
                    let db = (b.0 - px).powi(2) + (b.1 - py).powi(2);
                    da.total_cmp(&db)
                })
                .expect("at least one seed");
            ids[y * n + x] = nearest.2;
        }
    }

    let max_side = 7.max(n / 8).min(n);
    let min_side = 5.min(max_side);
    for _ in 0..params.num_instances {
        let w = rng.random_range(min_side..=max_side);
        let h = rng.random_range(min_side..=max_side);
        let x0 = rng.random_range(0..=n - w);
        let y0 = rng.random_range(0..=n - h);
        let under = ids[(y0 + h / 2) * n + x0 + w / 2] as usize;
        let class = ((under + rng.random_range(1..c)) % c) as u8;
        let ellipse = rng.random_bool(0.5);
        let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
        for dy in 0..h {
            for dx in 0..w {
                let inside = !ellipse || {
                    let u = (dx as f64 + 0.5 - cx) / cx;
                    let v = (dy as f64 + 0.5 - cy) / cy;
                    u * u + v * v <= 1.0
                };
                if inside {
                    ids[(y0 + dy) * n + x0 + dx] = class;
                }
            }
        }
    }
    SemanticMask::new(n, n, c, ids, Palette::land_cover(c)).expect("class ids drawn below C")
}
