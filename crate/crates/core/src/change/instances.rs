use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::SemanticMask;

/// Inclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }
}

/// One 8-connected single-class component.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub class_id: u8,
    /// `(x, y)` coordinates in raster order.
    pub pixels: Vec<(usize, usize)>,
    pub bbox: BoundingBox,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }
}

pub(crate) const NEIGHBOURS_8: [(isize, isize); 8] = [
    (-1, -1),
    (0, -1),
    (1, -1),
    (-1, 0),
    (1, 0),
    (-1, 1),
    (0, 1),
    (1, 1),
];

pub(crate) fn neighbours(
    x: usize,
    y: usize,
    width: usize,
    height: usize,
) -> impl Iterator<Item = (usize, usize)> {
    NEIGHBOURS_8.iter().filter_map(move |(dx, dy)| {
        let nx = x as isize + dx;
        let ny = y as isize + dy;
        (nx >= 0 && ny >= 0 && (nx as usize) < width && (ny as usize) < height)
            .then_some((nx as usize, ny as usize))
    })
}

/// Decomposes a mask into 8-connected components per class. Every pixel
/// lands in exactly one instance; instances are sorted by area, largest
/// first, ties in raster order of their first pixel.
pub fn extract_instances(mask: &SemanticMask) -> Vec<Instance> {
    let (w, h) = (mask.width(), mask.height());
    let mut visited = vec![false; w * h];
    let mut instances = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if visited[start] {
            continue;
        }
        let class_id = mask.class_ids()[start];
        visited[start] = true;
        queue.push_back((start % w, start / w));
        let mut pixels = Vec::new();
        while let Some((x, y)) = queue.pop_front() {
            pixels.push((x, y));
            for (nx, ny) in neighbours(x, y, w, h) {
                let ni = ny * w + nx;
                if !visited[ni] && mask.class_ids()[ni] == class_id {
                    visited[ni] = true;
                    queue.push_back((nx, ny));
                }
            }
        }
        pixels.sort_by_key(|&(x, y)| (y, x));
        let bbox = BoundingBox {
            x0: pixels.iter().map(|p| p.0).min().unwrap(),
            y0: pixels[0].1,
            x1: pixels.iter().map(|p| p.0).max().unwrap(),
            y1: pixels[pixels.len() - 1].1,
        };
        instances.push(Instance {
            class_id,
            pixels,
            bbox,
        });
    }
    instances.sort_by(|a, b| b.area().cmp(&a.area()));
    instances
}
