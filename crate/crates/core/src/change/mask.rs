use serde::{Deserialize, Serialize};

use super::ChangeError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub rgb: [u8; 3],
    pub name: String,
}

/// Per-class display colours. Serialized as one `class_id R G B name` line
/// per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Palette {
    entries: Vec<PaletteEntry>,
}

const LAND_COVER: [([u8; 3], &str); 8] = [
    ([128, 0, 0], "bareland"),
    ([0, 255, 36], "rangeland"),
    ([148, 148, 148], "developed space"),
    ([255, 255, 255], "road"),
    ([34, 97, 38], "tree"),
    ([0, 69, 255], "water"),
    ([75, 181, 73], "agriculture land"),
    ([222, 31, 7], "building"),
];

impl Palette {
    pub fn new(entries: Vec<PaletteEntry>) -> Self {
        Self { entries }
    }

    /// Eight land-cover classes, extended with generated colours when more
    /// classes are requested.
    pub fn land_cover(num_classes: usize) -> Self {
        let entries = (0..num_classes)
            .map(|c| match LAND_COVER.get(c) {
                Some((rgb, name)) => PaletteEntry {
                    rgb: *rgb,
                    name: (*name).to_string(),
                },
                None => {
                    let h = (c as u32).wrapping_mul(2_654_435_761);
                    PaletteEntry {
                        rgb: [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8],
                        name: format!("class {c}"),
                    }
                }
            })
            .collect();
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PaletteEntry] {
        &self.entries
    }

    pub fn color(&self, class_id: u8) -> Option<[u8; 3]> {
        self.entries.get(class_id as usize).map(|e| e.rgb)
    }

    pub fn to_text(&self) -> String {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| format!("{} {} {} {} {}\n", i, e.rgb[0], e.rgb[1], e.rgb[2], e.name))
            .collect()
    }

    pub fn from_text(text: &str) -> Result<Self, ChangeError> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = || ChangeError::InvalidMask(format!("palette line {}: `{line}`", lineno + 1));
            let mut parts = line.splitn(5, char::is_whitespace);
            let id: usize = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let mut rgb = [0u8; 3];
            for v in &mut rgb {
                *v = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            }
            let name = parts.next().unwrap_or("").trim().to_string();
            if id != entries.len() {
                return Err(bad());
            }
            entries.push(PaletteEntry { rgb, name });
        }
        Ok(Self { entries })
    }
}

/// Integer class raster with its palette.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticMask {
    width: usize,
    height: usize,
    num_classes: usize,
    class_ids: Vec<u8>,
    palette: Palette,
}

impl SemanticMask {
    pub fn new(
        width: usize,
        height: usize,
        num_classes: usize,
        class_ids: Vec<u8>,
        palette: Palette,
    ) -> Result<Self, ChangeError> {
        if width == 0 || height == 0 {
            return Err(ChangeError::InvalidMask("empty mask".into()));
        }
        if num_classes == 0 || num_classes > 256 {
            return Err(ChangeError::InvalidMask(format!(
                "class count {num_classes} outside 1..=256"
            )));
        }
        if class_ids.len() != width * height {
            return Err(ChangeError::InvalidMask(format!(
                "{} class ids for {width}x{height}",
                class_ids.len()
            )));
        }
        if palette.len() != num_classes {
            return Err(ChangeError::InvalidMask(format!(
                "palette has {} entries for {num_classes} classes",
                palette.len()
            )));
        }
        if let Some(bad) = class_ids.iter().find(|c| **c as usize >= num_classes) {
            return Err(ChangeError::InvalidMask(format!(
                "class id {bad} >= {num_classes}"
            )));
        }
        Ok(Self {
            width,
            height,
            num_classes,
            class_ids,
            palette,
        })
    }

    pub fn uniform(width: usize, height: usize, num_classes: usize, class_id: u8) -> Self {
        Self::new(
            width,
            height,
            num_classes,
            vec![class_id; width * height],
            Palette::land_cover(num_classes),
        )
        .expect("uniform mask parameters must be valid")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn palette(&self) -> &Palette {
        &self.palette
    }

    pub fn class_ids(&self) -> &[u8] {
        &self.class_ids
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.class_ids[y * self.width + x]
    }

    /// Overwrites one pixel; panics on out-of-range class ids.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class_id: u8) {
        assert!((class_id as usize) < self.num_classes);
        self.class_ids[y * self.width + x] = class_id;
    }

    pub fn total_pixels(&self) -> usize {
        self.width * self.height
    }

    /// Sorted set of class ids present.
    pub fn classes_present(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for c in &self.class_ids {
            seen[*c as usize] = true;
        }
        (0..=255u8).filter(|c| seen[*c as usize]).collect()
    }

    /// Nearest-neighbour downsampling (block centre) by an integer factor.
    pub fn downsample_nearest(&self, factor: usize) -> Result<SemanticMask, ChangeError> {
        check_divisible(self.width, self.height, factor)?;
        if factor == 1 {
            return Ok(self.clone());
        }
        let (w, h) = (self.width / factor, self.height / factor);
        let mut ids = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                ids.push(self.get(x * factor + factor / 2, y * factor + factor / 2));
            }
        }
        SemanticMask::new(w, h, self.num_classes, ids, self.palette.clone())
    }
}

/// Binary change raster: 1 = change, 0 = non-change.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChangeMask {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl ChangeMask {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self, ChangeError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(ChangeError::InvalidMask(format!(
                "{} change values for {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| *v > 1) {
            return Err(ChangeError::InvalidMask(
                "change mask must be binary".into(),
            ));
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::new(width, height, vec![0; width * height]).expect("positive dimensions")
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, changed: bool) {
        self.values[y * self.width + x] = changed as u8;
    }

    pub fn count_changed(&self) -> usize {
        self.values.iter().filter(|v| **v == 1).count()
    }

    /// Changed pixel coordinates `(x, y)` in raster order.
    pub fn changed_pixels(&self) -> Vec<(usize, usize)> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, v)| **v == 1)
            .map(|(i, _)| (i % self.width, i / self.width))
            .collect()
    }
}

fn check_divisible(width: usize, height: usize, factor: usize) -> Result<(), ChangeError> {
    if factor == 0 || !width.is_multiple_of(factor) || !height.is_multiple_of(factor) {
        return Err(ChangeError::Indivisible {
            width,
            height,
            factor,
        });
    }
    Ok(())
}

/// Pixelwise XOR of class identity: 1 wherever the class ids differ.
pub fn derive_change_mask(y1: &SemanticMask, y2: &SemanticMask) -> Result<ChangeMask, ChangeError> {
    if y1.width != y2.width || y1.height != y2.height || y1.num_classes != y2.num_classes {
        return Err(ChangeError::DimensionMismatch(format!(
            "{}x{} ({} classes) vs {}x{} ({} classes)",
            y1.width, y1.height, y1.num_classes, y2.width, y2.height, y2.num_classes
        )));
    }
    let values = y1
        .class_ids
        .iter()
        .zip(&y2.class_ids)
        .map(|(a, b)| (a != b) as u8)
        .collect();
    ChangeMask::new(y1.width, y1.height, values)
}

/// Max-pool by `factor`, then dilate by `dilate_radius` in the
/// 8-neighbourhood (Chebyshev) metric.
pub fn downsample_change_mask(
    mask: &ChangeMask,
    factor: usize,
    dilate_radius: usize,
) -> Result<ChangeMask, ChangeError> {
    check_divisible(mask.width, mask.height, factor)?;
    let (w, h) = (mask.width / factor, mask.height / factor);
    let mut pooled = vec![0u8; w * h];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) == 1 {
                pooled[(y / factor) * w + x / factor] = 1;
            }
        }
    }
    if dilate_radius == 0 {
        return ChangeMask::new(w, h, pooled);
    }
    let r = dilate_radius;
    let mut out = vec![0u8; w * h];
    for y in 0..h {
        for x in 0..w {
            if pooled[y * w + x] == 0 {
                continue;
            }
            for ny in y.saturating_sub(r)..=(y + r).min(h - 1) {
                for nx in x.saturating_sub(r)..=(x + r).min(w - 1) {
                    out[ny * w + nx] = 1;
                }
            }
        }
    }
    ChangeMask::new(w, h, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: usize, h: usize, c: usize, ids: &[u8]) -> SemanticMask {
        SemanticMask::new(w, h, c, ids.to_vec(), Palette::land_cover(c)).unwrap()
    }

    #[test]
    fn mask_invariants() {
        assert!(SemanticMask::new(2, 1, 3, vec![0, 3], Palette::land_cover(3)).is_err());
        assert!(SemanticMask::new(2, 1, 3, vec![0, 2], Palette::land_cover(2)).is_err());
        assert!(SemanticMask::new(2, 2, 3, vec![0, 2], Palette::land_cover(3)).is_err());
        assert!(ChangeMask::new(1, 1, vec![2]).is_err());
    }

    #[test]
    fn xor_change_mask() {
        let y1 = mask(2, 2, 8, &[1, 2, 3, 4]);
        let y2 = mask(2, 2, 8, &[1, 5, 3, 4]);
        assert_eq!(derive_change_mask(&y1, &y1).unwrap().count_changed(), 0);
        assert_eq!(
            derive_change_mask(&y1, &y2).unwrap().values(),
            &[0, 1, 0, 0]
        );
        let other = mask(1, 4, 8, &[1, 2, 3, 4]);
        assert!(matches!(
            derive_change_mask(&y1, &other),
            Err(ChangeError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn downsample_and_dilate() {
        let zero = ChangeMask::zeros(16, 16);
        for f in [1, 2, 4, 8] {
            assert_eq!(
                downsample_change_mask(&zero, f, 0).unwrap().count_changed(),
                0
            );
        }
        let mut m = ChangeMask::zeros(16, 16);
        m.set(5, 5, true);
        let d = downsample_change_mask(&m, 4, 0).unwrap();
        assert_eq!((d.width(), d.height()), (4, 4));
        assert_eq!(d.changed_pixels(), vec![(1, 1)]);

        let d1 = downsample_change_mask(&m, 4, 1).unwrap();
        let expected: Vec<(usize, usize)> =
            (0..3).flat_map(|y| (0..3).map(move |x| (x, y))).collect();
        assert_eq!(d1.changed_pixels(), expected);

        let mut corner = ChangeMask::zeros(4, 4);
        corner.set(0, 0, true);
        assert_eq!(
            downsample_change_mask(&corner, 1, 1)
                .unwrap()
                .count_changed(),
            4
        );
        assert!(matches!(
            downsample_change_mask(&m, 3, 0),
            Err(ChangeError::Indivisible { .. })
        ));
    }

    #[test]
    fn palette_text_round_trip() {
        let p = Palette::land_cover(10);
        let text = p.to_text();
        assert!(text.starts_with("0 128 0 0 bareland\n"));
        assert!(text.contains("\n2 148 148 148 developed space\n"));
        assert_eq!(Palette::from_text(&text).unwrap(), p);
        assert!(Palette::from_text("1 0 0 0 x\n").is_err());
    }

    #[test]
    fn nearest_downsample_takes_block_centres() {
        let mut ids = vec![0u8; 16];
        ids[2 * 4 + 2] = 1; // centre of the single 4x4 block
        let m = mask(4, 4, 2, &ids);
        let d = m.downsample_nearest(4).unwrap();
        assert_eq!(d.class_ids(), &[1]);
    }
}
