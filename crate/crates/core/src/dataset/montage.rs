//! Side-by-side preview of one pair: t1, t2, y1, y2 and the change mask.

use crate::change::Palette;
use crate::generator::SamplePair;

use super::{AffineMap, DatasetError, PnmImage, PnmKind};

pub const MONTAGE_GUTTER: usize = 2;
/// Fill colour between panels.
pub const GUTTER_RGB: [u8; 3] = [64, 64, 64];

/// Renders five panels of width `w` separated by `gutter` columns, giving
/// an image `5w + 4 * gutter` wide. Masks are drawn with `palette`, the
/// change mask in white on black.
pub fn render_montage(
    pair: &SamplePair,
    palette: &Palette,
    affine: &AffineMap,
    gutter: usize,
) -> Result<PnmImage, DatasetError> {
    let (w, h) = (pair.y1.width(), pair.y1.height());
    for img in [&pair.x_t1, &pair.x_t2] {
        if img.width() != w || img.height() != h {
            return Err(DatasetError::Format(format!(
                "image is {}x{}, masks are {w}x{h}",
                img.width(),
                img.height()
            )));
        }
        if img.channels() != 1 && img.channels() != 3 {
            return Err(DatasetError::Format(format!(
                "cannot render {}-channel image",
                img.channels()
            )));
        }
    }
    for c in pair
        .y1
        .classes_present()
        .into_iter()
        .chain(pair.y2.classes_present())
    {
        if palette.color(c).is_none() {
            return Err(DatasetError::PaletteTooShort {
                palette: palette.len(),
                class: c,
            });
        }
    }
    let total_w = 5 * w + 4 * gutter;
    let mut data = Vec::with_capacity(total_w * h * 3);
    for y in 0..h {
        for panel in 0..5 {
            if panel > 0 {
                for _ in 0..gutter {
                    data.extend_from_slice(&GUTTER_RGB);
                }
            }
            for x in 0..w {
                let rgb = match panel {
                    0 | 1 => {
                        let img = if panel == 0 { &pair.x_t1 } else { &pair.x_t2 };
                        let mut px = [0u8; 3];
                        for (k, p) in px.iter_mut().enumerate() {
                            let ch = if img.channels() == 1 { 0 } else { k };
                            *p = affine.to_byte(img.get(ch, y, x)).0;
                        }
                        px
                    }
                    2 => palette.color(pair.y1.get(x, y)).expect("checked above"),
                    3 => palette.color(pair.y2.get(x, y)).expect("checked above"),
                    _ => [pair.change.get(x, y) * 255; 3],
                };
                data.extend_from_slice(&rgb);
            }
        }
    }
    PnmImage::new(PnmKind::Ppm, total_w, h, data)
}
