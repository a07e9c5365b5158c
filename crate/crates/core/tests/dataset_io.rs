use std::fs;
use std::path::Path;

use bitemporal_core::cd_eval::{real_toy_dataset, RealToyConfig};
use bitemporal_core::change::{EventParams, Palette, ToyMaskParams};
use bitemporal_core::codec::CodecSpec;
use bitemporal_core::dataset::{
    read_all, read_dataset, render_montage, AffineMap, DatasetError, DatasetWriter, PnmImage,
    GUTTER_RGB, MANIFEST_FILE,
};
use bitemporal_core::denoiser::{OracleDenoiser, ToySceneSpec};
use bitemporal_core::diffusion::{NoiseSchedule, SigmaMode};
use bitemporal_core::generator::{
    generate_dataset, DatasetConfig, GenerationConfig, MaskSource, SamplePair,
};
use proptest::prelude::*;

fn synthetic(count: usize) -> Vec<SamplePair> {
    let s = NoiseSchedule::linear(200, 5e-4, 0.05, SigmaMode::Standard).unwrap();
    let oracle = OracleDenoiser::new(
        ToySceneSpec::from_palette(&Palette::land_cover(8), 0.2),
        s.clone(),
    );
    let cfg = DatasetConfig {
        generation: GenerationConfig {
            ddim_substeps: 10,
            ..GenerationConfig::defaults_for(&s, 3)
        },
        events: EventParams::default(),
        max_mask_draws: 8,
    };
    let source = MaskSource::Toy(ToyMaskParams::new(32, 8));
    generate_dataset(
        &source,
        &oracle,
        &CodecSpec::identity(3),
        &s,
        &cfg,
        count,
        3,
        2,
    )
    .unwrap()
}

fn write(dir: &Path, pairs: &[SamplePair], hash: &str) -> AffineMap {
    let affine = AffineMap::calibrate(pairs.iter().flat_map(|p| [&p.x_t1, &p.x_t2]));
    let mut w = DatasetWriter::create(dir, affine, hash, pairs[0].y1.palette()).unwrap();
    for p in pairs {
        w.write_sample(p).unwrap();
    }
    w.finish().unwrap();
    affine
}

#[test]
fn round_trip_is_exact_for_masks_and_within_half_step_for_images() {
    let pairs = synthetic(4);
    let tmp = tempfile::tempdir().unwrap();
    let affine = write(tmp.path(), &pairs, "abc");
    let back = read_all(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert_eq!(back.len(), pairs.len());
    let tol = affine.half_step() + 1e-12;
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.index, b.index);
        assert_eq!(a.seed, b.seed);
        assert_eq!(a.y1, b.y1);
        assert_eq!(a.y2, b.y2);
        assert_eq!(a.change, b.change);
        assert_eq!(a.event, b.event);
        assert_eq!(a.metadata, b.metadata);
        assert!(a.x_t1.max_abs_diff(&b.x_t1).unwrap() <= tol);
        assert!(a.x_t2.max_abs_diff(&b.x_t2).unwrap() <= tol);
    }
    // A second write of the decoded pairs reproduces the bytes exactly.
    let tmp2 = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(tmp2.path(), affine, "abc", back[0].y1.palette()).unwrap();
    for p in &back {
        w.write_sample(p).unwrap();
    }
    w.finish().unwrap();
    for p in &back {
        for suffix in ["t1.ppm", "t2.ppm", "y1.pgm", "y2.pgm", "change.pgm"] {
            let name = format!("{}_{suffix}", p.id);
            assert_eq!(
                fs::read(tmp.path().join(&name)).unwrap(),
                fs::read(tmp2.path().join(&name)).unwrap(),
                "{name}"
            );
        }
    }
}

#[test]
fn real_pairs_round_trip_without_metadata() {
    let pairs = real_toy_dataset(3, 5, &RealToyConfig::new(32, 4)).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), &pairs, "real");
    let back = read_all(&tmp.path().join(MANIFEST_FILE)).unwrap();
    assert!(back.iter().all(|p| p.metadata.is_none()));
    assert_eq!(
        back.iter().map(|p| &p.y2).collect::<Vec<_>>(),
        pairs.iter().map(|p| &p.y2).collect::<Vec<_>>()
    );
}

#[test]
fn duplicate_ids_are_rejected() {
    let pairs = synthetic(1);
    let tmp = tempfile::tempdir().unwrap();
    let mut w = DatasetWriter::create(
        tmp.path(),
        AffineMap::new(-1.0, 1.0).unwrap(),
        "h",
        pairs[0].y1.palette(),
    )
    .unwrap();
    w.write_sample(&pairs[0]).unwrap();
    assert_eq!(
        w.write_sample(&pairs[0]),
        Err(DatasetError::DuplicateId(pairs[0].id.clone()))
    );
}

#[test]
fn empty_manifest_yields_nothing_and_missing_manifest_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let w = DatasetWriter::create(
        tmp.path(),
        AffineMap::new(0.0, 1.0).unwrap(),
        "h",
        &Palette::land_cover(4),
    )
    .unwrap();
    w.finish().unwrap();
    assert_eq!(read_all(&tmp.path().join(MANIFEST_FILE)).unwrap().len(), 0);
    assert!(matches!(
        read_dataset(&tmp.path().join("nope.jsonl")),
        Err(DatasetError::MissingFile(_))
    ));
}

#[test]
fn tampered_mask_is_caught() {
    let pairs = synthetic(2);
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), &pairs, "h");
    // Flip one pixel of the second sample's y2 to a class that breaks the XOR.
    let path = tmp.path().join(format!("{}_y2.pgm", pairs[1].id));
    let mut img = PnmImage::read_from(fs::read(&path).unwrap().as_slice()).unwrap();
    let (x, y) = (0..img.width * img.height)
        .map(|i| (i % img.width, i / img.width))
        .find(|&(x, y)| pairs[1].change.get(x, y) == 0)
        .unwrap();
    let k = y * img.width + x;
    img.data[k] = (img.data[k] + 1) % 8;
    fs::write(&path, img.to_bytes()).unwrap();

    let results: Vec<_> = read_dataset(&tmp.path().join(MANIFEST_FILE))
        .unwrap()
        .collect();
    assert!(results[0].is_ok());
    assert_eq!(
        results[1].as_ref().unwrap_err(),
        &DatasetError::XorInconsistency(pairs[1].id.clone())
    );
}

#[test]
fn mixed_config_hashes_are_rejected() {
    let pairs = synthetic(2);
    let tmp = tempfile::tempdir().unwrap();
    write(tmp.path(), &pairs, "one");
    let man = tmp.path().join(MANIFEST_FILE);
    let text = fs::read_to_string(&man).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
    lines[1] = lines[1].replace("\"config_hash\":\"one\"", "\"config_hash\":\"two\"");
    fs::write(&man, lines.join("\n")).unwrap();
    let err = read_all(&man).unwrap_err();
    assert!(
        matches!(err, DatasetError::ConfigHashMismatch { .. }),
        "{err:?}"
    );
}

#[test]
fn montage_layout_and_colours() {
    let pairs = synthetic(1);
    let p = &pairs[0];
    let palette = p.y1.palette().clone();
    let affine = AffineMap::calibrate([&p.x_t1, &p.x_t2]);
    let gutter = 3;
    let m = render_montage(p, &palette, &affine, gutter).unwrap();
    let w = p.y1.width();
    assert_eq!(m.width, 5 * w + 4 * gutter);
    assert_eq!(m.height, p.y1.height());
    let pixel = |x: usize, y: usize| -> [u8; 3] {
        let k = (y * m.width + x) * 3;
        [m.data[k], m.data[k + 1], m.data[k + 2]]
    };
    for y in 0..m.height {
        for g in 1..5 {
            for dx in 0..gutter {
                assert_eq!(pixel(g * w + (g - 1) * gutter + dx, y), GUTTER_RGB);
            }
        }
        for x in 0..w {
            let y1x = 2 * (w + gutter) + x;
            assert_eq!(Some(pixel(y1x, y)), palette.color(p.y1.get(x, y)));
            let cx = 4 * (w + gutter) + x;
            let v = p.change.get(x, y) * 255;
            assert_eq!(pixel(cx, y), [v, v, v]);
        }
    }
    assert!(matches!(
        render_montage(p, &Palette::land_cover(1), &affine, gutter),
        Err(DatasetError::PaletteTooShort { .. })
    ));
}

#[test]
fn identical_pair_gives_identical_image_panels() {
    let mut p = synthetic(1).remove(0);
    p.x_t2 = p.x_t1.clone();
    let affine = AffineMap::calibrate([&p.x_t1]);
    let m = render_montage(&p, p.y1.palette(), &affine, 2).unwrap();
    let w = p.y1.width();
    for y in 0..m.height {
        let row = &m.data[y * m.width * 3..(y + 1) * m.width * 3];
        assert_eq!(row[..w * 3], row[(w + 2) * 3..(2 * w + 2) * 3]);
    }
}

proptest! {
    #[test]
    fn affine_round_trip_error_is_bounded(lo in -5.0f64..0.0, span in 0.01f64..10.0, t in 0.0f64..=1.0) {
        let map = AffineMap::new(lo, lo + span).unwrap();
        let v = lo + t * span;
        let (b, clamped) = map.to_byte(v);
        prop_assert!(!clamped);
        prop_assert!((map.to_real(b) - v).abs() <= map.half_step() + 1e-12);
    }

    #[test]
    fn out_of_range_values_clamp(lo in -5.0f64..0.0, span in 0.01f64..10.0, over in 0.1f64..5.0) {
        let map = AffineMap::new(lo, lo + span).unwrap();
        prop_assert_eq!(map.to_byte(lo + span + over), (255, true));
        prop_assert_eq!(map.to_byte(lo - over), (0, true));
    }
}
