use super::*;
use crate::eval::Predictions;
use crate::synthetic::{generate_dataset, SynthSpec};

fn fixture() -> Image {
    Image::from_fn(64, 64, |x, y| {
        let (fx, fy) = (x as f32, y as f32);
        [
            0.5 + 0.4 * (fx * 0.45).sin() * (fy * 0.3).cos(),
            0.5 + 0.35 * ((fx + fy) * 0.2).sin(),
            if (x / 8 + y / 8) % 2 == 0 { 0.8 } else { 0.2 },
        ]
    })
}

fn tiny_spec() -> SynthSpec {
    SynthSpec {
        num_classes: 2,
        images_per_class: 2,
        val_per_class: 1,
        test_per_class: 2,
        width: 40,
        height: 40,
        object_half_size: 14.0,
        keypoints_per_class: 5,
        ..SynthSpec::default()
    }
}

fn oracle_predictions(m: &DatasetManifest) -> Predictions {
    let mut p = Predictions::default();
    for pair in &m.pairs {
        for kp in &pair.keypoints {
            p.points.insert((pair.id(), kp.id), kp.src_point());
        }
    }
    p
}

#[test]
fn severity_table_is_complete() {
    let t = severity_table();
    assert_eq!(t.version, 1);
    assert_eq!(t.gaussian_noise.sigma, [0.08, 0.12, 0.18, 0.26, 0.38]);
    assert_eq!(t.shot_noise.rate, [60.0, 25.0, 12.0, 5.0, 3.0]);
    assert_eq!(t.jpeg.quality, [25, 18, 15, 10, 7]);
    assert_eq!(t.pixelate.factor, [0.6, 0.5, 0.4, 0.3, 0.25]);
    assert_eq!(t.spatter.mud, [false, false, false, true, true]);
}

#[test]
fn kind_names_round_trip() {
    for k in CorruptionKind::ALL {
        assert_eq!(k.as_str().parse::<CorruptionKind>().unwrap(), k);
    }
    assert_eq!("jpeg_compression".parse::<CorruptionKind>().unwrap(), CorruptionKind::Jpeg);
    assert!(matches!("motion_blur".parse::<CorruptionKind>(), Err(Error::UnsupportedKind(_))));
}

#[test]
fn severity_out_of_range_is_rejected() {
    let img = fixture();
    for sev in [0u8, 6, 255] {
        assert!(matches!(CorruptionSpec::new(CorruptionKind::Fog, sev, 0), Err(Error::InvalidSeverity(s)) if s == sev));
        let spec = CorruptionSpec { kind: CorruptionKind::Fog, severity: sev, seed: 0 };
        assert!(matches!(corrupt(&img, &spec), Err(Error::InvalidSeverity(_))));
    }
}

#[test]
fn every_kind_keeps_shape_and_range() {
    let img = fixture();
    for k in CorruptionKind::ALL {
        for sev in SEVERITIES {
            let out = corrupt(&img, &CorruptionSpec::new(k, sev, 7).unwrap()).unwrap();
            assert_eq!((out.width(), out.height()), (64, 64), "{k}");
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{k} s{sev}");
            assert!(psnr(&img, &out) < f64::INFINITY || k == CorruptionKind::Frost, "{k} s{sev} left image untouched");
        }
    }
}

#[test]
fn corruption_is_deterministic_per_seed() {
    let img = fixture();
    for k in CorruptionKind::ALL {
        let a = corrupt(&img, &CorruptionSpec::new(k, 3, 11).unwrap()).unwrap();
        let b = corrupt(&img, &CorruptionSpec::new(k, 3, 11).unwrap()).unwrap();
        assert_eq!(a, b, "{k}");
    }
    let a = corrupt(&img, &CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 1).unwrap()).unwrap();
    let b = corrupt(&img, &CorruptionSpec::new(CorruptionKind::GaussianNoise, 3, 2).unwrap()).unwrap();
    assert_ne!(a, b);
}

#[test]
fn per_image_seeds_differ() {
    let a = CorruptionSpec::for_image(CorruptionKind::Snow, 2, 5, "img_a").unwrap();
    let b = CorruptionSpec::for_image(CorruptionKind::Snow, 2, 5, "img_b").unwrap();
    let c = CorruptionSpec::for_image(CorruptionKind::Snow, 3, 5, "img_a").unwrap();
    assert_ne!(a.seed, b.seed);
    assert_ne!(a.seed, c.seed);
}

#[test]
fn noise_and_blur_psnr_strictly_decreases_with_severity() {
    let img = fixture();
    for k in CorruptionKind::ALL.into_iter().filter(|k| k.is_noise_or_blur()) {
        let scores: Vec<f64> = SEVERITIES
            .iter()
            .map(|&s| psnr(&img, &corrupt(&img, &CorruptionSpec::new(k, s, 3).unwrap()).unwrap()))
            .collect();
        assert!(scores.windows(2).all(|w| w[1] < w[0]), "{k}: {scores:?}");
    }
}

/// Independent two-pass reference: average each low-resolution cell over the
/// pixels it covers, then copy each cell back over its footprint.
fn pixelate_oracle(img: &Image, factor: f64) -> Image {
    let (w, h) = (img.width(), img.height());
    let dw = ((w as f64 * factor) as usize).max(1);
    let dh = ((h as f64 * factor) as usize).max(1);
    let span = |i: usize, n: usize, d: usize| ((i * n).div_ceil(d), ((i + 1) * n).div_ceil(d));
    let mut out = Image::new(w, h);
    for cy in 0..dh {
        let (y0, y1) = span(cy, h, dh);
        for cx in 0..dw {
            let (x0, x1) = span(cx, w, dw);
            let mut acc = [0.0f64; 3];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.pixel(x, y);
                    (0..3).for_each(|c| acc[c] += p[c] as f64);
                }
            }
            let n = ((y1 - y0) * (x1 - x0)) as f64;
            let v = acc.map(|a| (a / n) as f32);
            for y in y0..y1 {
                for x in x0..x1 {
                    out.set_pixel(x, y, v);
                }
            }
        }
    }
    out
}

#[test]
fn pixelate_matches_two_pass_oracle() {
    let img = fixture();
    for (s, &f) in severity_table().pixelate.factor.iter().enumerate() {
        let got = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Pixelate, s as u8 + 1, 0).unwrap()).unwrap();
        let want = pixelate_oracle(&img, f);
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
    let odd = Image::from_fn(37, 23, |x, y| [x as f32 / 37.0, y as f32 / 23.0, 0.5]);
    let got = pixelate(&odd, 0.3);
    let want = pixelate_oracle(&odd, 0.3);
    for (a, b) in got.data().iter().zip(want.data()) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn hsv_round_trip() {
    for p in [[0.2f32, 0.4, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1], [0.0, 0.5, 0.4]] {
        let back = hsv_to_rgb(rgb_to_hsv(p));
        for c in 0..3 {
            assert!((back[c] - p[c]).abs() < 1e-6, "{p:?} -> {back:?}");
        }
    }
}

#[test]
fn contrast_and_brightness_move_in_the_expected_direction() {
    let img = fixture();
    let spread = |im: &Image| {
        let g = im.to_gray();
        let m = g.iter().sum::<f32>() / g.len() as f32;
        g.iter().map(|v| (v - m).powi(2)).sum::<f32>()
    };
    let low = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Contrast, 5, 0).unwrap()).unwrap();
    assert!(spread(&low) < 0.01 * spread(&img));
    let bright = corrupt(&img, &CorruptionSpec::new(CorruptionKind::Brightness, 3, 0).unwrap()).unwrap();
    let mean = |im: &Image| im.data().iter().sum::<f32>() / im.data().len() as f32;
    assert!(mean(&bright) > mean(&img));
}

#[test]
fn corrupted_set_layout_and_oracle_robustness() {
    let out = generate_dataset(&tiny_spec()).unwrap();
    let clean = out.dataset;
    let dir = tempfile::tempdir().unwrap();
    let kinds = [CorruptionKind::GaussianNoise, CorruptionKind::Jpeg, CorruptionKind::Pixelate];
    let derived = build_corrupted_set(&clean, dir.path(), 9, &kinds).unwrap();

    let test_ids: Vec<&str> =
        clean.manifest.images.iter().filter(|e| e.split == Split::Test).map(|e| e.id.as_str()).collect();
    assert_eq!(derived.images.len(), test_ids.len());
    for id in &test_ids {
        for k in kinds {
            for sev in SEVERITIES {
                assert!(dir.path().join(variant_path(k, sev, id)).is_file());
            }
        }
    }
    let info = derived.corruption.as_ref().unwrap();
    assert_eq!(info.seed, 9);
    assert_eq!(info.severities, SEVERITIES.to_vec());
    assert_eq!(derived.pairs, test_view(&clean.manifest).pairs);

    let mpath = dir.path().join("manifest.json");
    let slice = load_slice(&mpath, CorruptionKind::GaussianNoise, 4).unwrap();
    let id = test_ids[0];
    let spec = CorruptionSpec::for_image(CorruptionKind::GaussianNoise, 4, 9, id).unwrap();
    let expected = corrupt(clean.image(id).unwrap(), &spec).unwrap().quantized();
    assert_eq!(slice.image(id).unwrap(), &expected);
    let jpeg = load_slice(&mpath, CorruptionKind::Jpeg, 5).unwrap();
    let spec = CorruptionSpec::for_image(CorruptionKind::Jpeg, 5, 9, id).unwrap();
    assert_eq!(jpeg.image(id).unwrap(), &corrupt(clean.image(id).unwrap(), &spec).unwrap());
    assert!(matches!(load_slice(&mpath, CorruptionKind::Fog, 1), Err(Error::UnsupportedKind(_))));

    let oracle = oracle_predictions(&derived);
    let score = |m: &DatasetManifest| {
        evaluate_report(PredictionSource::Table(&oracle), m, Split::Test, &[0.1], PckNorm::Bbox).unwrap().primary_pck()
    };
    let report = RobustnessReport::from_fn(&kinds, score(&clean.manifest), |k, sev| {
        Ok(score(&load_slice(&mpath, k, sev)?.manifest))
    })
    .unwrap();
    assert!(report.cells.iter().flatten().all(|&v| v == 1.0));
    assert_eq!(report.clean, 1.0);
    assert_eq!(report.corrupted_avg(), 1.0);
}

#[test]
fn report_averages_are_consistent() {
    let kinds = CorruptionKind::ALL;
    let report = RobustnessReport::from_fn(&kinds, 0.9, |k, sev| {
        Ok(((k as usize * 7 + sev as usize * 13) % 17) as f64 / 17.0)
    })
    .unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let mut rdr = csv::Reader::from_reader(buf.as_slice());
    let header = rdr.headers().unwrap().clone();
    assert_eq!(header.len(), 1 + 15 + 2);
    assert_eq!(&header[0], "severity");
    assert_eq!(&header[16], "corrupted_avg");
    assert_eq!(&header[17], "clean");
    let rows: Vec<Vec<String>> = rdr.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[5][0], "avg");
    let num = |s: &str| s.parse::<f64>().unwrap();
    for row in &rows[..5] {
        let cells: Vec<f64> = row[1..16].iter().map(|s| num(s)).collect();
        assert!((cells.iter().sum::<f64>() / 15.0 - num(&row[16])).abs() < 1e-9);
        assert_eq!(num(&row[17]), 0.9);
    }
    for c in 1..16 {
        let col: f64 = rows[..5].iter().map(|r| num(&r[c])).sum::<f64>() / 5.0;
        assert!((col - num(&rows[5][c])).abs() < 1e-9);
    }
    let by_rows: f64 = rows[..5].iter().map(|r| num(&r[16])).sum::<f64>() / 5.0;
    let by_cols: f64 = rows[5][1..16].iter().map(|s| num(s)).sum::<f64>() / 15.0;
    assert!((by_rows - num(&rows[5][16])).abs() < 1e-9);
    assert!((by_cols - num(&rows[5][16])).abs() < 1e-9);
}

#[test]
fn robustness_eval_rejects_misaligned_manifests() {
    let out = generate_dataset(&tiny_spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    build_corrupted_set(&out.dataset, dir.path(), 1, &[CorruptionKind::Contrast]).unwrap();
    let mut other = out.dataset.manifest.clone();
    let test_src = other.pairs.iter().position(|p| {
        other.image(&p.src).map(|e| e.split == Split::Test).unwrap_or(false)
    });
    other.pairs.remove(test_src.unwrap());
    let shifted = out.dataset.with_manifest(other).unwrap();
    let params = MatcherParams::identity(Default::default(), 0.02);
    let err = robustness_eval(&params, &dir.path().join("manifest.json"), &shifted, 0.1, PckNorm::Bbox).unwrap_err();
    assert!(matches!(err, Error::ManifestMismatch(_)));
}
