mod common;

use image::{Rgb, RgbImage};
use mtcolor_core::color::PALETTE;
use mtcolor_core::data::pipeline::*;
use mtcolor_core::data::*;
use mtcolor_core::mask::{InstanceMask, MaskSet};
use mtcolor_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig { count: 40, seed, ..Default::default() }
}

#[test]
fn synthetic_data_is_deterministic() {
    let a = generate_synthetic(&small_cfg(3)).unwrap();
    let b = generate_synthetic(&small_cfg(3)).unwrap();
    assert_eq!(a.len(), 40);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image, y.image);
        assert_eq!(x.annotation, y.annotation);
    }
    let c = generate_synthetic(&small_cfg(4)).unwrap();
    assert!(a.iter().zip(&c).any(|(x, y)| x.image != y.image));
}

#[test]
fn synthetic_masks_are_disjoint_and_colors_match() {
    for scene in generate_synthetic(&small_cfg(5)).unwrap() {
        let ann = &scene.annotation;
        let set = ann.mask_set().unwrap();
        assert!(!set.is_empty());
        for i in 0..set.len() {
            for j in i + 1..set.len() {
                assert!(set.get(i).and(set.get(j)).is_empty());
            }
        }
        for (k, inst) in ann.instances.iter().enumerate() {
            let color = PALETTE[scene.colors[k]];
            assert!(inst.text.starts_with(&format!("a {} ", color.name)), "{}", inst.text);
            let m = set.get(k);
            let mut sum = [0.0; 3];
            for (_, p) in scene.image.pixels().enumerate().filter(|(i, _)| m.get(*i)) {
                for c in 0..3 {
                    sum[c] += p[c] as f64;
                }
            }
            let n = m.count() as f64;
            let dist = (0..3).map(|c| (sum[c] / n - color.rgb[c] as f64).powi(2)).sum::<f64>().sqrt();
            assert!(dist <= 25.0, "instance {k} off by {dist}");
        }
        assert!(ann.global_text.contains("gray background"));
        for inst in &ann.instances {
            assert!(ann.global_text.contains(&inst.text));
        }
    }
}

#[test]
fn invalid_synth_config() {
    assert!(generate_synthetic(&SynthConfig { min_radius: 9, ..Default::default() }).is_err());
    assert!(generate_synthetic(&SynthConfig { min_shapes: 0, ..Default::default() }).is_err());
}

#[test]
fn annotation_file_round_trip_fuzz() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.jsonl");
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let records: Vec<_> = (0..100).map(|i| common::random_record(&mut rng, i)).collect();
    write_annotations(&records, &path).unwrap();
    let back = read_annotations(&path).unwrap();
    assert_eq!(back, records);
    for (a, b) in records.iter().zip(&back) {
        for (x, y) in a.instances.iter().zip(&b.instances) {
            assert_eq!(x.mask.decode().unwrap(), y.mask.decode().unwrap());
        }
    }
}

#[test]
fn empty_dataset_is_an_empty_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("e.jsonl");
    write_annotations(&[], &path).unwrap();
    assert!(std::fs::read_to_string(&path).unwrap().trim().is_empty());
    assert!(read_annotations(&path).unwrap().is_empty());
}

#[test]
fn schema_errors_name_the_field() {
    let good = to_jsonl(&[generate_synthetic(&small_cfg(1)).unwrap()[0].annotation.clone()]).unwrap();
    let mut v: serde_json::Value = serde_json::from_str(good.lines().next().unwrap()).unwrap();
    v["instances"][0].as_object_mut().unwrap().remove("mask");
    let text = format!("{}\n{}", good.trim(), v);
    match from_jsonl(&text) {
        Err(Error::Schema { record, field, .. }) => {
            assert_eq!(record, 1);
            assert_eq!(field, "instances[0].mask");
        }
        other => panic!("expected schema error, got {other:?}"),
    }
    let mut v: serde_json::Value = serde_json::from_str(good.lines().next().unwrap()).unwrap();
    v["instances"][0]["mask"]["runs"] = serde_json::json!([1, 2]);
    match from_jsonl(&v.to_string()) {
        Err(Error::Schema { field, .. }) => assert_eq!(field, "instances[0].mask.runs"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn dataset_directory_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let items: Vec<_> = generate_synthetic(&small_cfg(2)).unwrap().into_iter().take(5).map(|s| (s.image, s.annotation)).collect();
    save_dataset(dir.path(), &items).unwrap();
    assert_eq!(load_dataset(dir.path()).unwrap(), items);
}

fn checker(w: u32, h: u32) -> RgbImage {
    RgbImage::from_fn(w, h, |x, y| Rgb([(x * 20) as u8, (y * 20) as u8, ((x + y) * 7) as u8]))
}

#[test]
fn crops() {
    let img = checker(6, 5);
    assert_eq!(crop_instance(&img, &InstanceMask::ones(6, 5)).unwrap(), img);
    let one = crop_instance(&img, &InstanceMask::from_indices(6, 5, &[2 * 6 + 3]).unwrap()).unwrap();
    assert_eq!(one.dimensions(), (1, 1));
    assert_eq!(one.get_pixel(0, 0), img.get_pixel(3, 2));
    // L: column x = 1 for y in 1..=3 plus row y = 3 for x in 1..=4.
    let l = InstanceMask::from_fn(6, 5, |x, y| (x == 1 && (1..=3).contains(&y)) || (y == 3 && (1..=4).contains(&x)));
    let c = crop_instance(&img, &l).unwrap();
    assert_eq!(c.dimensions(), (4, 3));
    for (x, y, p) in c.enumerate_pixels() {
        let (sx, sy) = (x as usize + 1, y as usize + 1);
        if l.at(sx, sy) {
            assert_eq!(p, img.get_pixel(sx as u32, sy as u32));
        } else {
            assert_eq!(p.0, [128, 128, 128]);
        }
    }
    assert!(crop_instance(&img, &InstanceMask::zeros(6, 5)).is_err());
}

#[test]
fn caption_validation() {
    let r = CaptionRules::default();
    assert_eq!(validate_caption("a red apple", &r), Ok(()));
    assert!(matches!(
        validate_caption("Unable to provide color description, image is too blurred and unclear.", &r),
        Err(InvalidCaption::Refusal(_))
    ));
    assert_eq!(validate_caption("an apple", &r), Err(InvalidCaption::NoColorWord));
    assert_eq!(validate_caption("", &r), Err(InvalidCaption::Empty));
    assert_eq!(validate_caption("A BLUE Car", &r), Ok(()));
    let custom = CaptionRules { refusals: vec!["sorry".into()], ..Default::default() };
    assert!(validate_caption("sorry, a red thing", &custom).is_err());
    assert!(validate_caption("a red thing, too blurred", &custom).is_ok());
}

/// Gray 20×20 image with two large and two small colored rectangles.
fn fixture() -> (RgbImage, MaskSet) {
    let rects = [(1, 1, 8, 8, 0), (12, 1, 3, 3, 2), (12, 8, 2, 4, 1), (1, 12, 6, 6, 3)];
    let mut img = RgbImage::from_pixel(20, 20, Rgb([120, 120, 120]));
    let mut masks = Vec::new();
    for (x0, y0, w, h, color) in rects {
        let m = InstanceMask::from_fn(20, 20, |x, y| (x0..x0 + w).contains(&x) && (y0..y0 + h).contains(&y));
        for i in 0..400 {
            if m.get(i) {
                img.put_pixel((i % 20) as u32, (i / 20) as u32, Rgb(PALETTE[color].rgb));
            }
        }
        masks.push(m);
    }
    (img, MaskSet::new(20, 20, masks).unwrap())
}

fn detector(masks: &MaskSet) -> GroundTruthDetector {
    GroundTruthDetector::new(masks.clone(), vec!["object".into(); masks.len()]).unwrap()
}

#[test]
fn valid_primary_never_calls_fallback() {
    let (img, masks) = fixture();
    let (primary, fallback) = (PaletteCaptioner::new(), PaletteCaptioner::new());
    let (ann, prov) = annotate_image("x", &img, &detector(&masks), &primary, &fallback, &CaptionRules::default()).unwrap();
    assert_eq!(fallback.calls(), 0);
    assert_eq!(primary.calls(), 5);
    assert_eq!(prov.count(TextSource::Primary), 4);
    assert_eq!(prov.global.source, TextSource::Primary);
    assert_eq!(ann.instances[0].text, "a red object");
    assert_eq!(ann.mask_set().unwrap(), masks);
}

#[test]
fn refusals_route_everything_to_fallback() {
    let (img, masks) = fixture();
    let primary = FixedCaptioner::new("Unable to provide color description, image is too blurred and unclear.");
    let fallback = PaletteCaptioner::new();
    let (_, prov) = annotate_image("x", &img, &detector(&masks), &primary, &fallback, &CaptionRules::default()).unwrap();
    assert_eq!((primary.calls(), fallback.calls()), (5, 5));
    assert_eq!(prov.count(TextSource::Fallback), 4);
    assert_eq!(prov.global.source, TextSource::Fallback);
    assert!(prov.instances.iter().all(|p| p.reasons.len() == 1 && p.reasons[0].contains("refusal")));
}

#[test]
fn small_crops_fall_back() {
    let (img, masks) = fixture();
    let primary = SmallCropFailCaptioner::new(5);
    let fallback = PaletteCaptioner::new();
    let (ann, prov) = annotate_image("x", &img, &detector(&masks), &primary, &fallback, &CaptionRules::default()).unwrap();
    let sources: Vec<_> = prov.instances.iter().map(|p| p.source).collect();
    assert_eq!(sources, [TextSource::Primary, TextSource::Fallback, TextSource::Fallback, TextSource::Primary]);
    assert_eq!((primary.calls(), fallback.calls()), (5, 2));
    assert_eq!(ann.instances[1].text, "a blue object");
}

#[test]
fn double_failure_leaves_empty_text() {
    let (img, masks) = fixture();
    let (primary, fallback) = (FailingCaptioner::new(), FixedCaptioner::new("an object"));
    let (ann, prov) = annotate_image("x", &img, &detector(&masks), &primary, &fallback, &CaptionRules::default()).unwrap();
    assert_eq!(prov.count(TextSource::None), 4);
    assert!(ann.instances.iter().all(|i| i.text.is_empty()));
    assert!(ann.global_text.is_empty());
    assert!(prov.instances.iter().all(|p| p.reasons.len() == 2));
}

#[test]
fn detector_failure_aborts() {
    let (img, _) = fixture();
    let (primary, fallback) = (PaletteCaptioner::new(), PaletteCaptioner::new());
    assert!(annotate_image("x", &img, &FailingDetector, &primary, &fallback, &CaptionRules::default()).is_err());
    assert_eq!(primary.calls(), 0);
}

#[test]
fn color_region_detector_finds_the_rectangles() {
    let (img, masks) = fixture();
    let det = ColorRegionDetector { min_pixels: 1 }.detect(&img).unwrap();
    assert_eq!(det.masks, masks);
    let images: Vec<_> = (0..3).map(|i| (format!("img{i}"), img.clone())).collect();
    let (primary, fallback) = (PaletteCaptioner::new(), PaletteCaptioner::new());
    let out = annotate_all(&images, &ColorRegionDetector::default(), &primary, &fallback, &CaptionRules::default()).unwrap();
    assert_eq!(out.iter().map(|(a, _)| a.image_id.as_str()).collect::<Vec<_>>(), ["img0", "img1", "img2"]);
    assert_eq!(primary.calls(), 15);
}
