use simreg::augmentation::{augment_pair, mixup_batch, BatchMixer, OpKind, Pipeline, RandomErasing, RandomResizedCrop};
use simreg::image::Image;
use simreg::rng::seeded;

fn test_image(h: usize, w: usize) -> Image {
    Image::from_fn(3, h, w, |c, y, x| ((c * 5 + y * 7 + x * 3) % 17) as f64 / 16.0)
}

#[test]
fn ladder_adds_one_transform_per_level() {
    use OpKind::*;
    let want: [&[OpKind]; 5] = [
        &[],
        &[RandomResizedCrop],
        &[RandomResizedCrop, HorizontalFlip],
        &[RandomResizedCrop, HorizontalFlip, RandAugment],
        &[RandomResizedCrop, HorizontalFlip, RandAugment, RandomErasing],
    ];
    for (level, kinds) in want.iter().enumerate() {
        let p = Pipeline::build(level as u8).unwrap();
        assert_eq!(p.kinds(), *kinds);
        assert!(p.mixer().is_none());
    }
    assert_eq!(Pipeline::build(5).unwrap().mixer(), Some(&BatchMixer::Mixup));
    assert!(matches!(
        Pipeline::build(6).unwrap().mixer(),
        Some(BatchMixer::MixupOrCutmix { cutmix_probability }) if *cutmix_probability == 0.5
    ));
    assert_eq!(Pipeline::build(6).unwrap().kinds().len(), 4);
    assert!(Pipeline::build(7).is_err());
}

#[test]
fn level_zero_pairs_are_rejected_and_level_one_views_differ() {
    let img = test_image(20, 20);
    assert!(augment_pair(&img, &Pipeline::build(0).unwrap(), &mut seeded(1)).is_err());
    let pair = augment_pair(&img, &Pipeline::build(1).unwrap(), &mut seeded(1)).unwrap();
    assert_ne!(pair.v1, pair.v2);
    let again = augment_pair(&img, &Pipeline::build(1).unwrap(), &mut seeded(1)).unwrap();
    assert_eq!(pair, again);
}

#[test]
fn unnormalized_chain_keeps_pixels_in_range_and_shape() {
    let img = test_image(24, 24);
    let p = Pipeline::build(3).unwrap();
    let mut rng = seeded(3);
    for _ in 0..200 {
        let out = p.apply(&img, &mut rng);
        assert_eq!(out.shape(), img.shape());
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

#[test]
fn crop_rectangles_respect_scale_and_ratio() {
    let crop = RandomResizedCrop::default();
    let mut rng = seeded(4);
    let (h, w) = (64, 64);
    for _ in 0..2000 {
        let r = crop.sample_rect(h, w, &mut rng);
        assert!(r.x + r.width <= w && r.y + r.height <= h);
        let frac = (r.width * r.height) as f64 / (h * w) as f64;
        // Rounding to whole pixels moves area and ratio slightly.
        assert!((0.06..=1.0).contains(&frac), "area fraction {frac}");
        let ratio = r.width as f64 / r.height as f64;
        assert!((0.6..=1.6).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn erased_rectangles_stay_inside_and_within_area_bounds() {
    let erase = RandomErasing {
        probability: 1.0,
        ..Default::default()
    };
    let img = test_image(40, 40);
    let mut rng = seeded(5);
    let mut hits = 0;
    for _ in 0..2000 {
        let (out, rect) = erase.apply_traced(&img, &mut rng);
        let Some(r) = rect else { continue };
        hits += 1;
        assert!(r.x + r.width <= 40 && r.y + r.height <= 40);
        let frac = (r.width * r.height) as f64 / 1600.0;
        assert!((0.01..=0.37).contains(&frac), "area fraction {frac}");
        for y in 0..40 {
            for x in 0..40 {
                let inside = (r.y..r.y + r.height).contains(&y) && (r.x..r.x + r.width).contains(&x);
                if !inside {
                    assert_eq!(out.get(0, y, x), img.get(0, y, x));
                }
            }
        }
    }
    assert!(hits > 1900, "only {hits} rectangles fitted");
}

#[test]
fn mixup_blends_pixels_and_labels_with_one_lambda() {
    let batch: Vec<(Image, usize)> = (0..4)
        .map(|i| (Image::from_fn(3, 6, 6, |c, y, x| ((i + c + y * x) % 5) as f64 / 4.0), i))
        .collect();
    let mixed = mixup_batch(&batch, &mut seeded(6));
    let lambda = mixed[0].lambda;
    for (i, m) in mixed.iter().enumerate() {
        assert_eq!(m.lambda, lambda);
        assert_eq!(m.label_a, i);
        assert_ne!(m.label_b, i);
        let partner = &batch[m.label_b].0;
        for (k, v) in m.image.data().iter().enumerate() {
            let want = lambda * batch[i].0.data()[k] + (1.0 - lambda) * partner.data()[k];
            assert!((v - want).abs() <= 1e-12);
        }
    }
}
