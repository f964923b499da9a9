use proptest::prelude::*;

use rfnns::attack::{apply_exact, AttackKind, AttackSpec};
use rfnns::config::{parse_config_str, RunConfig};
use rfnns::image::{load_image, save_image, ImageTensor, Tensor};
use rfnns::metrics::ssim;
use rfnns::texture::{block_entropy, select_blocks};

/// Images over a small palette, so that equal luminances (LBP ties) occur.
fn palette_image(side: usize) -> impl Strategy<Value = ImageTensor> {
    (
        prop::collection::vec(prop::array::uniform3(0.02f64..1.0), 2..6),
        prop::collection::vec(any::<u8>(), side * side),
    )
        .prop_map(move |(palette, picks)| {
            ImageTensor::new(Tensor::from_fn(3, side, side, |c, y, x| {
                palette[picks[y * side + x] as usize % palette.len()][c]
            }))
            .unwrap()
        })
}

fn eight_bit_image(side: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(any::<u8>(), 3 * side * side).prop_map(move |d| {
        ImageTensor::from_vec(3, side, side, d.into_iter().map(|v| f64::from(v) / 255.0).collect()).unwrap()
    })
}

fn unit_image(c: usize, side: usize) -> impl Strategy<Value = ImageTensor> {
    prop::collection::vec(0.0f64..=1.0, c * side * side)
        .prop_map(move |d| ImageTensor::from_vec(c, side, side, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masks_nest_as_threshold_grows(img in palette_image(32), t1 in 0.0f64..8.0, t2 in 0.0f64..8.0) {
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let (_, loose) = select_blocks(&img, 8, lo).unwrap();
        let (_, strict) = select_blocks(&img, 8, hi).unwrap();
        for (s, l) in strict.selected.iter().zip(&loose.selected) {
            prop_assert!(!s || *l);
        }
    }

    #[test]
    fn mask_ignores_luminance_scaling(img in palette_image(32), k in 0.05f64..1.0, t in 0.0f64..6.0) {
        let scaled = ImageTensor::new(img.tensor().scale(k)).unwrap();
        let (a_map, a) = select_blocks(&img, 8, t).unwrap();
        let (b_map, b) = select_blocks(&scaled, 8, t).unwrap();
        prop_assert_eq!(a, b);
        prop_assert_eq!(a_map, b_map);
    }

    #[test]
    fn mask_ignores_scaling_of_eight_bit_images(img in eight_bit_image(32), k in 0.05f64..1.0, t in 0.0f64..6.0) {
        let scaled = ImageTensor::new(img.tensor().scale(k)).unwrap();
        prop_assert_eq!(select_blocks(&img, 8, t).unwrap(), select_blocks(&scaled, 8, t).unwrap());
    }

    #[test]
    fn entropy_ignores_code_order(mut codes in prop::collection::vec(any::<u8>(), 1..200), seed in any::<u64>()) {
        let before = block_entropy(&codes).unwrap();
        let mut s = rfnns::keyed::derive_stream(seed, "shuffle");
        for i in (1..codes.len()).rev() {
            let j = (s.next_u64() % (i as u64 + 1)) as usize;
            codes.swap(i, j);
        }
        prop_assert_eq!(before, block_entropy(&codes).unwrap());
        prop_assert!((0.0..=8.0).contains(&before));
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(a in unit_image(3, 12), b in unit_image(3, 12)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert_eq!(ab, ssim(&b, &a).unwrap());
        prop_assert!((-1.0..=1.0).contains(&ab));
    }

    #[test]
    fn png_save_load_is_idempotent(img in unit_image(3, 9)) {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.png"), dir.path().join("b.png"));
        save_image(&img, &p1, 8).unwrap();
        let once = load_image(&p1).unwrap();
        prop_assert_eq!(&once, &img.quantize8());
        save_image(&once, &p2, 8).unwrap();
        prop_assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        prop_assert_eq!(load_image(&p2).unwrap(), once);
    }

    #[test]
    fn attacks_stay_in_unit_range(img in unit_image(3, 16), kind in 0usize..7, u in 0.0f64..1.0, seed in any::<u64>()) {
        let kind = AttackKind::ALL[kind];
        let param = match kind {
            AttackKind::Identity => 0.0,
            AttackKind::Jpeg => 10.0 + 90.0 * u,
            AttackKind::GaussianNoise => 0.1 * u,
            AttackKind::Contrast => 0.2 + 1.6 * u,
            AttackKind::Scaling => 0.25 + 0.75 * u,
            AttackKind::Rotation => 90.0 * u - 45.0,
            AttackKind::GaussianBlur => 0.3 + 2.0 * u,
        };
        let spec = AttackSpec::new(kind, param).unwrap().with_seed(seed);
        let out = apply_exact(&spec, &img).unwrap();
        prop_assert_eq!(out.shape(), img.shape());
        prop_assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn config_text_round_trips(mu in 0.01f64..1.0, iterations in 1usize..5000, kc in any::<u64>(), robust in any::<bool>()) {
        let mut cfg = RunConfig::default();
        cfg.set("mu", &mu.to_string()).unwrap();
        cfg.set("iterations", &iterations.to_string()).unwrap();
        cfg.set("cover_key", &kc.to_string()).unwrap();
        cfg.set("robust", &robust.to_string()).unwrap();
        let again = parse_config_str(&cfg.to_text()).unwrap();
        prop_assert_eq!(again.embed_config().unwrap(), cfg.embed_config().unwrap());
    }
}
