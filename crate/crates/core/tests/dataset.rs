use proptest::prelude::*;
use qpi_core::dataset::*;
use qpi_core::optics::{NM, UM};
use qpi_core::RealImage;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PITCH: f64 = 0.5 * UM;

fn small_spec(seed: u64) -> SimulationSpec {
    SimulationSpec { seed, ..Default::default() }
}

#[test]
fn noise_has_requested_std() {
    let ones = RealImage::constant(256, 256, PITCH, 1.0).unwrap();
    let noisy = add_noise(&ones, 0.1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let v = noisy.data();
    let n = v.len() as f64;
    let m = v.sum() / n;
    let s = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    assert!((0.09..=0.11).contains(&s), "{s}");
    assert!(add_noise(&ones, -0.1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
}

#[test]
fn parallel_generation_matches_serial() {
    let sources = procedural_sources(6, 32, 32, PITCH, 1).unwrap();
    let spec = small_spec(42);
    let par = simulate_dataset(&sources, &spec).unwrap();
    for (i, (src, s)) in sources.iter().zip(&par).enumerate() {
        let phase = phase_from_grayscale(src, spec.phase_max);
        let serial = simulate_sample(&phase, &spec, sample_seed(spec.seed, i as u64)).unwrap();
        assert_eq!(&serial, s);
    }
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let one = pool.install(|| simulate_dataset(&sources, &spec).unwrap());
    assert_eq!(one, par);
}

#[test]
fn samples_respect_ranges() {
    let sources = procedural_sources(9, 32, 32, PITCH, 2).unwrap();
    let spec = small_spec(3);
    for s in simulate_dataset(&sources, &spec).unwrap() {
        assert!((spec.z_range.0..=spec.z_range.1).contains(&s.z));
        for w in s.sigma_c_used {
            assert!((10.0 * NM..=100.0 * NM).contains(&w));
        }
        assert!(s.y.min() >= 0.0 && s.y.max() <= spec.phase_max + 1e-12);
        assert!(s.x.iter().all(|c| c.min() >= 0.0));
    }
}

#[test]
fn per_run_defocus_is_shared() {
    let sources = procedural_sources(4, 16, 16, PITCH, 0).unwrap();
    let spec = SimulationSpec { z_per_run: true, ..small_spec(8) };
    let set = simulate_dataset(&sources, &spec).unwrap();
    assert!(set.iter().all(|s| s.z == run_defocus(&spec)));
}

#[test]
fn dataset_container_roundtrip() {
    let sources = procedural_sources(3, 16, 16, PITCH, 4).unwrap();
    let set = simulate_dataset(&sources, &small_spec(5)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("set.zmds");
    write_dataset(&set, &path).unwrap();
    assert_eq!(read_dataset(&path).unwrap(), set);
    let bytes = std::fs::read(&path).unwrap();
    assert!(read_dataset_from_bytes(&bytes[..bytes.len() - 1]).is_err());
}

#[test]
fn grayscale_png_loads_into_unit_range() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("g.png");
    let img = image::ImageBuffer::from_fn(20, 10, |x, y| image::Luma([(x * 3000 + y * 100) as u16]));
    img.save(&path).unwrap();
    let loaded = load_grayscale(&path, PITCH).unwrap();
    assert_eq!((loaded.width(), loaded.height()), (20, 10));
    assert_eq!(loaded.data()[[0, 0]], 0.0);
    assert!((loaded.data()[[9, 19]] - (19.0 * 3000.0 + 900.0) / 65535.0).abs() < 1e-12);
    assert!(load_grayscale(dir.path().join("missing.png"), PITCH).is_err());
}

#[test]
fn invalid_specs_are_rejected() {
    let src = procedural_image(Procedural::Blobs, 16, 16, PITCH, 0).unwrap();
    let phase = phase_from_grayscale(&src, 1.0);
    let bad = [
        SimulationSpec { phase_max: 0.0, ..Default::default() },
        SimulationSpec { z_range: (2.0 * UM, 1.0 * UM), ..Default::default() },
        SimulationSpec { sigma_c_range: (0.0, 1.0 * NM), ..Default::default() },
        SimulationSpec { noise_sigma: f64::NAN, ..Default::default() },
        SimulationSpec { channel_centers: [630.0 * NM, 550.0 * NM, 100.0 * NM], ..Default::default() },
    ];
    for spec in bad {
        assert!(simulate_sample(&phase, &spec, 0).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn phase_mapping_spans_range(seed in any::<u64>(), pmax in 0.1f64..6.0) {
        let kind = Procedural::ALL[(seed % 3) as usize];
        let src = procedural_image(kind, 16, 16, PITCH, seed).unwrap();
        prop_assert!(src.min() >= 0.0 && src.max() <= 1.0);
        let p = phase_from_grayscale(&src, pmax);
        prop_assert!(p.min().abs() < 1e-12);
        prop_assert!((p.max() - pmax).abs() < 1e-9);
    }

    #[test]
    fn sample_seeds_are_distinct(seed in any::<u64>(), a in 0u64..1000, b in 0u64..1000) {
        prop_assume!(a != b);
        prop_assert_ne!(sample_seed(seed, a), sample_seed(seed, b));
    }
}
