use proptest::prelude::*;
use vton_core::config::DataConfig;
use vton_core::data::{build_dataset, generate, load_dataset, tryon_region};

fn small(seed: u64) -> DataConfig {
    DataConfig {
        count: 4,
        replicas_per_hub: 3,
        seed,
        ..DataConfig::default()
    }
}

#[test]
fn pseudo_inputs_match_person_outside_region() {
    let cfg = DataConfig::default();
    let samples = generate(&cfg).unwrap();
    assert_eq!(samples.len(), 16);
    for s in &samples {
        assert_eq!(s.pseudo.len(), cfg.n_hubs * cfg.replicas_per_hub);
        for p in &s.pseudo {
            assert!(!p.garment.same_garment(&s.garment_spec));
            let region = tryon_region(&s.person_spec, &s.garment_spec, &p.garment, cfg.height, cfg.width);
            for (i, &inside) in region.iter().enumerate() {
                if !inside {
                    let (y, x) = (i / cfg.width, i % cfg.width);
                    assert_eq!(p.image.get(y, x), s.person.get(y, x));
                }
            }
        }
    }
}

#[test]
fn generation_is_deterministic() {
    assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
    assert_ne!(generate(&small(3)).unwrap()[0].person, generate(&small(4)).unwrap()[0].person);
}

#[test]
fn disk_round_trip_is_lossless_and_byte_stable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = small(1);
    build_dataset(&cfg, a.path()).unwrap();
    build_dataset(&cfg, b.path()).unwrap();
    let (manifest, loaded) = load_dataset(a.path()).unwrap();
    assert_eq!(manifest.samples.len(), 4);
    assert_eq!(loaded, generate(&cfg).unwrap());
    for name in ["manifest.json", "images/P_0000.ppm", "images/pseudo_0003_h3_r02.ppm"] {
        assert_eq!(std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
    }
}

#[test]
fn invalid_config_is_rejected() {
    assert!(generate(&DataConfig {
        count: 0,
        ..DataConfig::default()
    })
    .is_err());
    assert!(generate(&DataConfig {
        height: 8,
        ..DataConfig::default()
    })
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]
    #[test]
    fn fidelity_holds_for_any_seed(seed in 0u64..10_000) {
        let cfg = DataConfig { count: 2, replicas_per_hub: 2, seed, ..DataConfig::default() };
        for s in generate(&cfg).unwrap() {
            for p in &s.pseudo {
                let region = tryon_region(&s.person_spec, &s.garment_spec, &p.garment, cfg.height, cfg.width);
                for (i, &inside) in region.iter().enumerate() {
                    if !inside {
                        prop_assert_eq!(p.image.data()[3 * i..3 * i + 3].to_vec(), s.person.data()[3 * i..3 * i + 3].to_vec());
                    }
                }
            }
        }
    }
}
