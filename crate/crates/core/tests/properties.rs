use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use graphonomy::metrics::{panoptic_quality, ConfusionMatrix, Segment};
use graphonomy::params::{load_checkpoint, save_checkpoint, ParamStore};
use graphonomy::reasoning::normalize_adjacency;
use graphonomy::sampler::UniversalSampler;
use graphonomy::synth::{check_hierarchy, relabel_granularity, GenSpec};
use graphonomy::taxonomy::LabelTaxonomy;
use graphonomy::tensor::Tensor;
use graphonomy::Error;
use proptest::prelude::*;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn parsing_spec(seed: u64, side: usize) -> GenSpec {
    let mut spec = GenSpec::load(root().join("configs/gen_parsing.json")).unwrap();
    spec.seed = seed;
    spec.height = side;
    spec.width = side;
    spec
}

fn symmetric(n: usize, bits: &[bool]) -> Tensor {
    let mut a = Tensor::zeros(&[n, n]);
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            if bits[k % bits.len()] {
                a.set(i, j, 1.0);
                a.set(j, i, 1.0);
            }
            k += 1;
        }
    }
    a
}

/// One segment per class present in a label map.
fn segments(map: &[usize]) -> Vec<Segment> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (p, &c) in map.iter().enumerate() {
        by_class.entry(c).or_default().push(p);
    }
    by_class
        .into_iter()
        .enumerate()
        .map(|(i, (c, px))| Segment::new(c, i as u32, px))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn normalized_adjacency_is_symmetric_with_degree_eigenvector(
        n in 1usize..9,
        bits in prop::collection::vec(any::<bool>(), 1..40),
    ) {
        let a = symmetric(n, &bits);
        let norm = normalize_adjacency(&a).unwrap();
        let degree: Vec<f64> = (0..n).map(|i| 1.0 + a.row(i).iter().sum::<f64>()).collect();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(norm.get(i, j), norm.get(j, i));
                prop_assert!(norm.get(i, j) >= 0.0 && norm.get(i, j) <= 1.0);
            }
            let av: f64 = (0..n).map(|j| norm.get(i, j) * degree[j].sqrt()).sum();
            prop_assert!((av - degree[i].sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn asymmetric_adjacency_is_rejected(n in 2usize..7, i in 0usize..7, j in 0usize..7) {
        let (i, j) = (i % n, j % n);
        prop_assume!(i != j);
        let mut a = Tensor::zeros(&[n, n]);
        a.set(i, j, 1.0);
        prop_assert!(matches!(normalize_adjacency(&a), Err(Error::Contract(_))));
    }

    #[test]
    fn confusion_totals_and_bounds(
        classes in 1usize..8,
        pairs in prop::collection::vec((0usize..8, 0usize..8), 1..200),
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0 % classes).collect();
        let gt: Vec<usize> = pairs.iter().map(|p| p.1 % classes).collect();
        let mut cm = ConfusionMatrix::new(classes);
        cm.add(&pred, &gt).unwrap();
        prop_assert_eq!(cm.total(), pairs.len() as u64);
        let row_sum: u64 = (0..classes).flat_map(|g| (0..classes).map(move |p| (g, p))).map(|(g, p)| cm.get(g, p)).sum();
        prop_assert_eq!(row_sum, cm.total());
        let r = cm.report();
        prop_assert!((0.0..=1.0).contains(&r.miou));
        prop_assert!((0.0..=1.0).contains(&r.accuracy));
        let agree = pred.iter().zip(&gt).filter(|(a, b)| a == b).count();
        prop_assert!((r.accuracy - agree as f64 / pairs.len() as f64).abs() < 1e-12);

        let mut perfect = ConfusionMatrix::new(classes);
        perfect.add(&gt, &gt).unwrap();
        prop_assert_eq!(perfect.report().miou, 1.0);
    }

    #[test]
    fn pq_is_bounded_and_perfect_on_identity(
        gt_map in prop::collection::vec(0usize..4, 1..64),
        noise in prop::collection::vec(0usize..4, 1..64),
    ) {
        let pred_map: Vec<usize> = gt_map.iter().zip(noise.iter().cycle()).map(|(&g, &n)| if n == 0 { (g + 1) % 4 } else { g }).collect();
        let (gt, pred) = (segments(&gt_map), segments(&pred_map));
        let r = panoptic_quality(&pred, &gt, |c| c >= 2).unwrap();
        let pq = r.pq.unwrap();
        prop_assert!((0.0..=1.0).contains(&pq));
        prop_assert_eq!(r.thing.tp + r.stuff.tp + r.thing.fn_ + r.stuff.fn_, gt.len());
        prop_assert_eq!(r.thing.tp + r.stuff.tp + r.thing.fp + r.stuff.fp, pred.len());
        let same = panoptic_quality(&gt, &gt, |c| c >= 2).unwrap();
        prop_assert_eq!(same.pq, Some(1.0));
    }

    #[test]
    fn sampler_tracks_pool_ratio(
        sizes in prop::collection::vec(0usize..12, 1..5),
        batch in 1usize..4,
        seed in any::<u64>(),
    ) {
        let total: usize = sizes.iter().sum();
        prop_assume!(total > 0);
        let mut sampler = UniversalSampler::new(&sizes, batch, seed).unwrap();
        let mut counts = vec![0usize; sizes.len()];
        for _ in 0..2 * total {
            let b = sampler.next_batch();
            prop_assert_eq!(b.indices.len(), batch);
            prop_assert!(b.indices.iter().all(|&i| i < sizes[b.pool]));
            counts[b.pool] += 1;
        }
        let doubled: Vec<usize> = sizes.iter().map(|s| 2 * s).collect();
        prop_assert_eq!(counts, doubled);
    }

    #[test]
    fn checkpoints_round_trip_bit_exact(
        values in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 1..30),
        frozen in any::<bool>(),
    ) {
        let mut store = ParamStore::new();
        store.add_param("w", Tensor::new(vec![values.len()], values.clone()).unwrap()).unwrap();
        store.add_buffer("b", Tensor::new(vec![1, values.len()], values.iter().map(|v| -v).collect()).unwrap()).unwrap();
        if frozen {
            store.freeze_all();
        }
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("ck.bin");
        let saved = save_checkpoint(&bin, &store, serde_json::json!({"k": 1}), serde_json::Value::Null).unwrap();
        let (loaded, manifest) = load_checkpoint(&bin).unwrap();
        prop_assert_eq!(&manifest.sha256, &saved.sha256);
        for name in ["w", "b"] {
            prop_assert!(loaded.get(name).unwrap().bit_eq(store.get(name).unwrap()));
            prop_assert_eq!(loaded.is_frozen(name).unwrap(), frozen);
        }
        prop_assert_eq!(loaded.checksum_all(), store.checksum_all());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn generated_scenes_respect_the_hierarchy(seed in any::<u64>(), index in 0usize..50) {
        let spec = parsing_spec(seed, 12);
        let generator = spec.generator().unwrap();
        for d in &spec.domains {
            let scene = generator.scene(&spec.dataset(d, "train").unwrap(), index).unwrap();
            let taxonomy = LabelTaxonomy::load(spec.taxonomy.as_ref().unwrap()).unwrap();
            prop_assert!(check_hierarchy(&scene, &taxonomy).is_ok());
            let fine = scene.label_map("fine").unwrap();
            prop_assert_eq!(relabel_granularity(fine, "fine", "fine", &taxonomy).unwrap(), fine.to_vec());
            let coarse = relabel_granularity(fine, "fine", "coarse", &taxonomy).unwrap();
            prop_assert_eq!(coarse.as_slice(), scene.label_map("coarse").unwrap());
        }
    }
}

#[test]
fn every_label_shows_up_in_enough_scenes() {
    let spec = parsing_spec(7, 24);
    let generator = spec.generator().unwrap();
    let taxonomy = LabelTaxonomy::load(spec.taxonomy.as_ref().unwrap()).unwrap();
    let data = spec.dataset("fine", "train").unwrap();
    let scenes: Vec<_> = (0..100).map(|i| generator.scene(&data, i).unwrap()).collect();
    for d in taxonomy.domains() {
        for (c, name) in d.labels.iter().enumerate() {
            let hits = scenes
                .iter()
                .filter(|s| s.label_map(&d.name).unwrap().contains(&c))
                .count();
            assert!(hits >= 5, "{}:{name} appears in {hits} of 100 scenes", d.name);
        }
    }
}
