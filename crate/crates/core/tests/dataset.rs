use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use eici::io::*;
use eici::quantifier::QuantConfig;
use eici::synthgen::{gen_samples, GeneratorSpec, LabelRule};

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn cohort_sized_dataset_has_requested_balance() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        seed: 7,
        ..GeneratorSpec::default()
    };
    gen_dataset(dir.path(), &spec, 139).unwrap();
    let m = Manifest::load(dir.path()).unwrap();
    assert_eq!(m.samples.len(), 139);
    let pos = m.samples.iter().filter(|e| e.label == 1).count();
    assert_eq!((pos, 139 - pos), (104, 35));
    let rows = read_tabular(&dir.path().join(TABULAR)).unwrap();
    assert_eq!(rows.len(), 139);
    assert!(rows.iter().all(TabularRow::is_complete));
}

#[test]
fn balance_within_ten_percent() {
    for (i, frac) in [0.2, 0.5, 0.75, 0.9].into_iter().enumerate() {
        let spec = GeneratorSpec {
            positive_fraction: frac,
            seed: i as u64,
            ..GeneratorSpec::default()
        };
        let s = gen_samples(&spec, 30).unwrap();
        let got = s.iter().filter(|x| x.label == 1).count() as f64 / 30.0;
        assert!((got - frac).abs() <= 0.1);
    }
}

#[test]
fn same_seed_gives_byte_identical_directory() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let spec = GeneratorSpec {
        seed: 11,
        ..GeneratorSpec::default()
    };
    gen_dataset(a.path(), &spec, 12).unwrap();
    gen_dataset(b.path(), &spec, 12).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    assert_eq!(ta.len(), 2 + 12 * 10);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    gen_dataset(c.path(), &GeneratorSpec { seed: 12, ..spec }, 12).unwrap();
    assert_ne!(ta, read_tree(c.path()));
}

#[test]
fn count_stump_separates_tabular_threshold_labels() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        label_rule: LabelRule::TabularThreshold,
        seed: 3,
        ..GeneratorSpec::default()
    };
    gen_dataset(dir.path(), &spec, 60).unwrap();
    let rows = read_tabular(&dir.path().join(TABULAR)).unwrap();
    let best = (0..=spec.max_count + 1)
        .map(|t| rows.iter().filter(|r| usize::from(r.cell_count.unwrap() >= t) == r.label).count())
        .max()
        .unwrap();
    assert_eq!(best, rows.len());
}

#[test]
fn blob_oracle_recovers_image_labels() {
    let spec = GeneratorSpec {
        label_rule: LabelRule::ImageBlob,
        positive_fraction: 0.5,
        seed: 4,
        ..GeneratorSpec::default()
    };
    let samples = gen_samples(&spec, 100).unwrap();
    let correct = samples
        .iter()
        .filter(|s| {
            let bright = s.ac[0].data().iter().filter(|&&v| v > 0.6).count();
            usize::from(bright >= 5) == s.label
        })
        .count();
    assert!(correct >= 95, "{correct} of 100");
}

#[test]
fn loaded_dataset_matches_generated_samples() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        seed: 21,
        ..GeneratorSpec::default()
    };
    let generated = gen_dataset(dir.path(), &spec, 10).unwrap();
    let loaded = load_dataset(dir.path(), &QuantConfig::default()).unwrap();
    for (g, l) in generated.iter().zip(&loaded.samples) {
        assert_eq!(g.id, l.id);
        assert_eq!(g.label, l.label);
        assert_eq!(g.record, l.record);
        assert_eq!(g.overall[0].data(), l.overall.images()[0].data());
        assert_eq!(g.ac[1].data(), l.ac.images()[1].data());
        let scans = load_scans(dir.path(), &loaded.manifest.samples[0]).unwrap();
        assert_eq!(scans.len(), 3);
    }
    let first = &loaded.manifest.samples[0];
    assert_eq!(first.truth.as_ref().unwrap(), &generated[0].truth);
}

#[test]
fn quantify_backfills_blank_columns() {
    let dir = tempfile::tempdir().unwrap();
    let spec = GeneratorSpec {
        seed: 2,
        ..GeneratorSpec::default()
    };
    gen_dataset(dir.path(), &spec, 10).unwrap();
    let tab = dir.path().join(TABULAR);
    let full = read_tabular(&tab).unwrap();
    let blanked: Vec<TabularRow> = full
        .iter()
        .cloned()
        .map(|mut r| {
            r.cell_area_mm2 = None;
            r.cell_count = None;
            r.ari = None;
            r
        })
        .collect();
    fs::write(&tab, format_tabular(&blanked)).unwrap();
    let on_the_fly = load_dataset(dir.path(), &QuantConfig::default()).unwrap();
    assert_eq!(on_the_fly.samples[3].record, full[3].record().unwrap());
    let results = quantify_dataset(dir.path(), &QuantConfig::default()).unwrap();
    assert_eq!(results.len(), 10);
    assert_eq!(read_tabular(&tab).unwrap(), full);
    assert_eq!(quant_csv(&results).lines().count(), 11);
}
