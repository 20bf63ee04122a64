use eici::quantifier::*;
use eici::rng::seeded;
use eici::synthgen::{gen_asoct, OctSpec};
use proptest::prelude::*;
use rand::Rng;

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, i: usize) -> usize {
        let mut r = i;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut i = i;
        while self.0[i] != r {
            let next = self.0[i];
            self.0[i] = r;
            i = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.0[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Pixel partition of `field` by brute-force union over all neighbor pairs.
fn oracle(field: &[bool], w: usize, h: usize, eight: bool) -> Vec<Vec<Pixel>> {
    let mut uf = UnionFind((0..w * h).collect());
    for y in 0..h {
        for x in 0..w {
            if !field[y * w + x] {
                continue;
            }
            for y2 in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for x2 in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    let diagonal = x2 != x && y2 != y;
                    if field[y2 * w + x2] && (eight || !diagonal) {
                        uf.union(y * w + x, y2 * w + x2);
                    }
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<Pixel>> = Default::default();
    for i in (0..w * h).filter(|&i| field[i]) {
        let r = uf.find(i);
        groups.entry(r).or_default().push(Pixel::new(i % w, i / w));
    }
    let mut out: Vec<Vec<Pixel>> = groups.into_values().collect();
    out.iter_mut().for_each(|c| c.sort());
    out.sort();
    out
}

#[test]
fn components_match_union_find_oracle() {
    for seed in 0..200u64 {
        let mut rng = seeded(seed);
        let (w, h) = (rng.random_range(1..40), rng.random_range(1..40));
        let density = rng.random_range(0.05..0.7);
        let field: Vec<bool> = (0..w * h).map(|_| rng.random_bool(density)).collect();
        for (conn, eight) in [(Connectivity::Eight, true), (Connectivity::Four, false)] {
            let mut got = label_components(&field, w, h, conn);
            got.sort();
            assert_eq!(got, oracle(&field, w, h, eight), "seed {seed} {conn:?}");
        }
    }
}

fn quiet() -> OctSpec {
    OctSpec {
        noise_sigma: 0.0,
        apex_jitter: 0,
        ..OctSpec::default()
    }
}

#[test]
fn noise_free_roundtrip_recovers_count_area_and_ari() {
    for k in 0..=20u32 {
        let (img, mask, truth) = gen_asoct(&quiet(), k, &mut seeded(100 + u64::from(k))).unwrap();
        let q = quantify_image(&img, &mask, &QuantConfig::default()).unwrap();
        assert_eq!(q.cell_count, k);
        assert!((q.ari - truth.ari).abs() <= 1e-12);
        assert_eq!(q.total_cell_area_mm2, truth.cell_pixels.len() as f64 * img.pixel_area_mm2());
    }
    let (img, mask, _) = gen_asoct(&quiet(), 0, &mut seeded(1)).unwrap();
    let q = quantify_image(&img, &mask, &QuantConfig::default()).unwrap();
    assert_eq!(q.ari, quiet().aqueous_level / quiet().air_level);
}

#[test]
fn noisy_count_is_recovered_in_almost_every_seed() {
    let spec = OctSpec::default();
    assert_eq!(spec.noise_sigma, 2.0);
    let hits = (0..1000u64)
        .filter(|&s| {
            let (img, mask, _) = gen_asoct(&spec, 5, &mut seeded(s)).unwrap();
            quantify_image(&img, &mask, &QuantConfig::default()).unwrap().cell_count == 5
        })
        .count();
    assert!(hits >= 990, "{hits} of 1000");
}

/// Levels low enough that tripled pixels stay within 8 bits.
fn dim() -> OctSpec {
    OctSpec {
        air_level: 12.0,
        aqueous_level: 18.0,
        cornea_level: 60.0,
        tissue_level: 40.0,
        cell_level: 75.0,
        noise_sigma: 0.6,
        ..OctSpec::default()
    }
}

#[test]
fn ari_is_invariant_to_intensity_scaling() {
    for seed in 0..20 {
        let (img, mask, _) = gen_asoct(&dim(), 6, &mut seeded(seed)).unwrap();
        let tripled = img.scaled(3.0).unwrap();
        let a = quantify_image(&img, &mask, &QuantConfig::default()).unwrap();
        let b = quantify_image(&tripled, &mask, &QuantConfig::default()).unwrap();
        assert!((a.ari - b.ari).abs() <= 1e-12, "seed {seed}");
        assert_eq!(a.cell_count, b.cell_count);
    }
}

/// Empty chamber render with its ROIs and relative threshold.
fn empty_scene() -> (AsOctImage, RoiGeometry, f64) {
    let (img, mask, _) = gen_asoct(&quiet(), 0, &mut seeded(3)).unwrap();
    let rois = place_rois(extract_boundary(&mask).unwrap(), img.calibration()).unwrap();
    let t = ThresholdRule::default().resolve(&img, &rois).unwrap();
    (img, rois, t)
}

fn paint(img: &AsOctImage, blobs: &[(usize, usize)]) -> AsOctImage {
    let mut px = img.pixels().to_vec();
    for &(x, y) in blobs {
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1), (2, 1)] {
            px[(y + dy) * img.width() + x + dx] = 220.0;
        }
    }
    AsOctImage::with_scan_calibration(img.width(), img.height(), px).unwrap()
}

fn blob_inside(rois: &RoiGeometry, x: usize, y: usize) -> bool {
    (0..=3).all(|dy| (0..=3).all(|dx| rois.contains_area1(Pixel::new(x + dx, y + dy))))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shifting_cells_within_area1_keeps_count_and_area(
        picks in prop::collection::vec((0usize..400, 0usize..100), 1..6),
        dx in -3isize..=3,
        dy in -3isize..=3,
    ) {
        let (img, rois, t) = empty_scene();
        // blobs on a coarse lattice stay apart after any small shift
        let mut blobs: Vec<(usize, usize)> = picks
            .iter()
            .map(|&(x, y)| (8 * (x / 8), 8 * (y / 8)))
            .filter(|&(x, y)| {
                let (sx, sy) = (x as isize + dx, y as isize + dy);
                sx >= 0 && sy >= 0 && blob_inside(&rois, x, y) && blob_inside(&rois, sx as usize, sy as usize)
            })
            .collect();
        blobs.sort();
        blobs.dedup();
        let moved: Vec<_> = blobs.iter().map(|&(x, y)| ((x as isize + dx) as usize, (y as isize + dy) as usize)).collect();
        let a = detect_cells(&paint(&img, &blobs), &rois, t, Connectivity::Eight).unwrap();
        let b = detect_cells(&paint(&img, &moved), &rois, t, Connectivity::Eight).unwrap();
        prop_assert_eq!(a.count, blobs.len());
        prop_assert_eq!(a.count, b.count);
        prop_assert_eq!(a.total_cell_area_mm2, b.total_cell_area_mm2);
    }

    #[test]
    fn raising_the_threshold_never_adds_candidates(seed in 0u64..10_000, t1 in 30.0f64..250.0, dt in 0.0f64..100.0) {
        let (img, mask, _) = gen_asoct(&OctSpec::default(), (seed % 12) as u32, &mut seeded(seed)).unwrap();
        let rois = place_rois(extract_boundary(&mask).unwrap(), img.calibration()).unwrap();
        let lo = detect_cells(&img, &rois, t1, Connectivity::Eight).unwrap();
        let hi = detect_cells(&img, &rois, t1 + dt, Connectivity::Eight).unwrap();
        prop_assert!(hi.candidate_pixels.len() <= lo.candidate_pixels.len());
    }
}
