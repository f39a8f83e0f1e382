use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use registrar::geom::Frame;
use registrar::image_extract::{
    mean_shift_segment, refine_segments, rgb_to_lab, MeanShiftConfig, RefineConfig,
};
use registrar::lidar_extract::{extract_building_regions, ExtractionConfig};
use registrar::raster::Raster;
use registrar::synth::{generate_scene, GroundTruth, PointSource, Scene, SceneSpec};

/// Pixels whose center projects inside each building's roof, by id.
fn roof_masks(truth: &GroundTruth, frame: Frame) -> BTreeMap<usize, BTreeSet<(usize, usize)>> {
    let p = truth.pose.camera_matrix();
    let mut out = BTreeMap::new();
    for b in &truth.buildings {
        // Back-project each pixel onto the roof plane and test the footprint.
        let kinv = registrar::geom::inverse3(&truth.pose.calibration()).unwrap();
        let rt = registrar::geom::transpose(&truth.pose.rotation());
        let c = truth.pose.center();
        let corners = b.corners().map(|q| p.project([q[0], q[1], b.top]).unwrap());
        let (mut c0, mut c1, mut r0, mut r1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for q in corners {
            c0 = c0.min(q[0]);
            c1 = c1.max(q[0]);
            r0 = r0.min(q[1]);
            r1 = r1.max(q[1]);
        }
        let mut set = BTreeSet::new();
        for r in r0.floor().max(0.0) as usize..=(r1.ceil() as usize).min(frame.rows - 1) {
            for col in c0.floor().max(0.0) as usize..=(c1.ceil() as usize).min(frame.cols - 1) {
                let d = registrar::geom::mat_vec(
                    &rt,
                    registrar::geom::mat_vec(&kinv, [col as f64, r as f64, 1.0]),
                );
                let t = (b.top - c[2]) / d[2];
                if b.contains(c[0] + t * d[0], c[1] + t * d[1]) {
                    set.insert((r, col));
                }
            }
        }
        out.insert(b.id, set);
    }
    out
}

/// A building is recovered when one segment covers at least 90% of its roof
/// and at least 90% of that segment lies on the roof.
fn recovered(
    labels: &Raster<u32>,
    masks: &BTreeMap<usize, BTreeSet<(usize, usize)>>,
) -> Vec<usize> {
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels.data() {
        *sizes.entry(l).or_default() += 1;
    }
    let mut hits = Vec::new();
    for (&id, mask) in masks {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(r, c) in mask {
            *votes.entry(labels.get(r, c)).or_default() += 1;
        }
        let (&best, &n) = votes.iter().max_by_key(|(_, n)| **n).unwrap();
        let cover = n as f64 / mask.len() as f64;
        let purity = n as f64 / sizes[&best] as f64;
        if cover >= 0.9 && purity >= 0.9 {
            hits.push(id);
        }
    }
    hits
}

fn twelve_rectangles() -> Scene {
    let spec = SceneSpec {
        extent: [90.0, 80.0],
        layout_extent: [84.0, 72.0],
        building_count: 12,
        gable_fraction: 0.0,
        tree_count: 0,
        image_size: [600, 540],
        image_noise: 3.0,
        seed: 21,
        ..SceneSpec::default()
    };
    generate_scene(&spec).unwrap()
}

#[test]
fn twelve_rectangles_segment_individually() {
    let scene = twelve_rectangles();
    assert_eq!(scene.truth.buildings.len(), 12);
    let lab = rgb_to_lab::<f64>(&scene.image);
    let t = Instant::now();
    let labels = mean_shift_segment(&lab, &MeanShiftConfig::default()).unwrap();
    eprintln!(
        "mean shift on {}x{}: {:.2?}",
        lab.cols(),
        lab.rows(),
        t.elapsed()
    );
    let hits = recovered(&labels, &roof_masks(&scene.truth, scene.image.frame()));
    eprintln!("recovered {}/12: {hits:?}", hits.len());
    assert!(hits.len() >= 11, "{hits:?}");
}

#[test]
fn refined_segments_recall_on_full_scene() {
    let scene = generate_scene(&SceneSpec {
        image_noise: 3.0,
        ..SceneSpec::default()
    })
    .unwrap();
    let lab = rgb_to_lab::<f64>(&scene.image);
    let labels = mean_shift_segment(&lab, &MeanShiftConfig::default()).unwrap();
    let segs = refine_segments(&labels, scene.image.gsd, &RefineConfig::default()).unwrap();
    let masks = roof_masks(&scene.truth, scene.image.frame());
    let kept: BTreeSet<u32> = segs.iter().map(|s| s.id).collect();
    let mut found = 0;
    for mask in masks.values() {
        let mut votes: BTreeMap<u32, usize> = BTreeMap::new();
        for &(r, c) in mask {
            *votes.entry(labels.get(r, c)).or_default() += 1;
        }
        let (&best, &n) = votes.iter().max_by_key(|(_, n)| **n).unwrap();
        if kept.contains(&best) && n as f64 >= 0.8 * mask.len() as f64 {
            found += 1;
        }
    }
    let recall = found as f64 / masks.len() as f64;
    eprintln!("{} segments kept, building recall {recall:.3}", segs.len());
    assert!(recall >= 0.85, "recall {recall}");
}

#[test]
fn lidar_regions_follow_generator_truth() {
    let scene = generate_scene(&SceneSpec::default()).unwrap();
    let regions = extract_building_regions(&scene.cloud, &ExtractionConfig::default()).unwrap();
    let mut buildings = BTreeSet::new();
    let mut trees = 0;
    for r in &regions {
        let src: BTreeSet<PointSource> =
            r.members.iter().map(|&i| scene.truth.sources[i]).collect();
        assert_eq!(src.len(), 1, "region mixes sources: {src:?}");
        match src.first().unwrap() {
            PointSource::Building(b) => assert!(buildings.insert(*b)),
            PointSource::Tree(_) => trees += 1,
            s => panic!("ground source {s:?} in a region"),
        }
    }
    assert_eq!(buildings.len(), 28);
    // Every canopy above the relief threshold is found too.
    assert!(trees <= scene.truth.trees.len());
}
