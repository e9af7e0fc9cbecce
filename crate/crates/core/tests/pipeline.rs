use std::path::Path;

use weakseg::compositor::{make_fake_negative, make_fake_positive};
use weakseg::dataio::{Dataset, TileId};
use weakseg::grid_context::{build_context_map, classify_tiles, ContextMap};
use weakseg::metrics::{eval_dataset, eval_predictions, Aggregation};
use weakseg::nn::SegNet;
use weakseg::polygonize::{geojson_string, load_geojson, mask_to_polygons, parse_geojson, to_geojson};
use weakseg::pseudolabel::{make_pseudo_label, LabelConfig};
use weakseg::raster::{BinaryMask, SoftMask};
use weakseg::synthgen::{generate_dataset, generate_splits, SceneConfig, TEST_DIR, TRAIN_DIR};
use weakseg::Error;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_scene() -> SceneConfig {
    SceneConfig {
        grid_rows: 5,
        grid_cols: 5,
        test_grid_rows: 4,
        test_grid_cols: 4,
        tile_size: 32,
        min_radius: 3.0,
        max_radius: 6.0,
        ..Default::default()
    }
}

#[test]
fn generated_dataset_survives_disk() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_dataset(&small_scene(), dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    assert_eq!(data.index, idx);
    assert_eq!(data.images.len(), 25);
    assert_eq!(data.gt.len(), 25);
    for chip in data.index.positives() {
        let gt = &data.gt[&chip.tile_id];
        assert!(!gt.is_empty(), "positive chip {} has an empty mask", chip.tile_id);
    }
}

#[test]
fn splits_differ_and_carry_their_own_grids() {
    let dir = tempfile::tempdir().unwrap();
    let (train, test) = generate_splits(&small_scene(), dir.path()).unwrap();
    assert_eq!((train.grid_rows, test.grid_rows), (5, 4));
    let a = Dataset::load(dir.path().join(TRAIN_DIR)).unwrap();
    let b = Dataset::load(dir.path().join(TEST_DIR)).unwrap();
    assert_ne!(a.images[&TileId(0, 0)], b.images[&TileId(0, 0)]);
}

#[test]
fn context_map_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let idx = generate_dataset(&small_scene(), dir.path()).unwrap();
    let map = build_context_map(&classify_tiles(&idx), 8).unwrap();
    let path = dir.path().join("context_map.json");
    map.save(&path).unwrap();
    assert_eq!(ContextMap::load(&path).unwrap(), map);
    for (origin, ctx) in &map.entries {
        assert_eq!(ctx.len(), 8);
        assert!(ctx.iter().all(|c| idx.chip(*c).is_some_and(|r| !r.is_positive())));
        assert!(!ctx.contains(origin));
    }
}

#[test]
fn fakes_from_loaded_chips_sum_to_the_pair() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small_scene(), dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let map = build_context_map(&classify_tiles(&data.index), 8).unwrap();
    let (origin, ctx) = map.entries.iter().next().unwrap();
    let (i_r, i_ctx) = (&data.images[origin], &data.images[&ctx[0]]);
    let chip = data.index.chip(*origin).unwrap();
    let pseudo = make_pseudo_label(&chip.points, &LabelConfig::default(), 32, 32).unwrap();
    let y = SoftMask::new(32, 32, pseudo.values().iter().map(|&b| if b { 0.8 } else { 0.1 }).collect()).unwrap();
    let f1 = make_fake_positive(i_r, i_ctx, &y).unwrap();
    let f2 = make_fake_negative(i_r, i_ctx, &y).unwrap();
    for k in 0..f1.data().len() {
        let lhs = f1.data()[k] + f2.data()[k];
        let rhs = i_r.data()[k] + i_ctx.data()[k];
        assert!((lhs - rhs).abs() <= 1e-6, "pixel {k}: {lhs} vs {rhs}");
    }
}

#[test]
fn untrained_zero_head_model_scores_as_all_positive() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small_scene(), dir.path()).unwrap();
    let data = Dataset::load(dir.path()).unwrap();
    let seg = SegNet::new(4, 2, true, &mut ChaCha8Rng::seed_from_u64(0));
    let report = eval_dataset(&seg, &data, &LabelConfig::default(), 0.5, Aggregation::Micro).unwrap();
    assert_eq!(report.recall, 1.0);
    let positives = data.index.positives().count();
    let area: usize = data.index.positives().map(|c| data.gt[&c.tile_id].count()).sum();
    let expect = area as f64 / (positives * 32 * 32) as f64;
    assert!((report.precision - expect).abs() < 1e-12);
    assert_eq!(report.n_chips, positives);
}

#[test]
fn eval_without_ground_truth_names_the_chip() {
    let preds = [(TileId(2, 3), SoftMask::filled(4, 4, 0.9))].into_iter().collect();
    let err = eval_predictions(&preds, &Default::default(), 0.5, Aggregation::Micro).unwrap_err();
    assert!(matches!(&err, Error::Eval(m) if m.contains("(2, 3)")), "{err}");
}

fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)).unwrap()
}

#[test]
fn unit_square_matches_golden_geojson() {
    let mut m = BinaryMask::empty(6, 6);
    m.set(2, 3, true);
    let polys: Vec<_> = mask_to_polygons(&m).into_iter().map(|p| (TileId(1, 2), p)).collect();
    let text = geojson_string(&polys);
    assert_eq!(text, golden("unit_square.geojson"));
    assert_eq!(parse_geojson(&text).unwrap(), polys);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("out").join("polygons.geojson");
    to_geojson(&polys, &path).unwrap();
    assert_eq!(load_geojson(&path).unwrap(), polys);
}

#[test]
fn empty_prediction_gives_empty_collection() {
    let polys = mask_to_polygons(&BinaryMask::empty(8, 8));
    assert!(polys.is_empty());
    let text = geojson_string(&[]);
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["type"], "FeatureCollection");
    assert_eq!(v["features"].as_array().unwrap().len(), 0);
}
