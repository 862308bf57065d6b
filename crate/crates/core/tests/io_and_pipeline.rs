use crossview::config::Config;
use crossview::gca::{gca_aggregate, GcaOptions, HeightHypothesisSet};
use crossview::geometry::{ground_plane_grid, warp, CameraModel, RelativePose, SatMeta};
use crossview::raster::{decode_cvt, encode_cvt};
use crossview::synthdata::{make_scene, render_satellite, Difficulty};
use crossview::{Error, Raster};
use proptest::prelude::*;

fn raster_strategy() -> impl Strategy<Value = Raster> {
    (1usize..4, 1usize..9, 1usize..9).prop_flat_map(|(c, h, w)| {
        prop::collection::vec(-2.0f64..2.0, c * h * w).prop_map(move |d| Raster::from_vec(c, h, w, d).unwrap())
    })
}

proptest! {
    #[test]
    fn cvt_round_trip_is_f32_exact(r in raster_strategy()) {
        let back = decode_cvt(&encode_cvt(&r)).unwrap();
        prop_assert_eq!(back.shape(), r.shape());
        for (a, b) in r.data().iter().zip(back.data()) {
            prop_assert_eq!(*a as f32 as f64, *b);
        }
    }

    #[test]
    fn truncated_cvt_is_rejected(r in raster_strategy(), cut in 1usize..8) {
        let bytes = encode_cvt(&r);
        let err = decode_cvt(&bytes[..bytes.len() - cut]).unwrap_err();
        if cut <= 4 * r.len() {
            prop_assert!(matches!(err, Error::TruncatedPayload), "{err:?}");
        } else {
            prop_assert!(matches!(err, Error::MalformedHeader(_)), "{err:?}");
        }
    }

    #[test]
    fn png_round_trip_within_quantization(r in raster_strategy().prop_filter("rgb", |r| r.channels() == 3)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        let r = r.clamp(0.0, 1.0);
        r.write(&p).unwrap();
        let back = Raster::read(&p).unwrap();
        for (a, b) in r.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn config_round_trips_through_json() {
    let mut cfg = Config::default();
    cfg.diffusion.steps = 20;
    cfg.iha.iha_steps = 10;
    cfg.text.gamma = 2.5;
    let back = Config::from_json(&cfg.to_json()).unwrap();
    assert_eq!(back, cfg);
    back.validate().unwrap();
}

#[test]
fn written_satellite_feeds_single_plane_aggregation() {
    let dir = tempfile::tempdir().unwrap();
    let meta = SatMeta::new(0.5, 128, 128).unwrap();
    let sat = render_satellite(&make_scene(9, Difficulty::Flat), &meta).unwrap();
    let path = dir.path().join("sat.cvt");
    sat.write(&path).unwrap();
    let sat = Raster::read(&path).unwrap();

    let cam = CameraModel::panorama(128, 32, 0.3, -1.3).unwrap();
    let pose = RelativePose::new(64.0, 64.0, 1.0, 2.0).unwrap();
    let q = Raster::zeros(1, 32, 128).unwrap();
    let hyp = HeightHypothesisSet::uniform(vec![-2.0], 32, 128).unwrap();
    let out = gca_aggregate(&q, &sat, &cam, &pose, &meta, &hyp, &GcaOptions::default()).unwrap();
    let expect = warp(&sat, &ground_plane_grid(&cam, &pose, &meta), 0.0);
    for (a, b) in out.features.data().iter().zip(expect.data()) {
        assert!((a - b).abs() < 1e-9);
    }
}
