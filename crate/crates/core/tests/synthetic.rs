use healswin_core::synthetic::{Scene, CAMERA_HEIGHT, EGO, MAX_DEPTH, MIN_DEPTH, NUM_CLASSES, OBJECT_A, SKY};
use healswin_core::{generate, render_fisheye, resample_to_healpix, CameraCalibration, ImageRaster, Interp, Sample, SceneSpec};
use healswin_grid::{pix_to_ang, NSide, PixelId, SphericalAngle};

fn directions(nside: u32) -> Vec<[f64; 3]> {
    let ns = NSide::new(nside).unwrap();
    (0..8 * ns.face_pixels())
        .map(|i| pix_to_ang(ns, PixelId::nested(i)).unwrap().unit_vector())
        .collect()
}

#[test]
fn same_seed_same_sample() {
    let spec = SceneSpec::new(11, 16);
    assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    let mut small = spec.clone();
    small.camera = CameraCalibration::equidistant(48);
    assert_eq!(render_fisheye(&small).unwrap(), render_fisheye(&small).unwrap());
    assert_ne!(generate(&spec).unwrap(), generate(&SceneSpec::new(12, 16)).unwrap());
}

#[test]
fn sample_invariants() {
    for seed in 0..4 {
        let s = generate(&SceneSpec::new(seed, 16)).unwrap();
        assert!(s.validity.iter().all(|&v| v));
        assert!(s.image.iter().all(|&c| (0.0..=1.0).contains(&c)));
        for i in 0..s.len() {
            assert!((s.labels[i] as usize) < NUM_CLASSES);
            assert_eq!(s.sky_mask[i], s.labels[i] == SKY);
            if !s.sky_mask[i] {
                assert!(s.depth[i] >= MIN_DEPTH as f32 && s.depth[i] <= MAX_DEPTH as f32);
            }
        }
    }
}

#[test]
fn sky_is_exactly_above_the_horizon_without_objects() {
    let spec = SceneSpec { num_objects: 0, ..SceneSpec::new(3, 16) };
    let s = generate(&spec).unwrap();
    for (i, d) in directions(16).iter().enumerate() {
        let above = d[1] <= 0.0 && d[2] >= (110f64).to_radians().cos();
        assert_eq!(s.labels[i] == SKY, above, "pixel {i}");
    }
}

#[test]
fn caps_occlude_the_ground() {
    let mut seen = 0;
    for seed in 0..6 {
        let s = generate(&SceneSpec::new(seed, 32)).unwrap();
        for (i, d) in directions(32).iter().enumerate() {
            if s.labels[i] >= OBJECT_A && s.labels[i] != EGO && d[1] > 0.0 {
                assert!((s.depth[i] as f64) < CAMERA_HEIGHT / d[1]);
                seen += 1;
            }
        }
    }
    assert!(seen > 100);
}

#[test]
fn label_histogram_is_pinned() {
    let h = generate(&SceneSpec::new(100, 16)).unwrap().label_histogram();
    assert_eq!(h, HISTOGRAM_SEED_100);
}

const HISTOGRAM_SEED_100: [usize; NUM_CLASSES] = [157, 661, 855, 138, 125, 112];

#[test]
fn pole_pixel_of_odd_raster_matches_the_scene() {
    let mut spec = SceneSpec::new(5, 16);
    spec.camera = CameraCalibration::equidistant(129);
    let s = render_fisheye(&spec).unwrap();
    let pole = 64 * 129 + 64;
    let hit = Scene::new(&spec).ray([0.0, 0.0, 1.0]);
    assert_eq!(&s.image[3 * pole..3 * pole + 3], &hit.rgb);
    assert_eq!(s.labels[pole], hit.label);
    assert_eq!(s.depth[pole], hit.depth as f32);
}

#[test]
fn raster_outside_the_lens_is_invalid() {
    let mut spec = SceneSpec::new(5, 16);
    spec.camera = CameraCalibration::equidistant(64);
    let s = render_fisheye(&spec).unwrap();
    assert!(!s.validity[0]);
    assert!(s.validity[32 * 64 + 32]);
}

/// Fraction of interior pixels whose resampled label matches the direct one.
/// A pixel is interior when the analytic label is constant on a ring of
/// probes one pixel-angle around its center.
fn resampled_agreement(seed: u64, nside: u32) -> (f64, usize) {
    let spec = SceneSpec::new(seed, nside);
    let scene = Scene::new(&spec);
    let direct = generate(&spec).unwrap();
    let raster = render_fisheye(&spec).unwrap().to_raster(spec.camera.width, spec.camera.height).unwrap();
    let ns = NSide::new(nside).unwrap();
    let labels = ImageRaster::new(raster.width, raster.height, 1, raster.channel(3)).unwrap();
    let map = resample_to_healpix(&labels, &spec.camera, ns, Interp::Nearest).unwrap();
    let pixel_angle = (4.0 * std::f64::consts::PI / ns.npix() as f64).sqrt();
    let (mut agree, mut total) = (0, 0);
    for i in 0..direct.len() {
        if !map.validity[i] {
            continue;
        }
        let c = pix_to_ang(ns, PixelId::nested(i as u64)).unwrap();
        let label = scene.geometry(c.unit_vector()).0;
        let interior = (0..16).all(|k| {
            let a = k as f64 * std::f64::consts::PI / 8.0;
            scene.geometry(offset(c, pixel_angle, a)).0 == label
        });
        if interior {
            total += 1;
            agree += (map.data[i] as u8 == direct.labels[i]) as usize;
        }
    }
    (agree as f64 / total as f64, total)
}

/// Direction at angular distance `r` from `c` along bearing `a`.
fn offset(c: SphericalAngle, r: f64, a: f64) -> [f64; 3] {
    let p = c.unit_vector();
    let e_theta = [c.theta.cos() * c.phi.cos(), c.theta.cos() * c.phi.sin(), -c.theta.sin()];
    let e_phi = [-c.phi.sin(), c.phi.cos(), 0.0];
    std::array::from_fn(|k| p[k] * r.cos() + (e_theta[k] * a.cos() + e_phi[k] * a.sin()) * r.sin())
}

#[test]
fn render_then_resample_agrees_with_direct_path() {
    for seed in [0, 1] {
        let (frac, total) = resampled_agreement(seed, 64);
        assert!(total > 10_000);
        assert!(frac > 0.95, "seed {seed}: {frac}");
    }
}

#[test]
fn sample_roundtrips_through_map_and_raster() {
    let spec = SceneSpec::new(9, 8);
    let s = generate(&spec).unwrap();
    let back = Sample::from_map(&s.to_map(NSide::new(8).unwrap()).unwrap()).unwrap();
    assert_eq!(back, s);
    let mut spec = spec;
    spec.camera = CameraCalibration::equidistant(32);
    let r = render_fisheye(&spec).unwrap();
    let back = Sample::from_raster(&r.to_raster(32, 32).unwrap(), Some(r.validity.clone())).unwrap();
    assert_eq!(back, r);
}
