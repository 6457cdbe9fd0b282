use bal_core::avatar::PosedGaussians;
use bal_core::config::RunConfig;
use bal_core::datagen::{ground_truth_model, load_skeleton};
use bal_core::geometry::axis_angle_to_rotation;
use bal_core::motion::{subframe_time, KnotBasis, Pose, SplineBank};
use bal_core::renderer::{average_images, rasterize, render_blur, render_sharp, Camera, Image};
use nalgebra::{Matrix3, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_config() -> RunConfig {
    RunConfig::from_json(r#"{"rig": {"width": 40, "image_height": 40, "focal": 40}, "data": {"gt_density": 40}}"#)
        .unwrap()
}

fn cloud(n: usize, seed: u64) -> PosedGaussians {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut g = PosedGaussians::default();
    for _ in 0..n {
        g.means.push(Vector3::from_fn(|_, _| rng.random_range(-0.3..0.3)));
        let a = Matrix3::from_fn(|_, _| rng.random_range(-0.1..0.1));
        g.covariances.push(a * a.transpose() + Matrix3::identity() * 1e-3);
        g.opacities.push(rng.random_range(0.05..0.95));
        g.colors.push(Vector3::from_fn(|_, _| rng.random_range(0.0..1.0)));
    }
    g
}

fn camera() -> Camera {
    Camera::look_at(
        Vector3::new(0.2, -0.4, 2.0),
        Vector3::zeros(),
        Vector3::new(0.0, -1.0, 0.0),
        30.0,
        24,
        20,
    )
}

fn max_abs_diff(a: &Image, b: &Image) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn rigid_motion_of_scene_and_camera_leaves_image_unchanged() {
    let bg = Vector3::new(0.2, 0.1, 0.3);
    let scene = cloud(40, 3);
    let cam = camera();
    let before = rasterize(&scene, &cam, &bg);

    let r = axis_angle_to_rotation(&Vector3::new(0.4, -1.1, 0.7));
    let t = Vector3::new(1.5, -0.25, 3.0);
    let mut moved = scene.clone();
    for m in &mut moved.means {
        *m = r * *m + t;
    }
    for c in &mut moved.covariances {
        *c = r * *c * r.transpose();
    }
    let moved_cam = Camera {
        rotation: cam.rotation * r.transpose(),
        translation: cam.translation - cam.rotation * r.transpose() * t,
        ..cam.clone()
    };
    let after = rasterize(&moved, &moved_cam, &bg);
    assert!(max_abs_diff(&before, &after) < 1e-9);
}

#[test]
fn empty_scene_renders_background() {
    let bg = Vector3::new(0.3, 0.6, 0.9);
    let img = rasterize(&PosedGaussians::default(), &camera(), &bg);
    for y in 0..img.height {
        for x in 0..img.width {
            assert_eq!(img.pixel(x, y), bg);
        }
    }
}

#[test]
fn blur_is_the_mean_of_its_subframes() {
    let cfg = small_config();
    let gt = ground_truth_model(&cfg, load_skeleton(&cfg).unwrap()).unwrap();
    let cam = Camera::look_at(
        Vector3::new(0.0, -0.3, 2.5),
        Vector3::new(0.0, -0.3, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        40.0,
        40,
        40,
    );
    let bg = Vector3::zeros();
    let blur = render_blur(&gt.avatar, &gt.bank, &gt.net, 1, &cam, 5, &bg).unwrap();
    let subs: Vec<Image> = (0..5)
        .map(|t| render_sharp(&gt.avatar, &gt.bank, &gt.net, 1, subframe_time(t, 5), &cam, &bg).unwrap())
        .collect();
    assert_eq!(blur.data, average_images(&subs).data);
}

#[test]
fn static_pose_blur_equals_sharp() {
    let cfg = small_config();
    let gt = ground_truth_model(&cfg, load_skeleton(&cfg).unwrap()).unwrap();
    let k = gt.avatar.skeleton.joint_count();
    let mut pose = Pose::zeros(k);
    pose.channels[2] = Vector3::new(0.3, 0.0, -0.2);
    let bank = SplineBank::constant(&[pose.clone(), pose], 4, KnotBasis::BSpline).unwrap();
    let cam = Camera::look_at(
        Vector3::new(1.0, -0.3, 2.0),
        Vector3::new(0.0, -0.3, 0.0),
        Vector3::new(0.0, -1.0, 0.0),
        40.0,
        40,
        40,
    );
    let bg = Vector3::new(0.1, 0.1, 0.1);
    let sharp = render_sharp(&gt.avatar, &bank, &gt.net, 0, 0.5, &cam, &bg).unwrap();
    let blur = render_blur(&gt.avatar, &bank, &gt.net, 0, &cam, 7, &bg).unwrap();
    assert!(max_abs_diff(&sharp, &blur) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pixels_stay_in_unit_range(seed in 0u64..10_000, n in 1usize..60, bg in proptest::array::uniform3(0.0f64..=1.0)) {
        let img = rasterize(&cloud(n, seed), &camera(), &Vector3::from(bg));
        for v in &img.data {
            prop_assert!(v.is_finite());
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(v));
        }
    }

    #[test]
    fn gaussians_behind_the_camera_leave_background(seed in 0u64..10_000) {
        let g = cloud(20, seed);
        let cam = camera();
        let bg = Vector3::new(0.5, 0.25, 0.75);
        let behind = Camera { translation: cam.translation - Vector3::new(0.0, 0.0, 20.0), ..cam };
        let img = rasterize(&g, &behind, &bg);
        for y in 0..img.height {
            for x in 0..img.width {
                prop_assert_eq!(img.pixel(x, y), bg);
            }
        }
    }
}
