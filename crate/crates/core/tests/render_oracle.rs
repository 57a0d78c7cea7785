mod common;

use common::*;
use gsedit_core::image::Grid;
use gsedit_core::render::{backward, render};
use gsedit_core::scene::{Camera, GaussianCloud};
use rand::Rng;

fn loss_and_upstream(
    cloud: &GaussianCloud,
    cam: &Camera,
    bg: [f64; 3],
    target_c: &Grid<[f64; 3]>,
    target_d: &Grid<f64>,
) -> (f64, Grid<[f64; 3]>, Grid<f64>) {
    let out = render(cloud, cam, bg);
    let mut loss = 0.0;
    let mut gc = Grid::filled(cam.width, cam.height, [0.0; 3]);
    let mut gd = Grid::filled(cam.width, cam.height, 0.0);
    for i in 0..out.color.data.len() {
        for k in 0..3 {
            let r = out.color.data[i][k] - target_c.data[i][k];
            loss += r * r;
            gc.data[i][k] = 2.0 * r;
        }
        let r = out.depth.data[i] - target_d.data[i];
        loss += 0.1 * r * r;
        gd.data[i] = 0.2 * r;
    }
    (loss, gc, gd)
}

#[test]
fn render_matches_brute_force_on_random_scenes() {
    let mut r = rng(7);
    for _ in 0..25 {
        let n = r.random_range(1..=10);
        let cloud = random_scene(&mut r, n, (0.05, 1.0));
        let cam = random_camera(&mut r, 16, 16);
        let bg = [r.random(), r.random(), r.random()];
        let out = render(&cloud, &cam, bg);
        let (c, d, a) = brute_force_render(&cloud, &cam, bg);
        for i in 0..c.data.len() {
            for k in 0..3 {
                assert!((out.color.data[i][k] - c.data[i][k]).abs() < 1e-6);
            }
            assert!((out.depth.data[i] - d.data[i]).abs() < 1e-6);
            assert!((out.alpha.data[i] - a.data[i]).abs() < 1e-6);
        }
    }
}

#[test]
fn backward_matches_finite_differences() {
    let mut r = rng(11);
    for _ in 0..4 {
        let cloud = random_scene(&mut r, 5, (0.1, 0.8));
        let cam = random_camera(&mut r, 16, 16);
        let bg = [0.3, 0.1, 0.6];
        let tc = Grid::from_fn(16, 16, |_, _| [r.random(), r.random(), r.random()]);
        let td = Grid::from_fn(16, 16, |_, _| r.random_range(0.0..5.0));
        let (_, gc, gd) = loss_and_upstream(&cloud, &cam, bg, &tc, &td);
        let analytic = backward(&cloud, &cam, bg, &gc, &gd).unwrap();
        let numeric = fd_gradients(&cloud, 1e-4, |c| loss_and_upstream(c, &cam, bg, &tc, &td).0);
        let mut worst = 0.0f64;
        for (a, n) in analytic.iter().zip(&numeric) {
            for k in 0..PARAMS {
                let e = guarded_rel_err(grad_param(a, k), n[k], 1e-6);
                if e > worst {
                    worst = e;
                }
                assert!(e < 1e-4, "param {k}: analytic {} vs fd {}", grad_param(a, k), n[k]);
            }
        }
        eprintln!("worst relative error {worst:.2e}");
    }
}

#[test]
fn occluded_gaussian_gets_near_zero_gradient() {
    use gsedit_core::scene::Gaussian;
    use nalgebra::{Matrix3, Vector3};
    let cam = Camera::new("c", 16.0, 16.0, 8.0, 8.0, 16, 16, Matrix3::identity(), Vector3::zeros()).unwrap();
    let wall = |z: f64| Gaussian::isotropic(Vector3::new(0.0, 0.0, z), 3.0, 1.0, Vector3::repeat(0.5));
    let hidden = Gaussian::isotropic(Vector3::new(0.0, 0.0, 6.0), 0.3, 0.7, Vector3::new(1.0, 0.0, 0.0));
    let cloud = GaussianCloud::new(vec![wall(2.0), wall(2.5), hidden]);
    let target = Grid::filled(16, 16, [0.0; 3]);
    let td = Grid::filled(16, 16, 0.0);
    let (_, gc, gd) = loss_and_upstream(&cloud, &cam, [0.0; 3], &target, &td);
    let grads = backward(&cloud, &cam, [0.0; 3], &gc, &gd).unwrap();
    let numeric = fd_gradients(&cloud, 1e-4, |c| loss_and_upstream(c, &cam, [0.0; 3], &target, &td).0);
    let mag = |v: &[f64]| v.iter().map(|x| x.abs()).fold(0.0, f64::max);
    let hidden_grad: Vec<f64> = (0..PARAMS).map(|k| grad_param(&grads[2], k)).collect();
    let front_grad: Vec<f64> = (0..PARAMS).map(|k| grad_param(&grads[0], k)).collect();
    assert!(mag(&hidden_grad) < 1e-3 * mag(&front_grad), "{hidden_grad:?} vs {front_grad:?}");
    for k in 0..PARAMS {
        assert!((hidden_grad[k] - numeric[2][k]).abs() < 1e-7, "{k}: {} vs {}", hidden_grad[k], numeric[2][k]);
    }
}
