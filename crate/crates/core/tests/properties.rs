use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use scenelat::autograd::Graph;
use scenelat::datapipe::{make_sample, mask_count, MaskPolicy};
use scenelat::dit::{fm_interpolate, timestep_shift, timestep_unshift, Dit, DitConfig};
use scenelat::eval::{finite_diff_check, GradCheckConfig};
use scenelat::geometry::{ate, look_at, Camera, Sim3, Vec3};
use scenelat::rae::{LatentMode, Rae, RaeConfig};
use scenelat::scenegen::{generate_scene, SceneConfig};
use scenelat::tensor::Tensor;

fn camera_at(eye: Vec3) -> Camera {
    let r = look_at(&eye, &Vec3::zeros(), &Vec3::y()).unwrap();
    Camera::with_fov(16, 16, 60.0).with_pose(r, eye)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shift_is_monotone_bijection(n in 1usize..64, m in 1usize..512, t in 0.0f64..1.0, dt in 1e-6f64..0.5) {
        let base = 4096.0;
        let a = timestep_shift(t, n, m, base).unwrap();
        let b = timestep_shift((t + dt).min(1.0), n, m, base).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b >= a);
        prop_assert!((timestep_unshift(a, n, m, base).unwrap() - t).abs() < 1e-12);
    }

    #[test]
    fn interpolation_is_linear_path(seed in any::<u64>(), t in 0.0f64..=1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z0 = Tensor::<f64>::from_fn(&[3, 5], |_| rng.sample(StandardNormal));
        let eps = Tensor::<f64>::from_fn(&[3, 5], |_| rng.sample(StandardNormal));
        let zt = fm_interpolate(&z0, &eps, t).unwrap();
        for ((z, a), b) in zt.data().iter().zip(z0.data()).zip(eps.data()) {
            prop_assert!((z - ((1.0 - t) * a + t * b)).abs() < 1e-12);
        }
    }

    #[test]
    fn mask_draws_respect_the_band(n in 2usize..24, seed in any::<u64>()) {
        let p = MaskPolicy::dit();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..20 {
            let vis = p.draw(n, &mut rng);
            let hidden = vis.iter().filter(|&&v| !v).count();
            prop_assert!(hidden == n || (1..n).contains(&hidden));
        }
        let k = mask_count(n, 0.75, 0.6, 0.9);
        prop_assert!(k >= 1 && k < n);
    }

    #[test]
    fn ate_ignores_similarity_transforms(
        seed in any::<u64>(),
        scale in 0.1f64..10.0,
        angle in -3.0f64..3.0,
        shift in prop::array::uniform3(-5.0f64..5.0),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gt: Vec<Camera> = (0..6)
            .map(|_| camera_at(Vec3::new(rng.random_range(1.0..3.0), rng.random_range(-1.0..1.0), rng.random_range(1.0..3.0))))
            .collect();
        let axis = nalgebra::Unit::new_normalize(Vec3::new(rng.random(), rng.random(), 1.0));
        let sim = Sim3 {
            scale,
            rotation: *nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix(),
            translation: Vec3::from(shift),
        };
        let pred: Vec<Camera> = gt.iter().map(|c| sim.apply_camera(c)).collect();
        let (r, t) = ate(&pred, &gt).unwrap();
        prop_assert!(r < 1e-6 && t < 1e-6, "ate ({r}, {t})");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn latents_have_fixed_length(n in 1usize..5, rows in 1usize..4, cols in 1usize..4, vis_bits in 0u8..16) {
        let cfg = RaeConfig::tiny();
        let rae = Rae::<f32>::with_default_encoder(cfg.clone()).unwrap();
        let rec = generate_scene(5, 0, 4, 20.0, &SceneConfig::default()).unwrap();
        let ids: Vec<usize> = (0..n).collect();
        let s = make_sample(&rec, 0, &ids, 14 * rows, 14 * cols).unwrap();
        let vis: Vec<bool> = (0..n).map(|i| vis_bits >> i & 1 == 1).collect();
        let z = rae.encode(&s.images, &s.cameras, &vis, LatentMode::Raw).unwrap();
        prop_assert_eq!(z.z.shape(), &[cfg.m, cfg.d][..]);
    }
}

#[test]
fn velocity_gradient_wrt_noisy_latents() {
    let (m, d) = (4, 8);
    let mut dit = Dit::<f64>::new(DitConfig::tiny(), m, d).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for t in dit.params.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.2 * rng.sample::<f64, _>(StandardNormal));
    }
    let cond = Tensor::<f64>::from_fn(&[m, d], |_| rng.sample(StandardNormal));
    let weight = Tensor::<f64>::from_fn(&[m, d], |_| rng.sample(StandardNormal));
    let x0: Vec<f64> = (0..m * d).map(|_| rng.sample(StandardNormal)).collect();
    let report = finite_diff_check(
        |x| {
            let mut g = Graph::frozen(&dit.params);
            let zt = g.input(Tensor::from_vec(&[m, d], x.to_vec())?);
            let c = g.constant(cond.clone());
            let v = dit.velocity_graph(&mut g, zt, 0.4, c, None)?;
            let w = g.constant(weight.clone());
            let p = g.mul(v, w);
            let loss = g.sum(p);
            let value = g.value(loss).item();
            let grads = g.backward(loss);
            Ok((value, grads.wrt(zt).expect("input gradient").data().to_vec()))
        },
        &x0,
        &GradCheckConfig {
            samples: None,
            ..GradCheckConfig::default()
        },
    )
    .unwrap();
    assert!(report.max_rel_err < 1e-6, "{report:?}");
    assert_eq!(report.checked, m * d);
}
