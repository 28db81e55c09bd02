mod common;

use common::*;
use mprnet::blocks::{
    build_model, local_receptive_reach, mprnet_forward, BnActivation, ModelConfig, ParamSet, WeightStore,
};
use mprnet::imaging::Image;
use mprnet::training::super_resolve;
use mprnet::{Eager, Graph, Shape, Tape, Tensor, Var};

fn forward(store: &WeightStore<f32>, cfg: &ModelConfig, x: &Tensor<f32>) -> Tensor<f32> {
    mprnet_forward(&Eager, &store.bind(&Eager), cfg, x, None).unwrap()
}

/// With the global-pooling branches silenced, a single LR pixel can only
/// influence HR pixels within the network's local reach.
#[test]
fn single_pixel_change_stays_within_receptive_reach() {
    for scale in [2, 3, 4] {
        let cfg = ModelConfig::tiny(8, 2, 2, scale);
        let mut store = build_model(&cfg, 21).unwrap();
        for (path, t) in store.iter_mut() {
            if path.contains(".tfam.ca") || path.contains(".adp.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (h, w) = (40, 40);
        let base = textured_image(h, w, 3).to_tensor();
        let (y0, x0) = (20, 17);
        let mut bumped = base.clone();
        let i = Shape::new(1, 3, h, w).index(0, 1, y0, x0);
        bumped.data_mut()[i] += 0.3;
        let (a, b) = (forward(&store, &cfg, &base), forward(&store, &cfg, &bumped));
        let reach = local_receptive_reach(&cfg, h, w) as i64;
        let (s, y0, x0) = (scale as i64, y0 as i64, x0 as i64);
        let mut changed = 0;
        let mut widest = 0;
        let shape = a.shape();
        for c in 0..3 {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    if (a.at(0, c, y, x) - b.at(0, c, y, x)).abs() > 1e-6 {
                        changed += 1;
                        let (y, x) = (y as i64, x as i64);
                        let dy = (s * y0 - y).max(y - (s * y0 + s - 1)).max(0);
                        let dx = (s * x0 - x).max(x - (s * x0 + s - 1)).max(0);
                        widest = widest.max(dy.max(dx));
                        assert!(dy <= reach && dx <= reach, "x{scale}: ({y},{x}) changed, reach {reach}");
                    }
                }
            }
        }
        assert!(changed > 0, "x{scale}: perturbation had no effect");
        assert!(
            widest > s,
            "x{scale}: influence did not spread beyond the neighbourhood"
        );
    }
}

#[test]
fn batch_items_are_processed_independently() {
    let cfg = ModelConfig::tiny(8, 1, 2, 3);
    let store = build_model(&cfg, 2).unwrap();
    let imgs = [textured_image(12, 10, 1), textured_image(12, 10, 2)];
    let batch = forward(&store, &cfg, &Image::batch_to_tensor(&imgs).unwrap());
    for (n, img) in imgs.iter().enumerate() {
        let single = forward(&store, &cfg, &img.to_tensor());
        let item = Image::from_tensor(&batch, n).unwrap();
        let alone = Image::from_tensor(&single, 0).unwrap();
        for (p, q) in item.data().iter().zip(alone.data()) {
            assert!((p - q).abs() < 1e-5);
        }
    }
}

#[test]
fn single_and_double_precision_agree() {
    let cfg = ModelConfig::tiny(16, 2, 2, 4);
    let store = build_model(&cfg, 8).unwrap();
    let x = textured_image(11, 13, 4).to_tensor();
    let lo = forward(&store, &cfg, &x).cast::<f64>();
    let wide = store.cast::<f64>();
    let hi = mprnet_forward(&Eager, &wide.bind(&Eager), &cfg, &x.cast::<f64>(), None).unwrap();
    let scale = hi.max_abs().max(1.0);
    assert!(max_abs_diff(&lo, &hi) / scale < 1e-4);
}

#[test]
fn concurrent_inference_is_deterministic() {
    let cfg = ModelConfig::tiny(8, 1, 2, 2);
    let store = build_model(&cfg, 5).unwrap();
    let img = textured_image(14, 17, 6);
    let reference = super_resolve(&store, &cfg, &img).unwrap();
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..4)
            .map(|_| s.spawn(|| super_resolve(&store, &cfg, &img).unwrap()))
            .collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), reference);
        }
    });
}

fn model_gradcheck(cfg: ModelConfig, seed: u64) -> GradCheck {
    let store = build_model(&cfg, seed).unwrap().cast::<f64>();
    let (names, mut inputs): (Vec<String>, Vec<Tensor<f64>>) =
        store.iter().map(|(k, v)| (k.clone(), v.map(|x| 0.5 * x))).unzip();
    inputs.insert(0, seeded(Shape::new(1, 3, 9, 8), seed, 0.0, 1.0));
    check_grads(
        "model",
        &inputs,
        move |g, v| {
            let p: ParamSet<Var> = names.iter().cloned().zip(v[1..].iter().copied()).collect();
            mprnet_forward(g, &p, &cfg, &v[0], None)
        },
        1e-5,
        Some(3),
        seed,
    )
}

#[test]
fn gradients_match_for_alternative_activation_placement() {
    let cfg = ModelConfig {
        bn_activation: BnActivation::AfterSecondDw,
        ..ModelConfig::tiny(4, 1, 1, 3)
    };
    let r = model_gradcheck(cfg, 30);
    assert!(r.ok(), "{:?}", r.failures);
}

#[test]
fn gradients_match_for_every_connection_pattern() {
    for (name, connections) in mprnet::blocks::ablation::connection_rows() {
        let cfg = ModelConfig {
            connections,
            ..ModelConfig::tiny(4, 2, 1, 2)
        };
        let r = model_gradcheck(cfg, 31);
        assert!(r.ok(), "{name}: {:?}", r.failures);
    }
}

#[test]
fn tape_accumulates_gradients_of_reused_values() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(
        Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![1.0, -2.0, 3.0]).unwrap(),
        true,
    );
    let unused = tape.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)), true);
    let sq = tape.mul(&x, &x).unwrap();
    let y = tape.add(&sq, &x).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, -3.0, 7.0]);
    assert_eq!(grads.get(unused).unwrap().data(), &[0.0; 4]);
    assert!(tape.backward(loss).is_err());
}

#[test]
fn backward_requires_a_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
    let y = tape.relu(&x);
    assert!(tape.backward(y).is_err());
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(Shape::new(1, 1, 2, 2)), true);
    let c = tape.input(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
    let loss = tape.l1_loss(x, c).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[-0.25; 4]);
    assert!(grads.get(c).is_none());
}
