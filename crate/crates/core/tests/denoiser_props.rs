mod common;

use mvdd::attention::{EpipolarConfig, Neighborhood};
use mvdd::camera::flatten_extrinsics;
use mvdd::denoiser::{
    finite_difference_check, pos_enc, read_checkpoint, train, write_checkpoint, Denoiser, DenoiserConfig, ParamStore,
    Tape, Tensor, TrainConfig,
};
use mvdd::geometry::DepthMapSet;
use mvdd::rng::{normal_vec, substream};
use mvdd::scheduler::{cosine_schedule, default_neighbors};

use common::{permute_views, rendered};

fn small(attention: bool) -> DenoiserConfig {
    DenoiserConfig {
        levels: 2,
        base_channels: 8,
        channel_multipliers: vec![1, 2],
        groups: 4,
        heads: 2,
        resolution: 8,
        views: 4,
        attention_levels: if attention { vec![0, 1] } else { vec![] },
        epipolar: EpipolarConfig {
            k: 4,
            r: 3,
            delta: 0.3,
            tau: 0.15,
        },
    }
}

fn noisy(seed: u64) -> DepthMapSet {
    let mut x = rendered(4, 8, seed, &["sphere", "box"]);
    let eps = normal_vec(&mut substream(seed, &[77]), x.values.len());
    for (v, e) in x.values.iter_mut().zip(eps) {
        *v = 0.8 * *v + 0.2 * e;
    }
    x
}

fn predict(model: &Denoiser, x: &DepthMapSet, alpha_bar: f64) -> Vec<f64> {
    let nb = default_neighbors(model, &x.rig).unwrap();
    model.denoise_forward(x, alpha_bar, &nb).unwrap()
}

#[test]
fn permuting_views_permutes_predictions() {
    let model = Denoiser::randomized(small(true), 1).unwrap();
    let x = noisy(2);
    let out = predict(&model, &x, 0.6);
    assert!(out.iter().any(|v| v.abs() > 1e-3));
    for order in [[1, 0, 2, 3], [3, 2, 1, 0], [2, 3, 0, 1]] {
        let pout = predict(&model, &permute_views(&x, &order), 0.6);
        for (new, &old) in order.iter().enumerate() {
            let (a, b) = (&out[old * 64..(old + 1) * 64], &pout[new * 64..(new + 1) * 64]);
            for (p, q) in a.iter().zip(b) {
                assert!((p - q).abs() < 1e-9, "order {order:?}: {p} vs {q}");
            }
        }
    }
}

#[test]
fn without_attention_views_are_independent() {
    let model = Denoiser::randomized(small(false), 3).unwrap();
    let x = noisy(4);
    let mut y = x.clone();
    for v in y.view_mut(1) {
        *v = -*v;
    }
    let (a, b) = (predict(&model, &x, 0.3), predict(&model, &y, 0.3));
    for view in [0, 2, 3] {
        assert_eq!(a[view * 64..(view + 1) * 64], b[view * 64..(view + 1) * 64]);
    }
    assert_ne!(a[64..128], b[64..128]);
}

#[test]
fn attention_couples_views() {
    let model = Denoiser::randomized(small(true), 3).unwrap();
    let x = noisy(4);
    let mut y = x.clone();
    for v in y.view_mut(1) {
        *v = (*v - 0.05).max(-1.0);
    }
    let (a, b) = (predict(&model, &x, 0.9), predict(&model, &y, 0.9));
    assert_ne!(a[..64], b[..64]);
}

fn zero_matching(model: &mut Denoiser, pattern: &str) {
    for t in &mut model.params.tensors {
        if t.name.contains(pattern) {
            t.value.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[test]
fn zeroed_adagn_heads_remove_conditioning() {
    let mut model = Denoiser::randomized(small(false), 5).unwrap();
    zero_matching(&mut model, ".scale.");
    zero_matching(&mut model, ".shift.");
    let x = noisy(6);
    let reference = predict(&model, &x, 0.2);
    assert_eq!(reference, predict(&model, &x, 0.95));
    let order = [2, 0, 3, 1];
    let mut moved = x.clone();
    moved.rig = x.rig.permuted(&order);
    assert_eq!(reference, predict(&model, &moved, 0.2));
}

#[test]
fn zeroed_camera_projection_ignores_the_camera() {
    let mut model = Denoiser::randomized(small(false), 7).unwrap();
    zero_matching(&mut model, "cam.embed.");
    let rows = flatten_extrinsics(&common::rig(4, 8));
    let a = model.time_camera_embedding(0.5, &rows[0]).unwrap();
    let b = model.time_camera_embedding(0.5, &rows[3]).unwrap();
    assert_eq!(a, b);
    let c = model.time_camera_embedding(0.1, &rows[0]).unwrap();
    assert_ne!(a, c);
    assert_eq!(a.len(), small(false).embed_dim());
}

#[test]
fn positional_encoding_examples() {
    let e = pos_enc(1.0, 2);
    let expected = [1f64.sin(), 1e-4f64.sin(), 1f64.cos(), 1e-4f64.cos()];
    for (a, b) in e.iter().zip(expected) {
        assert!((a - b).abs() < 1e-15);
    }
    assert_eq!(pos_enc(0.7, 16).len(), 32);
}

#[test]
fn fresh_model_outputs_zero_and_zero_params_output_zero() {
    let x = noisy(8);
    let fresh = Denoiser::new(small(true), 9).unwrap();
    assert!(predict(&fresh, &x, 0.5).iter().all(|&v| v == 0.0));
    let mut zeroed = Denoiser::randomized(small(true), 9).unwrap();
    zero_matching(&mut zeroed, "");
    assert!(predict(&zeroed, &x, 0.5).iter().all(|&v| v == 0.0));
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    let mut model = Denoiser::randomized(small(true), 11).unwrap();
    let mut buf = Vec::new();
    write_checkpoint(&model.config, &model.params, &mut buf).unwrap();
    let (config, params): (DenoiserConfig, ParamStore) = read_checkpoint(&buf[..]).unwrap();
    model.params.quantize();
    let loaded = Denoiser { config, params };
    assert_eq!(loaded, model);
    let x = noisy(12);
    assert_eq!(predict(&loaded, &x, 0.4), predict(&model, &x, 0.4));
}

#[test]
fn training_is_deterministic_and_zero_epochs_is_initialization() {
    let data = vec![rendered(4, 8, 1, &["sphere"]), rendered(4, 8, 2, &["box"])];
    let sch = cosine_schedule(20, 0.008).unwrap();
    let run = |epochs| {
        let mut m = Denoiser::new(small(true), 13).unwrap();
        let cfg = TrainConfig {
            epochs,
            batch_size: 2,
            seed: 13,
            ..TrainConfig::default()
        };
        let curve = train(&mut m, &data, &sch, &cfg, |_, _| {}).unwrap();
        (m, curve)
    };
    let (a, ca) = run(2);
    let (b, cb) = run(2);
    assert_eq!(ca, cb);
    assert_eq!(a.params, b.params);
    let (z, cz) = run(0);
    assert!(cz.is_empty());
    assert_eq!(z, Denoiser::new(small(true), 13).unwrap());
    assert_ne!(a.params, z.params);
}

fn linear_store(seed: u64) -> ParamStore {
    let mut p = ParamStore::default();
    let mut rng = substream(seed, &[1]);
    p.insert(Tensor {
        name: "w".into(),
        shape: vec![3, 2, 1, 1],
        value: normal_vec(&mut rng, 6),
    })
    .unwrap();
    p.insert(Tensor {
        name: "b".into(),
        shape: vec![3],
        value: normal_vec(&mut rng, 3),
    })
    .unwrap();
    p
}

fn linear_loss(p: &ParamStore, x: &[f64], target: &[f64]) -> (f64, Vec<Option<Vec<f64>>>) {
    let mut tape = Tape::new(p);
    let input = tape.input(x.to_vec(), [2, 2, 2, 2]);
    let (w, b) = (tape.param("w").unwrap(), tape.param("b").unwrap());
    let out = tape.conv(input, w, Some(b), 1, 0).unwrap();
    let loss = tape.mse(out, target).unwrap();
    (tape.value(loss)[0], tape.backward(loss))
}

#[test]
fn linear_network_gradients_are_exact() {
    let p = linear_store(1);
    let x = normal_vec(&mut substream(2, &[]), 16);
    let target = normal_vec(&mut substream(3, &[]), 24);
    let (_, grads) = linear_loss(&p, &x, &target);
    let check = finite_difference_check(&p, &grads, 9, 1e-4, 4, |q| Ok(linear_loss(q, &x, &target).0)).unwrap();
    assert!(check.max_rel_error < 1e-8, "{:?}", check);
    assert!(check.coordinates.len() >= 9);
}

#[test]
fn gradient_vanishes_at_zero_loss() {
    let p = linear_store(5);
    let x = normal_vec(&mut substream(6, &[]), 16);
    let mut tape = Tape::new(&p);
    let input = tape.input(x.clone(), [2, 2, 2, 2]);
    let (w, b) = (tape.param("w").unwrap(), tape.param("b").unwrap());
    let out = tape.conv(input, w, Some(b), 1, 0).unwrap();
    let target = tape.value(out).to_vec();
    let (loss, grads) = linear_loss(&p, &x, &target);
    assert_eq!(loss, 0.0);
    let norm: f64 = grads.iter().flatten().flatten().map(|g| g * g).sum::<f64>().sqrt();
    assert!(norm < 1e-6);
}

#[test]
fn neighborhood_isolation_matches_attention_off() {
    // with no neighbor lists every attention block contributes zero
    let model = Denoiser::randomized(small(true), 15).unwrap();
    let x = noisy(16);
    let isolated = model.denoise_forward(&x, 0.5, &Neighborhood::isolated(4)).unwrap();
    let mut y = x.clone();
    for v in y.view_mut(2) {
        *v = -*v;
    }
    let other = model.denoise_forward(&y, 0.5, &Neighborhood::isolated(4)).unwrap();
    assert_eq!(isolated[..64], other[..64]);
}
