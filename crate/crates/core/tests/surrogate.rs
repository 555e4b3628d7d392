mod common;

use common::{hand, random_pose};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use xdex::pose_model::{HandPose, HandSkeleton, POSE_DIM};
use xdex::retarget::RetargetConfig;
use xdex::surrogate::*;
use xdex::Error;

fn random_net(dims: &[usize], lo: f64, hi: f64, seed: u64) -> Mlp<f64> {
    let m = *dims.last().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Mlp::<f64>::init(dims, vec![lo; m], vec![hi; m], "t", &mut rng).unwrap();
    // Nonzero biases so no layer sits exactly on a ReLU kink.
    for l in 0..net.num_layers() {
        let (_, b) = net.layer_mut(l);
        b.iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
    }
    net
}

fn random_rows(rows: usize, width: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..rows * width).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn loss(net: &Mlp<f64>, x: &[f64], y: &[f64]) -> f64 {
    net.backward(x, y).unwrap().0
}

#[test]
fn gradients_match_central_differences() {
    let dims = [45, 8, 8, 8, 4];
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for draw in 0..20 {
        // Limits wide enough that no output is clamped.
        let mut net = random_net(&dims, -1e3, 1e3, draw);
        let x = random_rows(6, 45, &mut rng);
        let y = random_rows(6, 4, &mut rng);
        let (_, grads) = net.backward(&x, &y).unwrap();
        let analytic = grads.flatten();
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(analytic.len());
        for l in 0..net.num_layers() {
            for which in 0..2 {
                let len = if which == 0 { net.weights(l).len() } else { net.biases(l).len() };
                for i in 0..len {
                    let get = |n: &mut Mlp<f64>| -> *mut f64 {
                        let (w, b) = n.layer_mut(l);
                        if which == 0 { &mut w[i] } else { &mut b[i] }
                    };
                    let orig = unsafe { *get(&mut net) };
                    unsafe { *get(&mut net) = orig + h };
                    let fp = loss(&net, &x, &y);
                    unsafe { *get(&mut net) = orig - h };
                    let fm = loss(&net, &x, &y);
                    unsafe { *get(&mut net) = orig };
                    numeric.push((fp - fm) / (2.0 * h));
                }
            }
        }
        let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "draw {draw}: relative error {}", diff / norm);
    }
}

#[test]
fn clamped_outputs_pass_no_gradient() {
    // Output limits exclude everything the net can produce: loss is flat.
    let mut net = random_net(&[45, 8, 3], 50.0, 60.0, 2);
    net.layer_mut(1).1.iter_mut().for_each(|b| *b = 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (_, g) = net.backward(&random_rows(5, 45, &mut rng), &random_rows(5, 3, &mut rng)).unwrap();
    assert!(g.flatten().iter().all(|v| *v == 0.0));
}

#[test]
fn exact_labels_give_zero_gradient() {
    let net = random_net(&[45, 8, 8, 8, 4], -1e3, 1e3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_rows(16, 45, &mut rng);
    let y = net.forward(&x).unwrap();
    let (l, g) = net.backward(&x, &y).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.flatten().iter().all(|v| v.abs() <= 1e-12));
}

#[test]
fn duplicated_batch_has_the_same_mean_gradient() {
    let net = random_net(&[45, 16, 16, 5], -1e3, 1e3, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random_rows(7, 45, &mut rng);
    let y = random_rows(7, 5, &mut rng);
    let (l1, g1) = net.backward(&x, &y).unwrap();
    let (l2, g2) = net.backward(&[x.clone(), x].concat(), &[y.clone(), y].concat()).unwrap();
    assert!((l1 - l2).abs() <= 1e-12 * l1.abs());
    for (a, b) in g1.flatten().iter().zip(g2.flatten()) {
        assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }
}

fn linear_dataset(n: usize, m: usize, seed: u64) -> RetargetDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a: Vec<f64> = (0..m * POSE_DIM).map(|_| rng.random_range(-0.1..0.1)).collect();
    let inputs = random_rows(n, POSE_DIM, &mut rng);
    let labels: Vec<f64> = inputs
        .chunks(POSE_DIM)
        .flat_map(|x| (0..m).map(|j| (0..POSE_DIM).map(|i| a[j * POSE_DIM + i] * x[i]).sum::<f64>()).collect::<Vec<_>>())
        .collect();
    RetargetDataset::new(inputs, labels, "linear", vec![-5.0; m], vec![5.0; m]).unwrap()
}

#[test]
fn learns_a_linear_map() {
    let data = linear_dataset(2000, 4, 5);
    let recipe = TrainRecipe {
        hidden: vec![],
        epochs: 200,
        learning_rate: 1e-2,
        ..TrainRecipe::default()
    };
    let out = train::<f64>(&data, &recipe, 5).unwrap();
    let initial = out.initial_validation_mse.unwrap();
    let last = out.history.last().unwrap().validation_mse.unwrap();
    assert!(last <= 1e-4 * initial, "{initial} -> {last}");
}

#[test]
fn learns_a_linear_map_with_hidden_layers() {
    let data = linear_dataset(2000, 4, 6);
    let recipe = TrainRecipe {
        hidden: vec![64, 64],
        epochs: 60,
        batch_size: 32,
        ..TrainRecipe::default()
    };
    let out = train::<f32>(&data, &recipe, 6).unwrap();
    let initial = out.initial_validation_mse.unwrap();
    let last = out.history.last().unwrap().validation_mse.unwrap();
    assert!(last <= 1e-2 * initial, "{initial} -> {last}");
    assert!(out.history.last().unwrap().train_mse < out.history[0].train_mse);
}

#[test]
fn training_is_deterministic_per_seed() {
    let data = linear_dataset(600, 3, 7);
    let recipe = TrainRecipe {
        hidden: vec![32, 32],
        epochs: 5,
        ..TrainRecipe::default()
    };
    let a = train::<f32>(&data, &recipe, 9).unwrap();
    let b = train::<f32>(&data, &recipe, 9).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.network, b.network);
    let c = train::<f32>(&data, &recipe, 10).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn training_preconditions_and_divergence() {
    let data = linear_dataset(100, 2, 8);
    let zero = TrainRecipe { epochs: 0, ..TrainRecipe::default() };
    assert!(matches!(train::<f32>(&data, &zero, 0), Err(Error::InvalidArgument(_))));
    let wild = TrainRecipe {
        hidden: vec![16],
        epochs: 50,
        // Steps overflow f32 within a few updates.
        learning_rate: 1e38,
        ..TrainRecipe::default()
    };
    match train::<f32>(&data, &wild, 0) {
        Err(Error::Diverged { epoch }) => assert!(epoch >= 1),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.len())),
    }
}

#[test]
fn predictions_are_feasible_and_batch_consistent() {
    let model = hand("four_finger");
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let net = Mlp::<f32>::init(&[45, 64, 64, 8], model.lower().to_vec(), model.upper().to_vec(), model.name(), &mut rng).unwrap();
    // Scale inputs up so many raw outputs leave the limits.
    let poses: Vec<HandPose> = (0..10_000).map(|_| random_pose(&mut rng, 1.0)).collect();
    let out = predict(&net, &poses).unwrap();
    assert!(out.iter().all(|q| model.within_limits(q.as_slice())));

    let batch = &poses[..1024];
    let all = predict(&net, batch).unwrap();
    for i in [0, 1, 511, 1023] {
        assert_eq!(predict(&net, &batch[i..=i]).unwrap()[0], all[i]);
    }
}

#[test]
fn oracle_labels_are_feasible_deterministic_and_ordered() {
    let model = hand("four_finger");
    let skeleton = HandSkeleton::default_hand();
    let config = RetargetConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let poses: Vec<HandPose> = (0..1000).map(|_| random_pose(&mut rng, 0.4)).collect();
    let data = generate_training_set(&model, &skeleton, &poses, &config, 1).unwrap();
    assert_eq!(data.len(), 1000);
    assert!(data.labels.iter().all(|v| v.is_finite()));
    for i in 0..data.len() {
        assert!(model.within_limits(data.label(i)));
    }
    assert_eq!(generate_training_set(&model, &skeleton, &poses, &config, 1).unwrap(), data);
    assert_eq!(generate_training_set(&model, &skeleton, &poses, &config, 3).unwrap(), data);

    let copies = vec![poses[0].clone(); 5];
    let same = generate_training_set(&model, &skeleton, &copies, &config, 1).unwrap();
    for i in 1..5 {
        assert_eq!(same.label(i), same.label(0));
    }
    assert!(matches!(generate_training_set(&model, &skeleton, &[], &config, 1), Err(Error::Empty(_))));
}
