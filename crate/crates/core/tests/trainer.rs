use rand::Rng;
use restp::dataset::Dataset;
use restp::layers::Parameterized;
use restp::network::{Depth, Group, Network, NetworkConfig};
use restp::ops::{softmax_cross_entropy, Mode};
use restp::trainer::{lr_at, train, AugmentConfig, Sgd, TrainConfig};
use restp::{seed, Shape, Tensor};

fn tiny_config(classes: usize) -> NetworkConfig {
    NetworkConfig::new(Depth::D18, classes).with_width(0.25).with_input(64)
}

fn noise_dataset(n: usize, classes: usize, s: u64) -> Dataset {
    let mut rng = seed::rng(s);
    let images = Tensor::from_fn(Shape::new(n, 3, 64, 64), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
    let labels = (0..n).map(|i| i % classes).collect();
    Dataset::new(images, labels, (0..classes).map(|k| k.to_string()).collect()).unwrap()
}

#[test]
fn overfits_one_batch() {
    let data = noise_dataset(2, 2, 3);
    let mut net = Network::build(tiny_config(2), 4).unwrap();
    let mut sgd = Sgd::new(0.9, 0.0);
    let (x, labels) = data.batch(&[0, 1]);
    let mut losses = Vec::new();
    for _ in 0..10 {
        let logits = net.forward(&x, Mode::Train).unwrap();
        let (loss, d) = softmax_cross_entropy(&logits, &labels).unwrap();
        losses.push(loss);
        net.backward(&d).unwrap();
        sgd.step(&mut net, 0.01).unwrap();
        net.zero_grad();
    }
    assert!(losses[9] < losses[0], "{losses:?}");
}

#[test]
fn step_schedule_divides_every_thirty_epochs() {
    let cfg = TrainConfig::default();
    for (epoch, expected) in [(0, 0.01), (29, 0.01), (30, 0.001), (59, 0.001), (60, 0.0001)] {
        assert!((lr_at(epoch, &cfg) - expected).abs() < 1e-15, "epoch {epoch}");
    }
}

#[test]
fn same_seed_same_loss_curve_with_augmentation() {
    let data = noise_dataset(6, 3, 5);
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 4,
        seed: 9,
        augment: AugmentConfig::default(),
        ..TrainConfig::default()
    };
    let run = || {
        let mut net = Network::build(tiny_config(3), 1).unwrap();
        train(&mut net, &data, &cfg).unwrap().to_csv()
    };
    assert_eq!(run(), run());
}

#[test]
fn frozen_trunk_is_bitwise_unchanged() {
    let data = noise_dataset(4, 2, 6);
    let mut net = Network::build(tiny_config(2), 2).unwrap();
    let before = net.to_checkpoint(0);
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        freeze: vec![Group::Conv1, Group::Conv2, Group::Conv3, Group::Conv4],
        augment: AugmentConfig::none(),
        ..TrainConfig::default()
    };
    train(&mut net, &data, &cfg).unwrap();
    let after = net.to_checkpoint(1);
    let mut trained = Vec::new();
    for (name, t) in &before.entries {
        let same = after.get(name).unwrap().data() == t.data();
        match Group::of_param(name) {
            Some(Group::Conv1 | Group::Conv2 | Group::Conv3 | Group::Conv4) => assert!(same, "{name} moved"),
            Some(g) if !same => trained.push(g),
            _ => {}
        }
    }
    for g in [Group::Conv5_1, Group::Conv5_2, Group::Fc] {
        assert!(trained.contains(&g), "{g} did not train");
    }
}

