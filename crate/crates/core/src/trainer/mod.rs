//! Minibatch SGD with momentum, step learning-rate decay, group freezing and
//! per-sample augmentation.

mod augment;
mod config;
mod staged;

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

pub use augment::{augment, mirror, rotate_quarter, scale};
pub use config::{lr_at, parse_key_values, AugmentConfig, TrainConfig};
pub use staged::{staged_training, PhaseRecord, StagedConfig, StagedOutcome};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::layers::{ParamKind, Parameterized};
use crate::network::Network;
use crate::ops::{self, Mode};
use crate::seed;
use crate::tensor::{Element, Tensor};

/// One update with classical momentum: `v = momentum * v + g; p -= lr * v`.
pub fn sgd_step<T: Element>(params: &mut [T], grads: &[T], velocity: &mut [T], lr: T, momentum: T) {
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

/// Momentum SGD over the unfrozen weights of a model, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Vec<f32>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: HashMap::new(),
        }
    }

    /// Applies one step to every unfrozen weight that has a gradient. If any
    /// such gradient is non-finite nothing is updated and the error names it.
    pub fn step(&mut self, model: &mut impl Parameterized<f32>, lr: f64) -> Result<()> {
        let mut bad = None;
        model.visit(&mut |p| {
            if bad.is_none() && p.kind == ParamKind::Weight && !p.frozen {
                if let Some(g) = p.tensor.grad() {
                    if g.iter().any(|v| !v.is_finite()) {
                        bad = Some(p.name.to_string());
                    }
                }
            }
        });
        if let Some(name) = bad {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }

        let (lr, momentum, wd) = (lr as f32, self.momentum as f32, self.weight_decay as f32);
        let velocity = &mut self.velocity;
        model.visit_mut(&mut |p| {
            if p.kind != ParamKind::Weight || p.frozen {
                return;
            }
            let Some(grad) = p.tensor.grad().map(<[f32]>::to_vec) else {
                return;
            };
            let v = velocity.entry(p.name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
            let grad = if wd > 0.0 {
                grad.iter().zip(p.tensor.data()).map(|(g, w)| g + wd * w).collect()
            } else {
                grad
            };
            sgd_step(p.tensor.data_mut(), &grad, v, lr, momentum);
        });
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the epoch's samples.
    pub loss: f64,
    /// Fraction of samples classified correctly during the epoch's updates.
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,loss,train_acc\n");
        for m in &self.epochs {
            writeln!(s, "{},{},{:.6},{:.4}", m.epoch, m.lr, m.loss, m.train_acc).expect("write to String");
        }
        s
    }

    pub fn last(&self) -> Option<&EpochMetrics> {
        self.epochs.last()
    }
}

fn snapshot(net: &Network<f32>) -> Vec<Vec<f32>> {
    let mut out = Vec::new();
    net.visit(&mut |p| out.push(p.tensor.data().to_vec()));
    out
}

fn restore(net: &mut Network<f32>, snap: &[Vec<f32>]) {
    let mut it = snap.iter();
    net.visit_mut(&mut |p| {
        p.tensor.data_mut().copy_from_slice(it.next().expect("snapshot of the same network"));
        p.tensor.clear_grad();
    });
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Trains `net` in place. See [`train_with`].
pub fn train(net: &mut Network<f32>, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(net, data, cfg, |_| {})
}

/// Trains `net` in place, calling `on_epoch` after each epoch.
///
/// The run is a deterministic function of the seed: the epoch's sample order
/// and every augmentation draw come from streams derived from `(seed, epoch)`.
/// If the loss or a gradient becomes non-finite the parameters are restored to
/// the end of the last completed epoch and [`Error::Diverged`] is returned.
pub fn train_with(
    net: &mut Network<f32>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if data.num_classes() > net.config().num_classes {
        return Err(Error::Domain(format!(
            "dataset has {} classes but the network predicts {}",
            data.num_classes(),
            net.config().num_classes
        )));
    }
    let want = net.input_shape(1);
    data.images.expect_shape(crate::Shape::new(data.len(), want.c, want.h, want.w), "training images")?;
    augment::check_square(want, &cfg.augment)?;
    net.set_freeze(&cfg.freeze)?;
    net.zero_grad();

    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut report = TrainReport::default();
    let mut good = snapshot(net);
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let epoch_seed = seed::derive(cfg.seed, epoch as u64);
        let mut order: Vec<usize> = (0..data.len()).collect();
        if cfg.shuffle {
            order.shuffle(&mut seed::rng(seed::derive(epoch_seed, u64::MAX)));
        }

        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let step = (|| -> Result<(f64, usize)> {
                let (images, labels) = if cfg.augment.is_identity() {
                    data.batch(chunk)
                } else {
                    let samples = chunk
                        .iter()
                        .map(|&i| augment(&data.image(i), &cfg.augment, &mut seed::rng(seed::derive(epoch_seed, i as u64))))
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&Tensor<f32>> = samples.iter().collect();
                    (Tensor::stack(&refs)?, chunk.iter().map(|&i| data.labels[i]).collect())
                };
                let logits = net.forward(&images, Mode::Train)?;
                let (loss, d) = ops::softmax_cross_entropy(&logits, &labels)?;
                if !loss.is_finite() {
                    return Err(Error::Numeric(format!("loss became {loss}")));
                }
                let k = logits.shape().c;
                let hits = labels.iter().enumerate().filter(|(n, &l)| argmax(&logits.data()[n * k..(n + 1) * k]) == l).count();
                net.backward(&d)?;
                sgd.step(net, lr)?;
                net.zero_grad();
                Ok((loss as f64 * chunk.len() as f64, hits))
            })();
            match step {
                Ok((l, hits)) => {
                    loss_sum += l;
                    correct += hits;
                }
                Err(Error::Numeric(reason)) => {
                    restore(net, &good);
                    return Err(Error::Diverged { epoch, reason });
                }
                Err(e) => return Err(e),
            }
        }

        let metrics = EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        };
        log::info!("epoch {epoch}: lr {lr} loss {:.4} acc {:.3}", metrics.loss, metrics.train_acc);
        on_epoch(&metrics);
        report.epochs.push(metrics);
        good = snapshot(net);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{ParamMut, ParamRef};
    use crate::network::{Depth, Group, NetworkConfig};
    use crate::Shape;
    use rand::Rng;

    #[test]
    fn two_momentum_steps_by_hand() {
        let (mut p, mut v) = ([0.0f64], [0.0f64]);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        sgd_step(&mut p, &[1.0], &mut v, 0.1, 0.9);
        assert!((p[0] + 0.29).abs() < 1e-15);
    }

    #[test]
    fn zero_momentum_unit_lr_cancels() {
        let p0 = [0.5f64, -2.0, 3.25];
        let (mut p, mut v) = (p0, [0.0; 3]);
        sgd_step(&mut p, &p0, &mut v, 1.0, 0.0);
        assert_eq!(p, [0.0; 3]);
    }

    #[test]
    fn quadratic_matches_scalar_recurrence() {
        // loss p^2 / 2 has gradient p
        let (lr, mu) = (0.05, 0.9);
        let (mut p, mut v) = ([2.0f64], [0.0f64]);
        let (mut rp, mut rv) = (2.0f64, 0.0f64);
        for _ in 0..200 {
            let g = [p[0]];
            sgd_step(&mut p, &g, &mut v, lr, mu);
            rv = mu * rv + rp;
            rp -= lr * rv;
            assert!((p[0] - rp).abs() <= 1e-12);
        }
    }

    struct Scalar {
        value: Tensor<f32>,
        frozen: bool,
    }

    impl Parameterized<f32> for Scalar {
        fn visit(&self, f: &mut dyn FnMut(ParamRef<'_, f32>)) {
            f(ParamRef {
                name: "p",
                tensor: &self.value,
                kind: ParamKind::Weight,
                frozen: self.frozen,
            });
        }
        fn visit_mut(&mut self, f: &mut dyn FnMut(ParamMut<'_, f32>)) {
            f(ParamMut {
                name: "p",
                tensor: &mut self.value,
                kind: ParamKind::Weight,
                frozen: self.frozen,
            });
        }
        fn set_frozen(&mut self, frozen: bool) {
            self.frozen = frozen;
        }
    }

    #[test]
    fn non_finite_gradient_aborts_the_step() {
        let mut m = Scalar {
            value: Tensor::full(Shape::new(2, 1, 1, 1), 1.0),
            frozen: false,
        };
        m.value.accumulate_grad(&[0.5, f32::NAN]);
        let err = Sgd::new(0.9, 0.0).step(&mut m, 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numeric(msg) if msg.contains('p')));
        assert_eq!(m.value.data(), &[1.0, 1.0]);
    }

    #[test]
    fn frozen_parameter_is_skipped() {
        let mut m = Scalar {
            value: Tensor::full(Shape::new(1, 1, 1, 1), 1.0),
            frozen: true,
        };
        m.value.accumulate_grad(&[1.0]);
        Sgd::new(0.0, 0.0).step(&mut m, 1.0).unwrap();
        assert_eq!(m.value.data(), &[1.0]);
    }

    fn tiny_data(n: usize, classes: usize, seed: u64) -> Dataset {
        let mut rng = crate::seed::rng(seed);
        let images = Tensor::from_fn(Shape::new(n, 3, 64, 64), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new(images, labels, (0..classes).map(|c| c.to_string()).collect()).unwrap()
    }

    fn tiny_net(seed: u64) -> Network<f32> {
        Network::build(NetworkConfig::new(Depth::D18, 3).with_input(64).with_width(0.125), seed).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            epochs,
            augment: AugmentConfig::default(),
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_losses() {
        let data = tiny_data(6, 3, 1);
        let a = train(&mut tiny_net(1), &data, &quick(2)).unwrap();
        let b = train(&mut tiny_net(1), &data, &quick(2)).unwrap();
        assert_eq!(a, b);
        assert!(a.to_csv().starts_with("epoch,lr,loss,train_acc\n0,0.01,"));
    }

    #[test]
    fn zero_learning_rate_keeps_batch_loss() {
        let data = tiny_data(4, 3, 2);
        let mut net = tiny_net(2);
        let mut sgd = Sgd::new(0.9, 0.0);
        let (x, labels) = data.batch(&[0, 1, 2, 3]);
        let mut losses = Vec::new();
        for _ in 0..3 {
            let logits = net.forward(&x, Mode::Train).unwrap();
            let (loss, d) = ops::softmax_cross_entropy(&logits, &labels).unwrap();
            losses.push(loss);
            net.backward(&d).unwrap();
            sgd.step(&mut net, 0.0).unwrap();
            net.zero_grad();
        }
        assert!(losses.windows(2).all(|w| w[0] == w[1]), "{losses:?}");
    }

    #[test]
    fn fully_frozen_network_keeps_loss() {
        let data = tiny_data(4, 3, 2);
        let mut net = tiny_net(2);
        // every group frozen: BN runs on running statistics, so the loss is a pure function of the input
        let groups = net.groups();
        let cfg = TrainConfig {
            freeze: groups,
            shuffle: false,
            augment: AugmentConfig::none(),
            ..quick(3)
        };
        let before = net.to_checkpoint(0);
        let r = train(&mut net, &data, &cfg).unwrap();
        assert!(r.epochs.windows(2).all(|w| w[0].loss == w[1].loss));
        assert_eq!(net.to_checkpoint(0).entries, before.entries);
    }

    #[test]
    fn freeze_keeps_groups_bitwise() {
        let data = tiny_data(8, 3, 4);
        let mut net = tiny_net(4);
        let before = net.to_checkpoint(0);
        let cfg = TrainConfig {
            freeze: vec![Group::Conv1, Group::Conv2, Group::Conv3],
            ..quick(1)
        };
        train(&mut net, &data, &cfg).unwrap();
        let after = net.to_checkpoint(0);
        let mut changed_conv4 = false;
        for ((name, a), (_, b)) in before.entries.iter().zip(&after.entries) {
            match Group::of_param(name).unwrap() {
                Group::Conv1 | Group::Conv2 | Group::Conv3 => assert_eq!(a, b, "{name}"),
                Group::Conv4 => changed_conv4 |= a != b,
                _ => {}
            }
        }
        assert!(changed_conv4);
    }

    #[test]
    fn divergence_restores_last_epoch() {
        let data = tiny_data(4, 3, 5);
        let mut net = tiny_net(5);
        let cfg = TrainConfig {
            lr0: 1e300,
            batch_size: 2,
            augment: AugmentConfig::none(),
            ..quick(3)
        };
        let before = net.to_checkpoint(0);
        match train(&mut net, &data, &cfg) {
            Err(Error::Diverged { epoch, .. }) => {
                assert_eq!(epoch, 0);
                assert_eq!(net.to_checkpoint(0), before);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn label_beyond_head_is_rejected() {
        let data = tiny_data(4, 4, 6);
        assert!(matches!(train(&mut tiny_net(6), &data, &quick(1)), Err(Error::Domain(_))));
    }
}
