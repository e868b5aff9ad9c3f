use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::network::{backprop, Net};
use super::{Activation, ArchitectureSpec, EstimatorError, Hyperparams, ModelWeights, Provenance, Result, KERNEL};

/// One training example: network input and normalized target in `[-1, 1]^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub features: Vec<f64>,
    pub target: [f64; 2],
}

#[derive(Debug, Clone)]
pub enum Init {
    Random { seed: u64 },
    From(ModelWeights),
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub weights: ModelWeights,
    /// Mean sample loss seen during each epoch.
    pub loss_curve: Vec<f64>,
}

/// Fan-in scaled normal draws (He for ReLU layers, LeCun for linear ones), zero biases.
pub fn init_random(spec: &ArchitectureSpec, seed: u64) -> Result<ModelWeights> {
    let mut w = ModelWeights::zeros(spec.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gain = |linear: bool| if linear || spec.activation == Activation::Identity { 1.0 } else { 2.0 };
    let maps = spec.feature_maps();
    let layout = w.layout().clone();
    for (range, &(c_in, _, _)) in layout.conv.iter().zip(&maps) {
        let fan_in = (c_in * KERNEL * KERNEL) as f64;
        let normal = Normal::new(0.0, (gain(false) / fan_in).sqrt()).expect("positive std");
        for p in &mut w.params_mut()[range.weights.0..range.weights.1] {
            *p = normal.sample(&mut rng);
        }
    }
    let n_fc = layout.fc.len();
    for (i, (range, &(n_in, _))) in layout.fc.iter().zip(&layout.fc_dims).enumerate() {
        let normal = Normal::new(0.0, (gain(i + 1 == n_fc) / n_in as f64).sqrt()).expect("positive std");
        for p in &mut w.params_mut()[range.weights.0..range.weights.1] {
            *p = normal.sample(&mut rng);
        }
    }
    Ok(w)
}

fn check_inputs(spec: &ArchitectureSpec, data: &[TrainingSample]) -> Result<()> {
    if data.is_empty() {
        return Err(EstimatorError::EmptyBatch);
    }
    let expected = spec.input.len();
    if let Some(bad) = data.iter().find(|s| s.features.len() != expected) {
        return Err(EstimatorError::Shape { layer: "input".into(), expected, got: bad.features.len() });
    }
    Ok(())
}

/// Momentum SGD loop shared by [`train`] and [`fine_tune`].
///
/// Gradients are computed in `f32`; the parameters and velocity are kept in
/// `f64` and re-rounded before every step.
fn run_sgd(mut weights: ModelWeights, data: &[TrainingSample], hyper: &Hyperparams, epochs: usize) -> Result<TrainOutcome> {
    let features: Vec<Vec<f32>> = data.iter().map(|s| s.features.iter().map(|&v| v as f32).collect()).collect();
    let spec = weights.architecture().clone();
    let layout = weights.layout().clone();
    let mut velocity = vec![0.0; weights.params().len()];
    let mut shadow: Vec<f32> = weights.params().iter().map(|&p| p as f32).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut loss_curve = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(hyper.batch_size) {
            let inputs: Vec<&[f32]> = chunk.iter().map(|&i| features[i].as_slice()).collect();
            let targets: Vec<[f64; 2]> = chunk.iter().map(|&i| data[i].target).collect();
            let net = Net { spec: &spec, layout: &layout, params: &shadow };
            let (loss, grads) = match backprop(net, &inputs, &targets) {
                Ok(g) => g,
                Err(EstimatorError::NonFinite { .. }) => return Err(EstimatorError::Diverged { epoch }),
                Err(e) => return Err(e),
            };
            epoch_loss += loss * chunk.len() as f64;
            for (((p, v), s), &gi) in weights.params_mut().iter_mut().zip(velocity.iter_mut()).zip(shadow.iter_mut()).zip(&grads) {
                *v = hyper.momentum * *v - hyper.learning_rate * f64::from(gi);
                *p += *v;
                *s = *p as f32;
            }
        }
        let mean = epoch_loss / data.len() as f64;
        if !mean.is_finite() || weights.params().iter().any(|p| !p.is_finite()) || shadow.iter().any(|p| !p.is_finite()) {
            return Err(EstimatorError::Diverged { epoch });
        }
        loss_curve.push(mean);
    }
    Ok(TrainOutcome { weights, loss_curve })
}

pub fn train(data: &[TrainingSample], init: Init, spec: &ArchitectureSpec, hyper: &Hyperparams) -> Result<TrainOutcome> {
    hyper.validate()?;
    let weights = match init {
        Init::Random { seed } => init_random(spec, seed)?,
        Init::From(w) => {
            if w.architecture() != spec {
                return Err(EstimatorError::HashMismatch { expected: spec.hash(), found: w.architecture_hash() });
            }
            w
        }
    };
    check_inputs(spec, data)?;
    run_sgd(weights, data, hyper, hyper.epochs)
}

/// Continues training from pretrained weights on one user's calibration data.
///
/// Zero epochs or a zero learning rate leave the parameters untouched.
pub fn fine_tune(weights: &ModelWeights, data: &[TrainingSample], hyper: &Hyperparams, user: &str) -> Result<TrainOutcome> {
    if matches!(weights.provenance, Provenance::Random) {
        return Err(EstimatorError::Provenance(weights.provenance.to_string()));
    }
    if !(hyper.learning_rate >= 0.0) || hyper.batch_size == 0 || !(0.0..1.0).contains(&hyper.momentum) {
        return Err(EstimatorError::Hyperparams(format!("invalid fine-tuning settings {hyper:?}")));
    }
    check_inputs(weights.architecture(), data)?;
    let mut out = run_sgd(weights.clone(), data, hyper, hyper.epochs)?;
    out.weights.provenance = Provenance::Finetuned(user.to_string());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::{forward, InputShape};

    fn landmark_linear_spec() -> ArchitectureSpec {
        ArchitectureSpec {
            input: InputShape { channels: 4, height: 1, width: 1 },
            conv: vec![],
            fc: [6, 4, 2],
            activation: Activation::Relu,
        }
    }

    #[test]
    fn memorizes_single_sample() {
        let spec = ArchitectureSpec {
            input: InputShape { channels: 1, height: 6, width: 8 },
            conv: vec![crate::estimator::ConvBlockSpec { out_channels: 4, stride: 2, skip: false }],
            fc: [8, 8, 2],
            activation: Activation::Relu,
        };
        let sample = TrainingSample { features: (0..48).map(|i| (i % 5) as f64 / 5.0).collect(), target: [0.4, -0.3] };
        let hyper = Hyperparams { epochs: 300, ..Hyperparams::training() };
        let out = train(&[sample], Init::Random { seed: 1 }, &spec, &hyper).unwrap();
        assert!(*out.loss_curve.last().unwrap() < 1e-4, "{:?}", out.loss_curve.last());
    }

    #[test]
    fn training_is_deterministic() {
        let spec = landmark_linear_spec();
        let data: Vec<TrainingSample> = (0..40)
            .map(|i| {
                let x = i as f64 / 40.0;
                TrainingSample { features: vec![x, 1.0 - x, x * x, 0.5], target: [x - 0.5, 0.2 * x] }
            })
            .collect();
        let hyper = Hyperparams { epochs: 20, batch_size: 8, seed: 3, ..Hyperparams::training() };
        let a = train(&data, Init::Random { seed: 9 }, &spec, &hyper).unwrap();
        let b = train(&data, Init::Random { seed: 9 }, &spec, &hyper).unwrap();
        assert_eq!(a.weights.content_hash(), b.weights.content_hash());
        assert_eq!(a.loss_curve, b.loss_curve);
        assert!(a.loss_curve.last().unwrap() < &a.loss_curve[0]);
    }

    #[test]
    fn divergence_reports_epoch() {
        let spec = ArchitectureSpec { activation: Activation::Identity, ..landmark_linear_spec() };
        let data = vec![TrainingSample { features: vec![1e3, -1e3, 5e2, 1.0], target: [1.0, 1.0] }];
        let hyper = Hyperparams { learning_rate: 10.0, epochs: 50, ..Hyperparams::training() };
        assert!(matches!(train(&data, Init::Random { seed: 0 }, &spec, &hyper), Err(EstimatorError::Diverged { .. })));
    }

    #[test]
    fn fine_tune_edge_cases() {
        let spec = landmark_linear_spec();
        let mut w = init_random(&spec, 4).unwrap();
        let data = vec![TrainingSample { features: vec![0.1, 0.2, 0.3, 0.4], target: [0.5, 0.5] }; 5];
        let hyper = Hyperparams::fine_tuning();
        assert!(matches!(fine_tune(&w, &data, &hyper, "0"), Err(EstimatorError::Provenance(_))));
        w.provenance = Provenance::Pretrained("U".into());

        let zero_epochs = fine_tune(&w, &data, &Hyperparams { epochs: 0, ..hyper }, "3").unwrap();
        assert_eq!(zero_epochs.weights.params(), w.params());
        assert_eq!(zero_epochs.weights.provenance, Provenance::Finetuned("3".into()));

        let frozen = fine_tune(&w, &data, &Hyperparams { learning_rate: 0.0, epochs: 5, ..hyper }, "3").unwrap();
        assert_eq!(frozen.weights.params(), w.params());
        let first = frozen.loss_curve[0];
        assert!(frozen.loss_curve.iter().all(|&l| (l - first).abs() <= 1e-12 * first.abs().max(1.0)));

        let tuned = fine_tune(&w, &data, &Hyperparams { epochs: 30, ..hyper }, "3").unwrap();
        let before = forward(&w, &data[0].features).unwrap();
        let after = forward(&tuned.weights, &data[0].features).unwrap();
        let err = |p: [f64; 2]| (p[0] - 0.5).hypot(p[1] - 0.5);
        assert!(err(after) < err(before));
    }
}
