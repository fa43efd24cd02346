//! Invariants checked over generated inputs.

use std::sync::Arc;

use kronnet::activations::{ActivationSpec, Primitive, SchemeName};
use kronnet::data::sample_collocation;
use kronnet::linalg::singular_values;
use kronnet::network::{init_model, InitScheme, KnnModel, ParamFilter, ParamGroup, WeightInit};
use kronnet::theory::{build_matrices, trig_family, TheoryData, TrainMask, TwoLayerModel};
use kronnet::training::{
    apply_schedule_transition, sgd_step, train, LossKind, LossSpec, OptState, OptimizerSpec, Schedule, StepMasks,
    TrainData, TrainJob, TransitionMode,
};
use ndarray::Array2;
use proptest::prelude::*;

const BASES: [Primitive; 5] = [Primitive::Tanh, Primitive::Sin, Primitive::Cos, Primitive::Sigmoid, Primitive::Softplus];

fn scheme() -> impl Strategy<Value = SchemeName> {
    prop_oneof![
        Just(SchemeName::Fixed),
        Just(SchemeName::LLaaf),
        (1usize..=5).prop_map(SchemeName::Rowdy),
    ]
}

fn widths(max_depth: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=6, 2..=max_depth + 1)
}

/// A model with every parameter moved off its initial value.
fn model(widths: &[usize], scheme: SchemeName, base: usize, n: f64, seed: u64, shift: &[f64]) -> (KnnModel, ActivationSpec) {
    let spec = ActivationSpec::new(scheme, BASES[base % BASES.len()], n);
    let mut m = init_model(widths, &spec, &InitScheme::Practice(WeightInit::XavierNormal), seed).unwrap();
    let theta: Vec<f64> = m
        .to_vec()
        .iter()
        .enumerate()
        .map(|(i, t)| t + shift[i % shift.len()])
        .collect();
    m.set_from_slice(&theta).unwrap();
    (m, spec)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn block_and_efficient_forward_agree(
        w in widths(3),
        k in 1usize..=4,
        base in 0usize..5,
        seed in any::<u64>(),
        shift in prop::collection::vec(-0.5f64..0.5, 1..8),
        x in prop::collection::vec(-2.0f64..2.0, 6),
    ) {
        let (m, _) = model(&w, SchemeName::Rowdy(k), base, 2.0, seed, &shift);
        let x = &x[..w[0]];
        let a = m.forward_block(x).unwrap();
        let b = m.forward_efficient(x).unwrap();
        for (p, q) in a.iter().zip(&b) {
            prop_assert!((p - q).abs() <= 1e-12 * p.abs().max(1.0), "{p} vs {q}");
        }
    }

    #[test]
    fn flatten_round_trips(
        w in widths(4),
        s in scheme(),
        seed in any::<u64>(),
        shift in prop::collection::vec(-1.0f64..1.0, 1..8),
    ) {
        let (m, _) = model(&w, s, 0, 1.0, seed, &shift);
        for filter in [ParamFilter::All, ParamFilter::Trainable] {
            let flat = m.flatten(filter);
            prop_assert_eq!(m.unflatten(&flat).unwrap(), m.clone());
        }
        let mut copy = m.clone();
        copy.set_from_slice(&m.to_vec()).unwrap();
        prop_assert_eq!(&copy, &m);
        prop_assert_eq!(m.flatten(ParamFilter::Trainable).theta.len(), m.trainable_count());
        prop_assert_eq!(m.to_vec().len(), m.param_count());
    }

    #[test]
    fn singular_values_match_nalgebra(
        rows in 1usize..=6,
        cols in 1usize..=6,
        entries in prop::collection::vec(-3.0f64..3.0, 36),
    ) {
        let a = Array2::from_shape_fn((rows, cols), |(r, c)| entries[r * 6 + c]);
        let ours = singular_values(&a).unwrap();
        let na = nalgebra::DMatrix::from_fn(rows, cols, |r, c| a[[r, c]]);
        let mut want: Vec<f64> = na.singular_values().iter().copied().collect();
        want.sort_by(|p, q| q.total_cmp(p));
        prop_assert_eq!(ours.len(), rows.min(cols));
        let top = want[0].max(1.0);
        for (o, w) in ours.iter().zip(&want) {
            // Squaring through the Gram matrix costs accuracy on the
            // smallest values, relative to the largest.
            prop_assert!((o - w).abs() <= 1e-7 * top, "{ours:?} vs {want:?}");
        }
    }

    #[test]
    fn kronecker_rate_dominates_plain_rate(
        n in 1usize..=6,
        k in 1usize..=5,
        m in 1usize..=4,
        d in 1usize..=2,
        seed in any::<u64>(),
    ) {
        let model = TwoLayerModel::init_theory(Arc::new(trig_family(k).unwrap()), n, d + 1, seed).unwrap();
        let data = TheoryData::random(m, d, seed).unwrap();
        let mats = build_matrices(&model, &data).unwrap();
        let res = model.residual(&data);
        let full = mats.gradient(&res, TrainMask::FULL);
        let ffn = mats.gradient(&res, TrainMask::FFN);
        prop_assert!(full.dot(&full) >= ffn.dot(&ffn));
    }

    #[test]
    fn collocation_stays_in_the_square(
        n_res in 1usize..200,
        n_bnd in 1usize..50,
        seed in any::<u64>(),
    ) {
        let c = sample_collocation(n_res, n_bnd, seed).unwrap();
        prop_assert_eq!(c.interior.dim(), (n_res, 2));
        prop_assert_eq!(c.boundary.dim(), (n_bnd, 2));
        for v in c.interior.iter() {
            prop_assert!(*v > -1.0 && *v < 1.0);
        }
        for r in c.boundary.rows() {
            prop_assert!(r.iter().all(|v| (-1.0..=1.0).contains(v)));
            prop_assert!(r.iter().any(|v| v.abs() == 1.0));
        }
    }

    #[test]
    fn weight_decay_never_touches_adaptive_parameters(
        w in widths(3),
        k in 2usize..=5,
        seed in any::<u64>(),
        wd in 1e-4f64..1e-1,
        grad_scale in -1.0f64..1.0,
    ) {
        let (m, _) = model(&w, SchemeName::Rowdy(k), 0, 1.0, seed, &[0.1]);
        let masks = StepMasks::for_model(&m);
        let before = m.to_vec();
        let spec = OptimizerSpec::sgd_momentum(0.05, 0.8, wd, 1, 1);
        let mut no_decay = spec;
        no_decay.weight_decay = 0.0;
        let grad: Vec<f64> = (0..before.len()).map(|i| grad_scale * (i as f64).cos()).collect();
        let mut a = before.clone();
        let mut b = before.clone();
        sgd_step(&mut OptState::new(a.len()), &mut a, &grad, &masks, &spec).unwrap();
        sgd_step(&mut OptState::new(b.len()), &mut b, &grad, &masks, &no_decay).unwrap();
        let groups = m.param_index(ParamFilter::All);
        for i in 0..a.len() {
            let adaptive = matches!(groups[i].group, ParamGroup::Alpha | ParamGroup::Omega);
            if adaptive {
                prop_assert_eq!(a[i].to_bits(), b[i].to_bits());
            }
        }
    }

    #[test]
    fn switching_to_llaaf_keeps_weights_biases_and_base_frequency(
        w in widths(3),
        k in 2usize..=5,
        seed in any::<u64>(),
        shift in prop::collection::vec(-0.5f64..0.5, 1..8),
        zero in any::<bool>(),
    ) {
        let (m, spec) = model(&w, SchemeName::Rowdy(k), 0, 1.0, seed, &shift);
        let mode = if zero { TransitionMode::Zero } else { TransitionMode::Freeze };
        let out = apply_schedule_transition(&m, &spec, SchemeName::LLaaf, mode).unwrap();
        for (a, b) in m.layers.iter().zip(&out.layers) {
            prop_assert_eq!(&a.weight, &b.weight);
            prop_assert_eq!(&a.bias, &b.bias);
            if let (Some(p), Some(q)) = (&a.adaptive, &b.adaptive) {
                prop_assert_eq!(p.omega[0].to_bits(), q.omega[0].to_bits());
                prop_assert!(q.omega_trainable[0]);
                prop_assert!(q.alpha_trainable.iter().chain(&q.omega_trainable[1..]).all(|t| !t));
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn training_respects_masks_and_is_deterministic(
        s in scheme(),
        base in 0usize..5,
        seed in any::<u64>(),
        batch in prop::option::of(1usize..4),
    ) {
        let (m, spec) = model(&[1, 4, 3, 1], s, base, 2.0, seed, &[0.0]);
        let x = Array2::from_shape_fn((5, 1), |(r, _)| r as f64 * 0.4 - 0.8);
        let y = x.mapv(|v| (3.0 * v).sin());
        let data = TrainData::Regression { x, y };
        let mut opt = OptimizerSpec::adam(1e-2, 15);
        opt.batch_size = batch;
        let job = TrainJob {
            activation: spec,
            data: &data,
            optimizer: opt,
            loss: LossSpec::new(LossKind::Square),
            schedule: Schedule::default(),
            eval: None,
            eval_every: 0,
            seed,
        };
        let (a, ra) = train(m.clone(), &job).unwrap();
        let (b, rb) = train(m.clone(), &job).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(ra.same_trajectory(&rb));
        let mask = m.trainable_mask();
        for ((t0, t1), on) in m.to_vec().iter().zip(a.to_vec()).zip(mask) {
            if !on {
                prop_assert_eq!(t0.to_bits(), t1.to_bits());
            }
        }
    }
}
