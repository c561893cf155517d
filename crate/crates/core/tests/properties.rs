//! Randomised gradient checks and the Monte Carlo data-distribution check.

use leo_core::autodiff::{Graph, Mode, NodeId};
use leo_core::encoder::TokenizedFunction;
use leo_core::gradcheck::finite_difference_check;
use leo_core::model::{init_model, ModelConfig};
use leo_core::objective::{data_distribution_loss, GateSource};
use leo_core::params::{uniform, ParamGroup, ParameterStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Applies a random smooth or piecewise-linear op that keeps the shape `[r, c]`.
fn random_unary(g: &mut Graph, x: NodeId, op: u32) -> leo_core::Result<NodeId> {
    match op {
        0 => g.sigmoid(x),
        1 => g.tanh(x),
        2 => g.softmax(x),
        3 => g.log_softmax(x),
        4 => g.scale(x, -1.7),
        5 => g.row_normalize(x),
        6 => g.relu(x),
        7 => {
            let e = g.exp(x)?;
            g.log(e)
        }
        _ => g.mul(x, x),
    }
}

#[test]
fn random_graphs_match_finite_differences() {
    let mut worst = 0.0f64;
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = (rng.random_range(2..5), rng.random_range(2..5));
        let mut store = ParameterStore::new();
        store.insert("a", ParamGroup::Encoder, uniform(&[r, c], 1.0, &mut rng)).unwrap();
        store.insert("b", ParamGroup::Encoder, uniform(&[c, c], 1.0, &mut rng)).unwrap();
        store.insert("s", ParamGroup::Encoder, uniform(&[r, 1], 1.0, &mut rng)).unwrap();
        let ops: Vec<u32> = (0..rng.random_range(2..6)).map(|_| rng.random_range(0..9)).collect();
        let mixers: Vec<u32> = ops.iter().map(|_| rng.random_range(0..4)).collect();
        let readout = uniform(&[r, c], 1.0, &mut rng);
        let report = finite_difference_check(
            &mut store,
            |s| {
                let mut g = Graph::new(Mode::Eval);
                let a = g.param_by_name(s, "a")?;
                let b = g.param_by_name(s, "b")?;
                let sc = g.param_by_name(s, "s")?;
                let mut h = a;
                for (&op, &mix) in ops.iter().zip(&mixers) {
                    h = random_unary(&mut g, h, op)?;
                    h = match mix {
                        0 => g.matmul(h, b)?,
                        1 => g.row_scale(h, sc)?,
                        2 => g.add(h, a)?,
                        _ => h,
                    };
                }
                let l = g.weighted_sum(h, readout.clone())?;
                Ok((g, l))
            },
            1e-5,
            1e-4,
            0,
        )
        .unwrap();
        assert!(report.passed(), "seed {seed} ops {ops:?}: {report:?}");
        worst = worst.max(report.max_rel_error());
    }
    assert!(worst < 1e-4, "{worst}");
}

/// Mean cross-entropy over relaxed random masks at low temperature matches the
/// exact expectation over all `2^3` hard masks of a 3-statement function.
#[test]
fn random_mask_loss_matches_exhaustive_expectation() {
    let cfg = ModelConfig::new(10, 4, 3, 5, 5, 0.8);
    let store = init_model(&cfg, 9).unwrap();
    let f = TokenizedFunction {
        statements: vec![vec![2, 3], vec![4, 5, 6], vec![7]],
        label: 1,
    };
    let batch = [&f];
    let mut rng = ChaCha8Rng::seed_from_u64(0);

    let mut exact = 0.0;
    let mut per_mask = Vec::new();
    for bits in 0..8u32 {
        let mask: Vec<f64> = (0..3).map(|i| f64::from((bits >> i) & 1)).collect();
        let gates = [mask];
        let step = data_distribution_loss(&store, &cfg, &batch, 0.5, GateSource::Fixed(&gates), Mode::Eval, &mut rng).unwrap();
        exact += step.parts.cross_entropy / 8.0;
        per_mask.push(step.parts.cross_entropy);
    }
    let spread = per_mask.iter().cloned().fold(f64::MIN, f64::max) - per_mask.iter().cloned().fold(f64::MAX, f64::min);
    assert!(spread > 1e-3, "masks must matter for the check to mean anything: {per_mask:?}");

    let draws = 1000;
    let mut mc = 0.0;
    for _ in 0..draws {
        let step = data_distribution_loss(&store, &cfg, &batch, 0.05, GateSource::Sample, Mode::Eval, &mut rng).unwrap();
        mc += step.parts.cross_entropy / f64::from(draws);
    }
    assert!((mc - exact).abs() <= 0.05 * exact, "mc {mc} exact {exact}");
}
