use aofp::data::{synthetic, Dataset, SyntheticConfig};
use aofp::graph::*;
use aofp::metrics::*;
use aofp::train::{train, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup(width: usize) -> (Network, ModelParams, Dataset) {
    let data = synthetic(&SyntheticConfig { examples: 300, seed: 4, ..Default::default() }).unwrap().downsample(2).unwrap();
    let spec = build_three_conv([8, 8, 3], 6, &[width, 6, 6]).unwrap();
    let net = Network::new(spec).unwrap();
    let params = train(&net, None, &data, &TrainConfig::desk(60, 4)).unwrap().params;
    (net, params, data)
}

/// Conv 0 with filter `j`'s kernel, bias and BN affine set to zero.
fn kill(net: &Network, params: &mut ModelParams, filters: &[usize]) {
    let width = net.width(0);
    let conv = params.conv_mut(0).unwrap();
    for (i, v) in conv.kernel.data_mut().iter_mut().enumerate() {
        if filters.contains(&(i % width)) {
            *v = 0.0;
        }
    }
    for &j in filters {
        conv.bias.data_mut()[j] = 0.0;
    }
    let bn = params.bn_mut(net.topology().consumers[0][0]).unwrap();
    for &j in filters {
        bn.gamma.data_mut()[j] = 0.0;
        bn.beta.data_mut()[j] = 0.0;
    }
}

#[test]
fn oracle_evaluation_count_is_arithmetic_series() {
    let (net, params, data) = setup(7);
    let assessment = data.subset(&(0..40).collect::<Vec<_>>()).unwrap();
    let c = 7;
    for q in 1..c {
        let greedy = oracle_prune(&net, &params, 0, q, &assessment, true).unwrap();
        assert_eq!(greedy.evaluations, (0..q).map(|k| c - k).sum::<usize>(), "q = {q}");
        assert_eq!(greedy.order.len(), q);
        let degraded = oracle_prune(&net, &params, 0, q, &assessment, false).unwrap();
        assert_eq!(degraded.evaluations, c);
    }
    assert!(oracle_prune(&net, &params, 0, c, &assessment, true).is_err());
}

#[test]
fn dead_filter_scores_zero_everywhere() {
    let (net, mut params, data) = setup(6);
    kill(&net, &mut params, &[3]);
    let s = oracle_score(&net, &params, 0, &data, &[]).unwrap();
    assert_eq!(s.scores.iter().find(|e| e.0 == 3).unwrap().1, 0.0);
    assert_eq!(magnitude_score(&params, 0).unwrap()[3], 0.0);
    assert_eq!(apoz_score(&net, &params, 0, &data).unwrap()[3], 1.0);
    assert_eq!(taylor_score(&net, &params, 0, &data).unwrap()[3], 0.0);
}

#[test]
fn greedy_order_matches_brute_force_on_four_filters() {
    let (net, params, data) = setup(4);
    let assessment = data.subset(&(0..60).collect::<Vec<_>>()).unwrap();
    let loss_without = |removed: &[usize]| {
        let mut p = params.clone();
        kill(&net, &mut p, removed);
        loss_sum(&net, &p, &assessment, None).unwrap()
    };
    let mut expected: Vec<usize> = Vec::new();
    for _ in 0..3 {
        let best = (0..4)
            .filter(|j| !expected.contains(j))
            .map(|j| {
                let mut trial = expected.clone();
                trial.push(j);
                (j, loss_without(&trial))
            })
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
            .unwrap()
            .0;
        expected.push(best);
    }
    let got = oracle_prune(&net, &params, 0, 3, &assessment, true).unwrap();
    assert_eq!(got.order, expected);
}

#[test]
fn single_removal_agrees_between_oracle_variants() {
    let (net, params, data) = setup(6);
    let a = oracle_prune(&net, &params, 0, 1, &data, true).unwrap();
    let b = oracle_prune(&net, &params, 0, 1, &data, false).unwrap();
    assert_eq!(a.order, b.order);
    assert_eq!(a.evaluations, b.evaluations);
}

#[test]
fn curves_start_at_unpruned_accuracy() {
    let (net, params, data) = setup(6);
    let assessment = data.subset(&(0..30).collect::<Vec<_>>()).unwrap();
    let cfg = CurveConfig { q: 4, aofp_batch: 10, seed: 1 };
    let cd = CurveData { assessment: &assessment, assessment_10x: Some(&data), eval: &data };
    let base = aofp::train::evaluate(&net, &params, &data, None).unwrap().top1;
    for m in Method::ALL {
        let c = pruning_curve(&net, &params, 0, m, cd, cfg).unwrap();
        assert_eq!(c.points.len(), 5, "{}", m.name());
        assert_eq!(c.points[0].top1, base);
        let mut sorted = c.order.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 4, "{} repeats a filter", m.name());
        assert_eq!(m.name().parse::<Method>().unwrap(), m);
    }
    assert_eq!(pruning_order(&net, &params, 0, Method::Index, cd, cfg).unwrap(), vec![0, 1, 2, 3]);
}

#[test]
fn auc_is_trapezoid_mean() {
    let c = PruningCurve {
        method: Method::Index,
        points: vec![
            CurvePoint { filters_pruned: 0, top1: 1.0 },
            CurvePoint { filters_pruned: 1, top1: 0.8 },
            CurvePoint { filters_pruned: 2, top1: 0.4 },
        ],
        assessment_size: 0,
        order: vec![0, 1],
    };
    approx::assert_abs_diff_eq!(c.auc(), (0.9 + 0.6) / 2.0, epsilon = 1e-12);
}

#[test]
fn magnitude_is_l1_norm() {
    let spec = build_three_conv([8, 8, 3], 2, &[3, 2, 2]).unwrap();
    let params = ModelParams::init(&spec, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let k = &params.conv(0).unwrap().kernel;
    let scores = magnitude_score(&params, 0).unwrap();
    for (j, &s) in scores.iter().enumerate() {
        let direct: f64 = k.data().iter().skip(j).step_by(3).map(|v| v.abs() as f64).sum();
        approx::assert_relative_eq!(s, direct, max_relative = 1e-12);
    }
}
