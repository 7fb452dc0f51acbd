use proptest::prelude::*;

use fedsim_core::data::{padded_batch, ClientDataset, PaddedBatchSpec};
use fedsim_core::models::{Activation, LinearRegression, LogisticClassifier, Mlp, Model};
use fedsim_core::tensor::Tensor;
use fedsim_core::tree::ParamTree;
use fedsim_core::{Batch, Rng};

fn dataset(x: Vec<f64>, d: usize, y: Vec<f64>) -> ClientDataset<f64> {
    let n = y.len();
    ClientDataset::new([
        ("x", Tensor::new(vec![n, d], x).unwrap()),
        ("y", Tensor::vector(y).unwrap()),
    ])
    .unwrap()
}

/// Pads `ds` into one batch of capacity `cap`.
fn padded(ds: &ClientDataset<f64>, cap: usize) -> Batch {
    padded_batch(ds, &PaddedBatchSpec::new(cap, vec![cap]).unwrap())
        .unwrap()
        .remove(0)
}

fn max_rel_error(model: &dyn Model<f64>, params: &ParamTree<f64>, b: &Batch) -> f64 {
    let g = model.grad(params, b).unwrap().flatten();
    let base = params.flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let lp = model.loss(&params.unflatten_like(&p).unwrap(), b).unwrap();
        p[i] -= 2.0 * h;
        let lm = model.loss(&params.unflatten_like(&p).unwrap(), b).unwrap();
        let fd = (lp - lm) / (2.0 * h);
        worst = worst.max((g[i] - fd).abs() / (g[i].abs() + fd.abs()).max(1e-8));
    }
    worst
}

fn sample(d: usize, n: usize, classes: Option<usize>) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
    let y = match classes {
        Some(k) => prop::collection::vec((0..k).prop_map(|c| c as f64), n).boxed(),
        None => prop::collection::vec(-3.0..3.0f64, n).boxed(),
    };
    (
        prop::collection::vec(-2.0..2.0f64, n * d),
        y,
        prop::collection::vec(-1.0..1.0f64, 64),
    )
}

fn with_values(init: ParamTree<f64>, pool: &[f64]) -> ParamTree<f64> {
    let v: Vec<f64> = (0..init.num_elements()).map(|i| pool[i % pool.len()] * (1.0 + i as f64 * 0.01)).collect();
    init.unflatten_like(&v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn linear_gradient_matches_differences(
        (x, y, pool) in (1usize..6).prop_flat_map(|n| sample(3, n, None)),
        extra in 0usize..4,
    ) {
        let model = LinearRegression::new(3);
        let b = padded(&dataset(x, 3, y.clone()), y.len() + extra);
        let p = with_values(Model::<f64>::init(&model, Rng::new(0)), &pool);
        prop_assert!(max_rel_error(&model, &p, &b) < 1e-5);
    }

    #[test]
    fn logistic_gradient_matches_differences(
        (x, y, pool) in (1usize..6).prop_flat_map(|n| sample(2, n, Some(3))),
        extra in 0usize..4,
    ) {
        let model = LogisticClassifier::new(2, 3).unwrap();
        let b = padded(&dataset(x, 2, y.clone()), y.len() + extra);
        let p = with_values(Model::<f64>::init(&model, Rng::new(0)), &pool);
        prop_assert!(max_rel_error(&model, &p, &b) < 1e-5);
    }

    #[test]
    fn mlp_gradient_matches_differences(
        (x, y, pool) in (1usize..6).prop_flat_map(|n| sample(2, n, Some(3))),
        extra in 0usize..4,
        sigmoid in any::<bool>(),
    ) {
        let act = if sigmoid { Activation::Sigmoid } else { Activation::Tanh };
        let model = Mlp::new(vec![2, 4, 3, 3], act).unwrap();
        let b = padded(&dataset(x, 2, y.clone()), y.len() + extra);
        let p = with_values(Model::<f64>::init(&model, Rng::new(0)), &pool);
        prop_assert!(max_rel_error(&model, &p, &b) < 1e-5);
    }

    #[test]
    fn identity_mlp_is_logistic(
        (x, y, pool) in (1usize..8).prop_flat_map(|n| sample(3, n, Some(4))),
    ) {
        let logistic = LogisticClassifier::new(3, 4).unwrap();
        let mlp = Mlp::new(vec![3, 3, 4], Activation::Identity).unwrap();
        let lp = with_values(Model::<f64>::init(&logistic, Rng::new(0)), &pool);
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let mp = ParamTree::branch([
            ("layer_0", ParamTree::branch([
                ("w", ParamTree::leaf(Tensor::new(vec![3, 3], eye).unwrap())),
                ("b", ParamTree::leaf(Tensor::zeros(vec![3]))),
            ]).unwrap()),
            ("layer_1", lp.clone()),
        ]).unwrap();
        let b = padded(&dataset(x, 3, y.clone()), y.len());
        let (l1, l2) = (logistic.loss(&lp, &b).unwrap(), mlp.loss(&mp, &b).unwrap());
        prop_assert!((l1 - l2).abs() < 1e-12);
        let gl = logistic.grad(&lp, &b).unwrap().flatten();
        let gm = mlp.grad(&mp, &b).unwrap();
        let gm_head = gm.get("layer_1").unwrap().flatten();
        for (a, c) in gl.iter().zip(&gm_head) {
            prop_assert!((a - c).abs() < 1e-12);
        }
    }
}

#[test]
fn generic_over_f32() {
    let ds = ClientDataset::<f32>::new([
        ("x", Tensor::new(vec![2, 1], vec![1.0f32, 2.0]).unwrap()),
        ("y", Tensor::vector(vec![1.0f32, 2.0]).unwrap()),
    ])
    .unwrap();
    let model = LinearRegression::new(1);
    let b = padded_batch(&ds, &PaddedBatchSpec::new(4, vec![4]).unwrap()).unwrap().remove(0);
    let p: ParamTree<f32> = model.init(Rng::new(0));
    let g = model.grad(&p, &b).unwrap();
    assert!(g.is_finite());
    assert_eq!(g.num_elements(), p.num_elements());
}
