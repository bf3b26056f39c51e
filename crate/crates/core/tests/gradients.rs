use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rdg::data::{generate_synthetic, TreeShape};
use rdg::executor::{Executor, RunOptions};
use rdg::models::{build_iterative, build_recursive, oracle, BuiltModel, ModelConfig, ModelKind, ModelParams};
use rdg::tensor::Tensor;

fn graph_grads(m: &BuiltModel, p: &ModelParams, t: &rdg::data::TreeInstance, ex: &Executor) -> (f64, Vec<(String, Tensor)>) {
    let feeds = m.feeds(t, &p.shared()).unwrap();
    let mut fetch = vec![m.loss];
    fetch.extend(m.grads.iter().map(|(_, id)| *id));
    let out = ex.run(&m.train, &feeds, &fetch, &RunOptions::default()).unwrap();
    assert_eq!(out.cache_left, 0, "cache not drained");
    let grads = m
        .grads
        .iter()
        .enumerate()
        .map(|(i, (n, _))| (n.clone(), (*out.tensor(i + 1).unwrap()).clone()))
        .collect();
    (out.scalar(0).unwrap(), grads)
}

#[test]
fn recursive_iterative_and_oracle_agree() {
    let ex = Executor::new(3);
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for kind in ModelKind::ALL {
        for per_node in [false, true] {
            let mut cfg = ModelConfig::new(kind, 3, 7, 3);
            cfg.per_node_loss = per_node;
            let rec = build_recursive(&cfg).unwrap();
            let it = build_iterative(&cfg, 31).unwrap();
            let p = ModelParams::init_dense(&cfg, 0.5, &mut rng);
            for shape in TreeShape::ALL {
                for leaves in [1, 2, 8] {
                    let t = generate_synthetic(shape, leaves, 7, 3, &mut rng).unwrap();
                    let (lo, go) = oracle::forward_backward(&p, &t, per_node);
                    for m in [&rec, &it] {
                        let (l, g) = graph_grads(m, &p, &t, &ex);
                        assert!((l - lo).abs() < 1e-10, "{kind} {:?} loss {l} vs {lo}", m.mode);
                        for (name, gt) in g {
                            let diff = gt.max_abs_diff(&go[&name]);
                            assert!(diff < 1e-10, "{kind} {:?} {shape} {leaves} {name}: {diff}", m.mode);
                        }
                    }
                }
            }
        }
    }
}
