use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use treeprompt::numerics::gradcheck::check_gradients;
use treeprompt::numerics::{Graph, NumericsError, ParamStore, Tape, Tensor, Var};

const TOL: f64 = 1e-4;
const H: f64 = 1e-5;

fn store_with(seed: u64, shapes: &[(&str, &[usize])]) -> ParamStore<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::new();
    for (name, shape) in shapes {
        s.insert(*name, Tensor::randn(shape, 1.0, &mut rng)).unwrap();
    }
    s
}

fn check(seed: u64, shapes: &[(&str, &[usize])], f: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var, NumericsError>) {
    let s = store_with(seed, shapes);
    let mask = vec![true; s.len()];
    let report = check_gradients::<NumericsError, _>(&s, &mask, H, |g| {
        let vars: Vec<Var> = s.ids().map(|id| g.param(id)).collect();
        f(g, &vars)
    })
    .unwrap();
    assert!(report.max_rel_error <= TOL, "seed {seed}: {report:?}");
}

/// Weighted sum so every output entry carries a distinct upstream gradient.
fn project(g: &mut Graph<'_, f64>, x: Var, seed: u64) -> Result<Var, NumericsError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let w = Tensor::randn(g.shape(x), 1.0, &mut rng);
    let w = g.constant(w);
    let m = g.mul(x, w)?;
    Ok(g.sum(m))
}

#[test]
fn sum_gradient_is_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[1, 5], &[1.0, -2.0, 3.0, 0.5, 7.0]), true);
    let loss = tape.sum(x);
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0; 5]);
}

#[test]
fn unit_norm_output_has_near_zero_gradient() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_f64(&[1, 4], &[0.3, -1.2, 2.0, 0.7]), true);
    let y = tape.l2norm_rows(x);
    let sq = tape.mul(y, y).unwrap();
    let loss = tape.sum(sq);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|v| v.abs() < 1e-9));
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::zeros(&[2, 2]), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn frozen_leaves_get_no_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.leaf(Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
    let x = tape.leaf(Tensor::from_f64(&[1, 2], &[1.0, 1.0]), true);
    let y = tape.matmul(x, w).unwrap();
    let loss = tape.sum(y);
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(w).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 7.0]);
}

#[test]
fn elementary_ops_match_finite_differences() {
    for seed in 0..20 {
        check(seed, &[("a", &[3, 4]), ("b", &[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, seed)
        });
        check(seed, &[("a", &[3, 4]), ("b", &[5, 4])], |g, v| {
            let y = g.matmul_nt(v[0], v[1])?;
            project(g, y, seed)
        });
        check(seed, &[("x", &[3, 4]), ("b", &[4])], |g, v| {
            let y = g.add_row(v[0], v[1])?;
            let y = g.relu(y);
            project(g, y, seed)
        });
        check(seed, &[("x", &[2, 6])], |g, v| {
            let y = g.l2norm_rows(v[0]);
            project(g, y, seed)
        });
        check(seed, &[("x", &[3, 5]), ("gamma", &[5]), ("beta", &[5])], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2])?;
            project(g, y, seed)
        });
        check(seed, &[("q", &[3, 4]), ("k", &[5, 4]), ("v", &[5, 3])], |g, v| {
            let y = g.attention(v[0], v[1], v[2])?;
            project(g, y, seed)
        });
        check(seed, &[("a", &[2, 3]), ("b", &[1, 3]), ("c", &[2, 2])], |g, v| {
            let rows = g.concat_rows(&[v[0], v[1]])?;
            let m = g.mean_rows(rows)?;
            let cols = g.concat_cols(&[v[0], v[2]])?;
            let s = g.slice_cols(cols, 1, 4)?;
            let s = g.slice_rows(s, 1, 2)?;
            let both = g.concat_cols(&[m, s])?;
            let r = g.reshape(both, &[2, 3])?;
            let r = g.scale(r, 0.7);
            project(g, r, seed)
        });
        check(seed, &[("table", &[6, 3])], |g, v| {
            let rows = g.gather_rows(v[0], &[1, 4, 1, 0])?;
            project(g, rows, seed)
        });
        check(seed, &[("logits", &[1, 5])], |g, v| g.cross_entropy(v[0], (seed % 5) as usize));
    }
}
