use diffpo_core::numcore::{seeded_rng, RngExt, Tape, Tensor, Var};

type Build = fn(&mut Tape, &[Var]) -> Var;

fn random(shape: &[usize], rng: &mut impl RngExt) -> Tensor {
    let n = shape.iter().product();
    // Offset keeps ReLU inputs away from the kink.
    let data = rng.normals(n).into_iter().map(|v| v + 0.1f64.copysign(v)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn eval(inputs: &[Tensor], build: Build) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    tape.value(out).data()[0]
}

fn max_relative_error(shapes: &[&[usize]], seed: u64, build: Build) -> f64 {
    let mut rng = seeded_rng(seed);
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars);
    let grads = tape.backward(out).unwrap();
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]);
        for j in 0..input.len() {
            let mut plus = inputs.clone();
            plus[k].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[k].data_mut()[j] -= h;
            let numeric = (eval(&plus, build) - eval(&minus, build)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(err);
        }
    }
    worst
}

fn assert_gradients(name: &str, shapes: &[&[usize]], build: Build) {
    for seed in 0..3 {
        let err = max_relative_error(shapes, seed, build);
        assert!(err < 1e-4, "{name} seed {seed}: {err:e}");
    }
}

#[test]
fn elementwise_ops() {
    assert_gradients("add", &[&[3, 4], &[3, 4]], |t, v| {
        let s = t.add(v[0], v[1]).unwrap();
        let q = t.square(s).unwrap();
        t.sum(q).unwrap()
    });
    assert_gradients("sub", &[&[3, 4], &[3, 4]], |t, v| {
        let s = t.sub(v[0], v[1]).unwrap();
        let q = t.square(s).unwrap();
        t.mean(q).unwrap()
    });
    assert_gradients("mul", &[&[2, 5], &[2, 5]], |t, v| {
        let s = t.mul(v[0], v[1]).unwrap();
        t.sum(s).unwrap()
    });
    assert_gradients("scale", &[&[4, 2]], |t, v| {
        let s = t.scale(v[0], -1.7).unwrap();
        let q = t.square(s).unwrap();
        t.sum(q).unwrap()
    });
    assert_gradients("relu", &[&[4, 3], &[4, 3]], |t, v| {
        let r = t.relu(v[0]).unwrap();
        let s = t.mul(r, v[1]).unwrap();
        t.sum(s).unwrap()
    });
    assert_gradients("silu", &[&[4, 3], &[4, 3]], |t, v| {
        let r = t.silu(v[0]).unwrap();
        let s = t.mul(r, v[1]).unwrap();
        t.sum(s).unwrap()
    });
}

#[test]
fn matrix_ops() {
    assert_gradients("matmul", &[&[3, 4], &[4, 2], &[3, 2]], |t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        let s = t.mul(p, v[2]).unwrap();
        t.sum(s).unwrap()
    });
    assert_gradients("add_bias", &[&[5, 3], &[3]], |t, v| {
        let p = t.add_bias(v[0], v[1]).unwrap();
        let q = t.square(p).unwrap();
        t.sum(q).unwrap()
    });
    assert_gradients("softmax", &[&[3, 4], &[3, 4]], |t, v| {
        let p = t.softmax(v[0]).unwrap();
        let s = t.mul(p, v[1]).unwrap();
        t.sum(s).unwrap()
    });
    assert_gradients("gather_rows", &[&[4, 3], &[5, 3]], |t, v| {
        let g = t.gather_rows(v[0], vec![3, 0, 0, 2, 1]).unwrap();
        let s = t.mul(g, v[1]).unwrap();
        t.sum(s).unwrap()
    });
    assert_gradients("scale_rows", &[&[3, 2]], |t, v| {
        let g = t.scale_rows(v[0], vec![0.5, -2.0, 3.0]).unwrap();
        let q = t.square(g).unwrap();
        t.sum(q).unwrap()
    });
    assert_gradients("softmax_cross_entropy", &[&[4, 3]], |t, v| {
        t.softmax_cross_entropy(v[0], vec![0, 2, 1, 2]).unwrap()
    });
}

#[test]
fn linear_regression_mse() {
    assert_gradients("mse", &[&[5, 3], &[3, 3], &[5, 3]], |t, v| {
        let p = t.matmul(v[0], v[1]).unwrap();
        let r = t.sub(p, v[2]).unwrap();
        let q = t.square(r).unwrap();
        t.mean(q).unwrap()
    });
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut rng = seeded_rng(4);
    let w = random(&[3, 3], &mut rng);
    let x = random(&[4, 3], &mut rng);
    let grad_of = |which: u8| {
        let mut t = Tape::new();
        let wv = t.leaf(w.clone());
        let xv = t.constant(x.clone());
        let p = t.matmul(xv, wv).unwrap();
        let q = t.square(p).unwrap();
        let l1 = t.sum(q).unwrap();
        let s = t.silu(p).unwrap();
        let l2 = t.mean(s).unwrap();
        let loss = match which {
            1 => l1,
            2 => l2,
            _ => t.add(l1, l2).unwrap(),
        };
        t.backward(loss).unwrap().wrt(wv)
    };
    let (g1, g2, g12) = (grad_of(1), grad_of(2), grad_of(0));
    for j in 0..g12.len() {
        assert!((g12.data()[j] - g1.data()[j] - g2.data()[j]).abs() < 1e-12);
    }
}
