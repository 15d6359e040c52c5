//! Central finite differences against the tape, one op at a time.

use super::{Graph, Tensor, Var};

fn pseudo(n: usize, salt: f64) -> Vec<f64> {
    (0..n).map(|i| ((i as f64 + 1.0) * 0.7137 + salt).sin()).collect()
}

fn t(shape: &[usize], salt: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, pseudo(n, salt)).unwrap()
}

/// Compare analytic gradients of `sum(w ⊙ build(inputs))` with central
/// differences for every input element.
fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let eval = |ins: &[Tensor<f64>], want_grads: bool| {
        let mut g = Graph::<f64>::new();
        let vars: Vec<Var> = ins.iter().map(|x| g.variable(x.clone())).collect();
        let out = build(&mut g, &vars);
        let shape = g.shape(out).to_vec();
        let w = g.input(t(&shape, 0.123));
        let p = g.mul(out, w);
        let loss = g.sum(p);
        let value = g.scalar(loss);
        let grads = want_grads.then(|| {
            let gr = g.backward(loss);
            vars.iter()
                .zip(ins)
                .map(|(v, x)| gr.get(*v).map(|s| s.to_vec()).unwrap_or(vec![0.0; x.numel()]))
                .collect::<Vec<_>>()
        });
        (value, grads)
    };
    let (_, analytic) = eval(&inputs, true);
    let analytic = analytic.unwrap();
    let h = 1e-6;
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut plus = inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fd = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let an = analytic[i][j];
            let err = (fd - an).abs() / (fd.abs().max(an.abs()).max(1e-3));
            assert!(err < 1e-5, "input {i} elem {j}: analytic {an} vs numeric {fd}");
        }
    }
}

#[test]
fn elementwise_ops() {
    check(vec![t(&[2, 3], 0.1), t(&[2, 3], 0.9)], |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        let k = g.scale(m, -1.7);
        let c = g.add_scalar(k, 0.3);
        g.tanh(c)
    });
}

#[test]
fn piecewise_ops_away_from_kinks() {
    // values bounded away from 0 so the kink is never straddled
    let x = Tensor::new(&[6], vec![-0.8, -0.3, 0.4, 0.9, -1.2, 0.25]).unwrap();
    check(vec![x.clone()], |g, v| g.abs(v[0]));
    check(vec![x.clone()], |g, v| g.relu(v[0]));
    check(vec![x], |g, v| g.leaky_relu(v[0], 0.2));
}

#[test]
fn matmul_all_transpose_and_broadcast_variants() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        check(vec![t(&sa, 0.2), t(&sb, 0.5)], |g, v| g.matmul(v[0], v[1], ta, tb));
        // weight broadcast over the batch
        let sb1 = if tb { [1, 5, 4] } else { [1, 4, 5] };
        check(vec![t(&sa, 0.3), t(&sb1, 0.6)], |g, v| g.matmul(v[0], v[1], ta, tb));
        check(vec![t(&sb1[1..], 0.4), t(&sa, 0.7)], |g, v| {
            let w = g.reshape(v[0], &sb1);
            g.matmul(v[1], w, ta, tb)
        });
    }
    check(vec![t(&[3, 4], 0.1), t(&[4, 2], 0.2)], |g, v| g.matmul(v[0], v[1], false, false));
}

#[test]
fn conv_with_padding_and_stride() {
    for (k, stride) in [(3, 1), (3, 2), (1, 1), (4, 2)] {
        let pad = k / 2;
        check(vec![t(&[2, 2, 5, 6], 0.3), t(&[3, 2, k, k], 0.8), t(&[3], 0.1)], |g, v| {
            let y = g.conv2d(v[0], v[1], stride, pad);
            g.channel_bias(y, v[2])
        });
    }
}

#[test]
fn group_norm_gradients() {
    check(vec![t(&[2, 4, 3, 3], 0.4), t(&[4], 1.1), t(&[4], 0.2)], |g, v| {
        g.group_norm(v[0], v[1], v[2], 2)
    });
}

#[test]
fn softmax_and_normalization() {
    check(vec![t(&[3, 4], 0.5)], |g, v| g.softmax(v[0]));
    check(vec![t(&[2, 3, 4], 0.5)], |g, v| g.softmax(v[0]));
    check(vec![t(&[3, 4], 0.5)], |g, v| g.l2_normalize(v[0]));
    check(vec![t(&[3, 4], 0.5), t(&[3, 4], 0.8)], |g, v| g.row_dot(v[0], v[1]));
}

#[test]
fn resampling_and_layout() {
    check(vec![t(&[1, 2, 3, 2], 0.1)], |g, v| g.upsample2x(v[0]));
    check(vec![t(&[1, 2, 4, 6], 0.1)], |g, v| g.avg_pool2x(v[0]));
    check(vec![t(&[2, 1, 3], 0.1), t(&[2, 2, 3], 0.5)], |g, v| g.concat1(&[v[0], v[1]]));
    check(vec![t(&[3, 2], 0.1)], |g, v| g.repeat(v[0], 4));
    check(vec![t(&[2, 6], 0.1)], |g, v| g.reshape(v[0], &[3, 4]));
}

#[test]
fn reductions_and_cross_entropy() {
    check(vec![t(&[2, 3], 0.1)], |g, v| g.sum(v[0]));
    check(vec![t(&[2, 3], 0.1)], |g, v| g.mean(v[0]));
    check(vec![t(&[3, 5], 0.3)], |g, v| g.cross_entropy(v[0], &[4, 0, 2]));
}

#[test]
fn shared_parameter_accumulates_over_uses() {
    // d/dx sum(x*x + x) = 2x + 1
    let mut g = Graph::<f64>::new();
    let x = g.variable(Tensor::new(&[2], vec![0.5, -2.0]).unwrap());
    let sq = g.mul(x, x);
    let y = g.add(sq, x);
    let l = g.sum(y);
    let gr = g.backward(l);
    assert_eq!(gr.get(x).unwrap(), &[2.0, -3.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
    let x = g.variable(Tensor::new(&[2], vec![3.0, 4.0]).unwrap());
    let y = g.mul(c, x);
    let l = g.sum(y);
    let gr = g.backward(l);
    assert!(gr.get(c).is_none());
    assert_eq!(gr.get(x).unwrap(), &[1.0, 2.0]);
}
