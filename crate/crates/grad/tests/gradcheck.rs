use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use volrecon_grad::{Bound, Conv2d, Graph, GroupNorm, Linear, ParamStore, Tensor, Var};

type Build = dyn Fn(&mut Graph<f64>, &ParamStore<f64>) -> Var;

/// Max relative error between backprop and central differences over every scalar.
fn check(store: &mut ParamStore<f64>, build: &Build) -> f64 {
    let mut g = Graph::new();
    let loss = build(&mut g, store);
    let analytic = g.backward(loss).flat_for(store);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..store.num_scalars() {
        let orig = store.scalar(i);
        store.set_scalar(i, orig + h);
        let mut gp = Graph::new();
        let lp = build(&mut gp, store);
        let fp = gp.value(lp).item();
        store.set_scalar(i, orig - h);
        let mut gm = Graph::new();
        let lm = build(&mut gm, store);
        let fm = gm.value(lm).item();
        store.set_scalar(i, orig);
        let numeric = (fp - fm) / (2.0 * h);
        let err = (numeric - analytic[i]).abs() / (numeric.abs() + analytic[i].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn mlp_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let l1 = Linear::new(&mut store, "l1", 5, 4, true, &mut rng);
    let l2 = Linear::new(&mut store, "l2", 4, 3, true, &mut rng);
    let x = rand_tensor(&mut rng, &[6, 5]);
    let y = rand_tensor(&mut rng, &[2, 3]);
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let p = Bound::trainable(s);
        let xv = g.constant(x.clone());
        let h = l1.forward(g, p, xv);
        let h = g.silu(h);
        let h = l2.forward(g, p, h);
        let h = g.sigmoid(h);
        let h = g.reshape(h, &[2, 3, 3]);
        let h = g.weighted_sum_axis(h, 1, &[0.2, 0.5, 0.3]);
        let h = g.affine(h, 2.0, -1.0);
        let t = g.constant(y.clone());
        let l = g.mse(h, t);
        g.scale(l, 3.0)
    };
    let err = check(&mut store, &build);
    assert!(err < 1e-6, "relative error {err}");
}

#[test]
fn conv_unet_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let c1 = Conv2d::same3(&mut store, "c1", 2, 4, &mut rng);
    let gn = GroupNorm::new(&mut store, "gn", 4, 2);
    let down = Conv2d::new(&mut store, "down", 4, 4, 3, 2, 1, &mut rng);
    let c2 = Conv2d::same3(&mut store, "c2", 8, 1, &mut rng);
    let emb = Linear::new(&mut store, "emb", 3, 4, true, &mut rng);
    let token = store.add_uniform("token", &[3], 1.0, &mut rng);
    let x = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    let cond = rand_tensor(&mut rng, &[2, 3]);
    let y = rand_tensor(&mut rng, &[2, 1, 6, 6]);
    // gamma/beta start at 1/0; perturb so their gradients are generic.
    for i in 0..store.get(gn.gamma).numel() {
        store.get_mut(gn.gamma).data_mut()[i] = 0.5 + 0.3 * i as f64;
        store.get_mut(gn.beta).data_mut()[i] = 0.1 * i as f64;
    }
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let p = Bound::trainable(s);
        let xv = g.constant(x.clone());
        let h = c1.forward(g, p, xv);
        let h = gn.forward(g, p, h);
        let h = g.silu(h);
        let cv = g.constant(cond.clone());
        let tok = p.var(g, token);
        let cv = g.replace_rows(cv, tok, &[true, false]);
        let e = emb.forward(g, p, cv);
        let h = g.add_channel(h, e);
        let d = down.forward(g, p, h);
        let u = g.upsample2x(d);
        let h = g.concat(&[h, u], 1);
        let o = c2.forward(g, p, h);
        let t = g.constant(y.clone());
        g.mse(o, t)
    };
    let err = check(&mut store, &build);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn attention_ops_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let q = store.add_uniform("q", &[2, 5, 3], 1.0, &mut rng);
    let k = store.add_uniform("k", &[2, 4, 3], 1.0, &mut rng);
    let v = store.add_uniform("v", &[2, 3, 4], 1.0, &mut rng);
    let feat = store.add_uniform("feat", &[2, 3], 1.0, &mut rng);
    let y = rand_tensor(&mut rng, &[2, 3, 5]);
    let build = move |g: &mut Graph<f64>, s: &ParamStore<f64>| {
        let p = Bound::trainable(s);
        let (qv, kv, vv) = (p.var(g, q), p.var(g, k), p.var(g, v));
        let scores = g.bmm(qv, kv, false, true);
        let attn = g.softmax_last(scores);
        let out = g.bmm(attn, vv, false, true);
        let out = g.transpose12(out);
        let f = p.var(g, feat);
        let out = g.add_channel(out, f);
        let pooled = g.reshape(out, &[2, 3, 5, 1]);
        let pooled = g.global_avg_pool(pooled);
        let pooled = g.reshape(pooled, &[2, 3, 1]);
        let back = g.bmm(pooled, qv, true, true);
        let t1 = g.constant(Tensor::full(&[2, 1, 5], 0.3));
        let l1 = g.mse(back, t1);
        let t = g.constant(y.clone());
        let l2 = g.mse(out, t);
        let cols = g.narrow(kv, 2, 1, 2);
        let rows = g.narrow(cols, 1, 1, 2);
        let t3 = g.constant(Tensor::full(&[2, 2, 2], -0.2));
        let l3 = g.mse(rows, t3);
        let l12 = g.add(l1, l2);
        g.add(l12, l3)
    };
    let err = check(&mut store, &build);
    assert!(err < 1e-5, "relative error {err}");
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut a = ParamStore::<f64>::new();
    let mut b = ParamStore::<f64>::new();
    let la = Linear::new(&mut a, "a", 2, 2, true, &mut rng);
    let lb = Linear::new(&mut b, "b", 2, 1, true, &mut rng);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 2], 0.5));
    let h = la.forward(&mut g, Bound::frozen(&a), x);
    let o = lb.forward(&mut g, Bound::trainable(&b), h);
    let t = g.constant(Tensor::zeros(&[3, 1]));
    let l = g.mse(o, t);
    let grads = g.backward(l);
    assert_eq!(grads.norm_for(&a), 0.0);
    assert!(grads.norm_for(&b) > 0.0);
}

#[test]
fn conv_output_is_independent_of_batch_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::<f32>::new();
    let c = Conv2d::same3(&mut store, "c", 3, 5, &mut rng);
    let x: Tensor<f32> = rand_tensor(&mut rng, &[4, 3, 7, 7]).cast();
    let single: Tensor<f32> = Tensor::new(&[1, 3, 7, 7], x.data()[2 * 147..3 * 147].to_vec()).unwrap();
    let mut g = Graph::new();
    let xb = g.constant(x);
    let ob = c.forward(&mut g, Bound::frozen(&store), xb);
    let xs = g.constant(single);
    let os = c.forward(&mut g, Bound::frozen(&store), xs);
    let per = 5 * 49;
    assert_eq!(&g.value(ob).data()[2 * per..3 * per], g.value(os).data());
}
