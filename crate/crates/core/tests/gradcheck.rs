use mavr_core::losses::{self, LossWeights};
use mavr_core::model::{AttentionConfig, CrossViewAttention, Model, ModelConfig, ViewKind};
use mavr_core::numerics::gradcheck::{check, relative_error};
use mavr_core::numerics::{Graph, PoolKind, Tensor, Var};
use mavr_core::params::{Binder, ParamStore};
use mavr_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 10;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Random values kept at least 0.05 away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let v: f64 = rng.gen_range(0.05..1.0);
        if rng.gen_bool(0.5) { v } else { -v }
    })
}

fn dims(rng: &mut ChaCha8Rng, n: usize, lo: usize, hi: usize) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(lo..=hi)).collect()
}

/// `Σ out ⊙ w` for a fixed random `w`, turning any output into a scalar.
fn project(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let w = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed), g.shape(out));
    let w = g.constant(w);
    let p = g.mul(out, w)?;
    Ok(g.sum(p))
}

thread_local! {
    /// Largest relative error seen by [`run`] on this thread, with its case count.
    pub static WORST: std::cell::Cell<(f64, usize)> = const { std::cell::Cell::new((0.0, 0)) };
}

fn run(name: &str, mut case: impl FnMut(&mut ChaCha8Rng, u64) -> f64) {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        record(&format!("{name} seed {seed}"), case(&mut rng, seed));
    }
}

fn record(what: &str, err: f64) {
    WORST.with(|w| {
        let (e, n) = w.get();
        w.set((e.max(err), n + 1));
    });
    assert!(err <= TOL, "{what}: relative error {err:e}");
}

pub fn elementwise() {
    run("add_mul", |rng, s| {
        let shape = dims(rng, 3, 1, 5);
        let ins = [rand_tensor(rng, &shape), rand_tensor(rng, &shape)];
        check(&ins, H, |g, v| {
            let a = g.add(v[0], v[1])?;
            let m = g.mul(a, v[1])?;
            let m = g.scale(m, -1.7);
            project(g, m, s)
        })
        .unwrap()
    });
    run("relu", |rng, s| {
        let shape = dims(rng, 2, 1, 5);
        let ins = [away_from_zero(rng, &shape)];
        check(&ins, H, |g, v| {
            let r = g.relu(v[0]);
            project(g, r, s)
        })
        .unwrap()
    });
    run("log", |rng, s| {
        let shape = dims(rng, 2, 1, 5);
        let ins = [Tensor::from_fn(&shape, |_| rng.gen_range(0.1..2.0))];
        check(&ins, H, |g, v| {
            let r = g.log(v[0], 1e-8);
            project(g, r, s)
        })
        .unwrap()
    });
}

pub fn reductions_and_layout() {
    run("mean", |rng, s| {
        let shape = dims(rng, 3, 1, 5);
        let axis = rng.gen_range(0..3);
        let ins = [rand_tensor(rng, &shape)];
        check(&ins, H, |g, v| {
            let m = g.mean(v[0], axis)?;
            project(g, m, s)
        })
        .unwrap()
    });
    run("permute_reshape", |rng, s| {
        let shape = dims(rng, 4, 1, 4);
        let mut perm = vec![0, 1, 2, 3];
        use rand::seq::SliceRandom;
        perm.shuffle(rng);
        let ins = [rand_tensor(rng, &shape)];
        let n: usize = shape.iter().product();
        check(&ins, H, |g, v| {
            let p = g.permute(v[0], &perm)?;
            let r = g.reshape(p, &[n])?;
            let t = g.reshape(r, &[1, n])?;
            let t = g.transpose(t)?;
            project(g, t, s)
        })
        .unwrap()
    });
    run("concat", |rng, s| {
        let axis = rng.gen_range(0..3);
        let base = dims(rng, 3, 1, 4);
        let mut other = base.clone();
        other[axis] = rng.gen_range(1..=4);
        let ins = [rand_tensor(rng, &base), rand_tensor(rng, &other)];
        check(&ins, H, |g, v| {
            let c = g.concat(&[v[0], v[1], v[0]], axis)?;
            project(g, c, s)
        })
        .unwrap()
    });
}

pub fn linear_algebra() {
    run("matmul", |rng, s| {
        let d = dims(rng, 4, 1, 5);
        let ins = [rand_tensor(rng, &[d[0], d[1], d[2]]), rand_tensor(rng, &[d[0], d[2], d[3]])];
        check(&ins, H, |g, v| {
            let m = g.matmul(v[0], v[1])?;
            project(g, m, s)
        })
        .unwrap()
    });
    run("linear", |rng, s| {
        let d = dims(rng, 4, 1, 5);
        let bias = rng.gen_bool(0.5);
        let ins = [rand_tensor(rng, &[d[0], d[1], d[2]]), rand_tensor(rng, &[d[3], d[2]]), rand_tensor(rng, &[d[3]])];
        check(&ins, H, |g, v| {
            let y = g.linear(v[0], v[1], bias.then_some(v[2]))?;
            project(g, y, s)
        })
        .unwrap()
    });
}

pub fn normalisations() {
    run("softmax", |rng, s| {
        let shape = dims(rng, 3, 1, 5);
        let axis = rng.gen_range(0..3);
        let ins = [rand_tensor(rng, &shape).map(|x| 3.0 * x)];
        check(&ins, H, |g, v| {
            let y = g.softmax(v[0], axis)?;
            project(g, y, s)
        })
        .unwrap()
    });
    run("l2_normalize", |rng, s| {
        let shape = dims(rng, 2, 1, 5);
        let axis = rng.gen_range(0..2);
        let ins = [away_from_zero(rng, &shape)];
        check(&ins, H, |g, v| {
            let y = g.l2_normalize(v[0], axis, 1e-12)?;
            project(g, y, s)
        })
        .unwrap()
    });
    run("group_norm", |rng, s| {
        let groups = rng.gen_range(1..=2);
        let c = groups * rng.gen_range(1..=2);
        let sp = dims(rng, 2, 2, 4);
        let b = rng.gen_range(1..=2);
        let ins = [rand_tensor(rng, &[b, c, sp[0], sp[1]]), rand_tensor(rng, &[c]), rand_tensor(rng, &[c])];
        check(&ins, H, |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], groups, 1e-5)?;
            project(g, y, s)
        })
        .unwrap()
    });
}

pub fn convolution_and_pooling() {
    run("conv3d", |rng, s| {
        let (b, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
        let ext = dims(rng, 3, 2, 5);
        let stride: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=2));
        let pad: [usize; 3] = std::array::from_fn(|_| rng.gen_range(0..=1));
        let kernel: [usize; 3] = std::array::from_fn(|i| rng.gen_range(1..=3.min(ext[i] + 2 * pad[i])));
        let ins = [
            rand_tensor(rng, &[b, cin, ext[0], ext[1], ext[2]]),
            rand_tensor(rng, &[cout, cin, kernel[0], kernel[1], kernel[2]]),
            rand_tensor(rng, &[cout]),
        ];
        check(&ins, H, |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], stride, pad)?;
            project(g, y, s)
        })
        .unwrap()
    });
    run("conv3d_same", |rng, s| {
        // unit stride with "same" padding, the encoder's common case
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let ext = dims(rng, 3, 3, 5);
        let ins = [rand_tensor(rng, &[1, cin, ext[0], ext[1], ext[2]]), rand_tensor(rng, &[cout, cin, 3, 3, 3]), rand_tensor(rng, &[cout])];
        check(&ins, H, |g, v| {
            let y = g.conv3d(v[0], v[1], v[2], [1, 1, 1], [1, 1, 1])?;
            project(g, y, s)
        })
        .unwrap()
    });
    run("conv3d_spatial_mean", |rng, s| {
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let ext = dims(rng, 3, 2, 5);
        let pad = [rng.gen_range(0..=1), 1, 1];
        let ins = [rand_tensor(rng, &[2, cin, ext[0], ext[1], ext[2]]), rand_tensor(rng, &[cout, cin, 1, 3, 3]), rand_tensor(rng, &[cout])];
        check(&ins, H, |g, v| {
            let y = g.conv3d_spatial_mean(v[0], v[1], v[2], pad)?;
            project(g, y, s)
        })
        .unwrap()
    });
    for kind in [PoolKind::Max, PoolKind::Avg] {
        run("pool3d", |rng, s| {
            let ext = dims(rng, 3, 2, 5);
            let kernel: [usize; 3] = std::array::from_fn(|i| rng.gen_range(1..=2.min(ext[i])));
            let stride: [usize; 3] = std::array::from_fn(|_| rng.gen_range(1..=2));
            let ins = [rand_tensor(rng, &[2, 2, ext[0], ext[1], ext[2]])];
            check(&ins, H, |g, v| {
                let y = g.pool3d(v[0], kind, kernel, stride)?;
                project(g, y, s)
            })
            .unwrap()
        });
    }
    run("upsample", |rng, s| {
        let shape = dims(rng, 4, 1, 3);
        let factor = rng.gen_range(1..=3);
        let ins = [rand_tensor(rng, &shape)];
        check(&ins, H, |g, v| {
            let y = g.upsample_nearest2d(v[0], factor)?;
            project(g, y, s)
        })
        .unwrap()
    });
}

pub fn losses() {
    run("cross_entropy", |rng, _| {
        let (b, c) = (rng.gen_range(1..=5), rng.gen_range(2..=5));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let ins = [rand_tensor(rng, &[b, c]).map(|x| 3.0 * x)];
        check(&ins, H, |g, v| losses::classification_loss(g, v[0], &labels)).unwrap()
    });
    run("alignment", |rng, _| {
        let (views, b, t, f) = (rng.gen_range(2..=3), rng.gen_range(1..=4), rng.gen_range(1..=3), rng.gen_range(2..=5));
        let tau = rng.gen_range(0.05..1.0);
        let ins: Vec<_> = (0..views).map(|_| rand_tensor(rng, &[b, t, f])).collect();
        check(&ins, H, |g, v| {
            let e: Vec<Var> = v.iter().map(|&d| losses::view_embedding(g, d)).collect::<Result<_>>()?;
            losses::alignment_loss(g, &e, tau)
        })
        .unwrap()
    });
    run("attention_entropy", |rng, _| {
        let (b, h, t) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=5));
        let ins = [rand_tensor(rng, &[b, h, t, t])];
        check(&ins, H, |g, v| {
            let a = g.softmax(v[0], 3)?;
            losses::attention_entropy_loss(g, a)
        })
        .unwrap()
    });
    run("total", |rng, _| {
        let w = LossWeights {
            lambda1: rng.gen_range(0.0..1.0),
            lambda2: rng.gen_range(0.0..1.0),
            tau: rng.gen_range(0.05..1.0),
        };
        let (b, t, f) = (rng.gen_range(2..=4), rng.gen_range(1..=3), 3);
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..3)).collect();
        let ins = [rand_tensor(rng, &[b, 3]), rand_tensor(rng, &[b, t, f]), rand_tensor(rng, &[b, t, f]), rand_tensor(rng, &[b, 1, t, t])];
        check(&ins, H, |g, v| {
            let cls = losses::classification_loss(g, v[0], &labels)?;
            let e = [losses::view_embedding(g, v[1])?, losses::view_embedding(g, v[2])?];
            let align = losses::alignment_loss(g, &e, w.tau)?;
            let a = g.softmax(v[3], 3)?;
            let att = losses::attention_entropy_loss(g, a)?;
            Ok(losses::total_loss(g, cls, align, att, &w)?.0)
        })
        .unwrap()
    });
}

/// Largest relative error between parameter gradients of `f` and central
/// differences, over every entry or at most `per_tensor` random entries of
/// each parameter.
fn check_params(store: &ParamStore<f64>, per_tensor: Option<usize>, f: impl Fn(&mut Binder<f64>) -> Result<Var>) -> f64 {
    let eval = |s: &ParamStore<f64>| {
        let mut g = Graph::new();
        let mut bx = Binder::new(&mut g, s);
        let out = f(&mut bx).unwrap();
        g.value(out).item()
    };
    let mut g = Graph::new();
    let mut bx = Binder::new(&mut g, store);
    let out = f(&mut bx).unwrap();
    g.backward(out).unwrap();
    let grads: std::collections::HashMap<usize, Tensor<f64>> = g.param_grads().map(|(i, t)| (i, t.clone())).collect();
    let mut work = store.clone();
    let mut worst = 0f64;
    let mut pick = ChaCha8Rng::seed_from_u64(99);
    for id in store.ids().collect::<Vec<_>>() {
        let n = store.get(id).numel();
        let entries: Vec<usize> = match per_tensor {
            Some(k) if k < n => (0..k).map(|_| pick.gen_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        for j in entries {
            let x0 = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + H;
            let up = eval(&work);
            work.get_mut(id).data_mut()[j] = x0 - H;
            let down = eval(&work);
            work.get_mut(id).data_mut()[j] = x0;
            let analytic = grads.get(&id.0).map_or(0.0, |t| t.data()[j]);
            worst = worst.max(relative_error(analytic, (up - down) / (2.0 * H)));
        }
    }
    worst
}

pub fn attention_module_parameters() {
    run("attention", |rng, s| {
        let heads = rng.gen_range(1..=2);
        let d = heads * rng.gen_range(1..=2);
        let (b, t) = (rng.gen_range(1..=2), rng.gen_range(1..=4));
        let mut store = ParamStore::new();
        let att = CrossViewAttention::new(&mut store, rng, "att", AttentionConfig::new(d, heads).unwrap()).unwrap();
        let x = rand_tensor(rng, &[b, t, d]);
        check_params(&store, None, |bx| {
            let x = bx.graph.constant(x.clone());
            let out = att.forward(bx, x)?;
            let c = project(bx.graph, out.context, s)?;
            let e = losses::attention_entropy_loss(bx.graph, out.weights)?;
            bx.graph.add(c, e)
        })
    });
}

pub fn whole_model_parameters() {
    // one small instance end to end, a few entries of every parameter
    let cfg = ModelConfig {
        base_width: 4,
        pyramid_width: 2,
        heads: 2,
        classes: 3,
        norm_groups: 2,
        views: vec![ViewKind::Flow, ViewKind::Mask],
        ..ModelConfig::default()
    };
    let (model, store) = Model::new::<f64>(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let flow = rand_tensor(&mut rng, &[2, 2, 2, 32, 32]);
    let mask = rand_tensor(&mut rng, &[2, 1, 2, 32, 32]);
    let labels = [0, 2];
    let err = check_params(&store, Some(2), |bx| {
        let inputs = [bx.graph.constant(flow.clone()), bx.graph.constant(mask.clone())];
        let out = model.forward(bx, &inputs, None)?;
        let g = &mut *bx.graph;
        let cls = losses::classification_loss(g, out.logits, &labels)?;
        let e: Vec<Var> = out.descriptors.iter().map(|&d| losses::view_embedding(g, d)).collect::<Result<_>>()?;
        let align = losses::alignment_loss(g, &e, 0.07)?;
        let att = losses::attention_entropy_loss(g, out.attention.unwrap())?;
        Ok(losses::total_loss(g, cls, align, att, &LossWeights::default())?.0)
    });
    record("whole model", err);
}

pub const SUITES: [(&str, fn()); 8] = [("elementwise", elementwise), ("reductions_and_layout", reductions_and_layout), ("linear_algebra", linear_algebra), ("normalisations", normalisations), ("convolution_and_pooling", convolution_and_pooling), ("losses", losses), ("attention_module_parameters", attention_module_parameters), ("whole_model_parameters", whole_model_parameters)];

#[test]
fn gradient_suites() {
    for (_, suite) in SUITES {
        suite();
    }
}
