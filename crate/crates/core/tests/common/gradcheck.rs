//! Central finite-difference checks of reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rawdarts::nn::{BatchNorm, GruLayer, Linear, Mode};
use rawdarts::tensor::{ConvSpec, PoolSpec};
use rawdarts::{Graph, ParamGroup, ParamStore, Result, Tensor, Var};

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
pub const CASES: usize = 20;

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

type Build<'a> = dyn Fn(&mut Graph, &ParamStore, &[Var]) -> Result<Var> + 'a;

fn projected_loss(
    build: &Build,
    store: &ParamStore,
    inputs: &[Tensor],
    proj: &mut Option<Vec<f64>>,
) -> (Graph, Vec<Var>, Var) {
    let mut g = Graph::new();
    let leaves: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(&t.clone().with_grad()))
        .collect();
    let y = build(&mut g, store, &leaves).expect("forward");
    let shape = g.shape(y).to_vec();
    let n = g.value(y).len();
    let r = proj.get_or_insert_with(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(n as u64 + 17);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    });
    let rv = g.input(shape, r.clone()).unwrap();
    let p = g.mul(y, rv).unwrap();
    let loss = g.sum(p);
    (g, leaves, loss)
}

/// Largest relative error between the analytic gradient of
/// `sum(r * build(inputs))` and central differences, over every input
/// element and every trainable parameter of `store`.
pub fn max_error(inputs: &[Tensor], store: &ParamStore, build: &Build) -> f64 {
    let mut proj = None;
    let (mut g, leaves, loss) = projected_loss(build, store, inputs, &mut proj);
    g.backward(loss).expect("backward");
    let mut analytic_store = store.clone();
    analytic_store.zero_grads();
    analytic_store.accumulate_grads(&g).unwrap();

    let eval = |inputs: &[Tensor], store: &ParamStore| {
        let mut p = proj.clone();
        let (g, _, l) = projected_loss(build, store, inputs, &mut p);
        g.item(l)
    };
    let mut worst: f64 = 0.0;
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = g
            .grad(*leaf)
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        for j in 0..inputs[i].numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += EPS;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= EPS;
            let numeric = (eval(&plus, store) - eval(&minus, store)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    for id in store.ids().collect::<Vec<_>>() {
        if !store.get(id).requires_grad() {
            continue;
        }
        let analytic = analytic_store
            .get(id)
            .grad()
            .map(|s| s.to_vec())
            .unwrap_or_else(|| vec![0.0; store.get(id).numel()]);
        for j in 0..store.get(id).numel() {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[j] += EPS;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[j] -= EPS;
            let numeric = (eval(inputs, &plus) - eval(inputs, &minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[j], numeric));
        }
    }
    worst
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Values spaced at least 0.01 apart in random order, so max/abs/kinks are
/// never within a finite-difference step of a tie.
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.05 + 0.013)
        .collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), v).unwrap()
}

fn empty() -> ParamStore {
    ParamStore::new()
}

/// One primitive's worst error over [`CASES`] random shapes.
pub struct PrimitiveResult {
    pub name: &'static str,
    pub worst: f64,
}

fn run(name: &'static str, seed: u64, case: impl Fn(&mut ChaCha8Rng) -> f64) -> PrimitiveResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let worst = (0..CASES).map(|_| case(&mut rng)).fold(0.0, f64::max);
    PrimitiveResult { name, worst }
}

pub fn conv1d() -> PrimitiveResult {
    run("conv1d", 1, |rng| {
        let (b, ci, co) = (
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let k = rng.random_range(1..5);
        let spec = ConvSpec::new(
            rng.random_range(1..3),
            rng.random_range(1..3),
            rng.random_range(0..3),
        );
        let span = (k - 1) * spec.dilation + 1;
        let len = span + rng.random_range(0..6);
        let inputs = [
            randn(rng, &[b, ci, len]),
            randn(rng, &[co, ci, k]),
            randn(rng, &[co]),
        ];
        max_error(&inputs, &empty(), &|g, _, v| {
            g.conv1d(v[0], v[1], Some(v[2]), spec)
        })
    })
}

pub fn maxpool() -> PrimitiveResult {
    run("maxpool1d", 2, |rng| {
        let k = rng.random_range(1..4);
        let spec = PoolSpec::padded(k, rng.random_range(1..3), rng.random_range(0..k));
        let shape = [
            rng.random_range(1..3),
            rng.random_range(1..3),
            k + rng.random_range(0..7),
        ];
        let inputs = [spaced(rng, &shape)];
        max_error(&inputs, &empty(), &|g, _, v| g.maxpool1d(v[0], spec))
    })
}

pub fn avgpool() -> PrimitiveResult {
    run("avgpool1d", 3, |rng| {
        let k = rng.random_range(1..4);
        let spec = PoolSpec::padded(k, rng.random_range(1..3), rng.random_range(0..k));
        let shape = [
            rng.random_range(1..3),
            rng.random_range(1..3),
            k + rng.random_range(0..7),
        ];
        let inputs = [randn(rng, &shape)];
        max_error(&inputs, &empty(), &|g, _, v| g.avgpool1d(v[0], spec))
    })
}

pub fn batchnorm() -> PrimitiveResult {
    run("batchnorm1d", 4, |rng| {
        let ch = rng.random_range(1..4);
        let shape = [rng.random_range(1..4), ch, rng.random_range(2..6)];
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", ch);
        for id in store.ids_in(ParamGroup::Network) {
            let n = store.get(id).numel();
            let v = randn(rng, &[n]);
            store.get_mut(id).data_mut().copy_from_slice(v.data());
        }
        let mode = if rng.random_bool(0.5) {
            Mode::Train
        } else {
            Mode::Eval
        };
        let inputs = [randn(rng, &shape)];
        max_error(&inputs, &store, &|g, s, v| bn.forward(g, s, v[0], mode))
    })
}

pub fn leaky_relu() -> PrimitiveResult {
    run("leaky_relu", 5, |rng| {
        let slope = rng.random_range(0.0..1.0);
        let shape = [
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..6),
        ];
        let inputs = [spaced(rng, &shape)];
        max_error(&inputs, &empty(), &|g, _, v| Ok(g.leaky_relu(v[0], slope)))
    })
}

pub fn linear() -> PrimitiveResult {
    run("linear", 6, |rng| {
        let (b, di, dout) = (
            rng.random_range(1..4),
            rng.random_range(1..6),
            rng.random_range(1..5),
        );
        let inputs = [
            randn(rng, &[b, di]),
            randn(rng, &[dout, di]),
            randn(rng, &[dout]),
        ];
        max_error(&inputs, &empty(), &|g, _, v| {
            g.linear(v[0], v[1], Some(v[2]))
        })
    })
}

pub fn gru_step() -> PrimitiveResult {
    run("gru_step", 7, |rng| {
        let (b, di, h) = (
            rng.random_range(1..3),
            rng.random_range(1..4),
            rng.random_range(1..4),
        );
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(rng.random());
        let input =
            [0, 1, 2].map(|i| Linear::new(&mut store, &mut init, &format!("i{i}"), di, h, true));
        let hidden =
            [0, 1, 2].map(|i| Linear::new(&mut store, &mut init, &format!("h{i}"), h, h, true));
        let layer = GruLayer { input, hidden };
        let inputs = [randn(rng, &[b, di]), randn(rng, &[b, h])];
        max_error(&inputs, &store, &|g, s, v| layer.step(g, s, v[0], v[1]))
    })
}

pub fn softmax() -> PrimitiveResult {
    run("softmax", 8, |rng| {
        let shape = [rng.random_range(1..4), rng.random_range(1..9)];
        let inputs = [randn(rng, &shape)];
        max_error(&inputs, &empty(), &|g, _, v| g.softmax(v[0]))
    })
}

pub fn sinc_kernels() -> PrimitiveResult {
    run("sinc_kernels", 9, |rng| {
        let c = rng.random_range(1..5);
        let k = rng.random_range(2..32);
        let sr = [4000.0, 8000.0, 16000.0][rng.random_range(0..3)];
        let lo: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..sr / 4.0)).collect();
        let hi: Vec<f64> = lo
            .iter()
            .map(|f| f + rng.random_range(50.0..sr / 4.0))
            .collect();
        let window: Vec<f64> = (0..k)
            .map(|t| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * t as f64 / (k - 1) as f64).cos())
            .collect();
        let inputs = [Tensor::new([c], lo).unwrap(), Tensor::new([c], hi).unwrap()];
        max_error(&inputs, &empty(), &|g, _, v| {
            g.sinc_kernels(v[0], v[1], &window, sr)
        })
    })
}

pub fn p2s_loss() -> PrimitiveResult {
    run("p2s_loss", 10, |rng| {
        let (b, d) = (rng.random_range(1..5), rng.random_range(1..6));
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..2)).collect();
        let inputs = [randn(rng, &[b, d]), randn(rng, &[2, d])];
        max_error(&inputs, &empty(), &|g, _, v| {
            let c = g.cosine(v[0], v[1], 1e-8)?;
            g.mse_onehot(c, &labels)
        })
    })
}

pub fn elementwise() -> PrimitiveResult {
    run("sigmoid/tanh/add/sub/mul/abs/clamp", 11, |rng| {
        let shape = [
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..5),
        ];
        let inputs = [spaced(rng, &shape), randn(rng, &shape)];
        max_error(&inputs, &empty(), &|g, _, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(v[1]);
            let a = g.abs(v[0]);
            let c = g.clamp(v[0], -0.2, 0.3);
            let p = g.mul(s, t)?;
            let q = g.sub(a, c)?;
            g.add(p, q)
        })
    })
}

pub fn channel_ops() -> PrimitiveResult {
    run(
        "concat/select/merge/scale/narrow/time_step/zero_rows",
        12,
        |rng| {
            let (b, c, l) = (
                rng.random_range(1..3),
                rng.random_range(2..5),
                rng.random_range(2..5),
            );
            let idx: Vec<usize> = {
                let mut all: Vec<usize> = (0..c).collect();
                for i in (1..c).rev() {
                    all.swap(i, rng.random_range(0..=i));
                }
                all.truncate(rng.random_range(1..=c));
                all
            };
            let keep = rng.random_range(1..=l);
            let t = rng.random_range(0..keep);
            let inputs = [
                randn(rng, &[b, c, l]),
                randn(rng, &[b, c, l]),
                randn(rng, &[4]),
            ];
            let idx2 = idx.clone();
            max_error(&inputs, &empty(), &move |g, _, v| {
                let sel = g.select_channels(v[0], &idx2)?;
                let sel = g.scale_by(sel, v[2], 1)?;
                let m = g.merge_channels(v[1], sel, &idx2)?;
                let cat = g.concat_channels(&[m, v[0]])?;
                let z = g.zero_rows(cat, 0, 1)?;
                let n = g.narrow_time(z, keep)?;
                let s = g.time_step(n, t)?;
                let w = g.softmax(v[2])?;
                let sw = g.scale_by(s, w, 0)?;
                Ok(sw)
            })
        },
    )
}

pub fn all() -> Vec<PrimitiveResult> {
    vec![
        conv1d(),
        maxpool(),
        avgpool(),
        batchnorm(),
        leaky_relu(),
        linear(),
        gru_step(),
        softmax(),
        sinc_kernels(),
        p2s_loss(),
        elementwise(),
        channel_ops(),
    ]
}
