//! Central finite differences against analytic gradients, in f64.

use mtcolor_core::attention::MaskMode;
use mtcolor_core::color::GrayField;
use mtcolor_core::denoiser::{Conditioning, Denoiser, DenoiserConfig, ForwardOptions};
use mtcolor_core::graph::{ConvSpec, Graph, Var};
use mtcolor_core::mask::{AttentionMask, InstanceMask, MaskSet};
use mtcolor_core::params::{ParamGroup, ParamId, ParamStore};
use mtcolor_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;

fn rel(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error of d(Σ w ∘ f)/dθ over every scalar of every
/// parameter, with random weights `w`.
pub fn op_error(shapes: &[&[usize]], seed: u64, build: impl Fn(&mut Graph<'_, f64>, &[Var]) -> Var) -> f64 {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f64>::new();
    let ids: Vec<ParamId> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| store.add(format!("p{i}"), ParamGroup::Backbone, Tensor::randn(s, 0.7, &mut r)))
        .collect();

    let eval = |store: &ParamStore<f64>, weights: Option<&Tensor<f64>>| {
        let mut g = Graph::new(store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = build(&mut g, &vars);
        let w = weights.cloned().unwrap_or_else(|| Tensor::full(g.shape(y), 1.0));
        let out = g.weighted_sum(y, w).unwrap();
        (g.value(out).data()[0], g.shape(y).to_vec())
    };
    let (_, out_shape) = eval(&store, None);
    let weights = Tensor::<f64>::randn(&out_shape, 1.0, &mut r);

    let analytic = {
        let mut g = Graph::new(&store);
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        let y = build(&mut g, &vars);
        let out = g.weighted_sum(y, weights.clone()).unwrap();
        g.backward(out).unwrap().params
    };

    let mut worst: f64 = 0.0;
    for &id in &ids {
        for k in 0..store.value(id).len() {
            let mut plus = store.clone();
            plus.value_mut(id).data_mut()[k] += STEP;
            let mut minus = store.clone();
            minus.value_mut(id).data_mut()[k] -= STEP;
            let numeric = (eval(&plus, Some(&weights)).0 - eval(&minus, Some(&weights)).0) / (2.0 * STEP);
            let a = analytic.get(id).map_or(0.0, |g| g.data()[k]);
            worst = worst.max(rel(a, numeric, 1e-3));
        }
    }
    worst
}

/// Every graph operation, each with its worst relative error.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut out = vec![
        (
            "add/mul/scale/silu/gelu",
            op_error(&[&[3, 4], &[3, 4]], 1, |g, v| {
                let a = g.add(v[0], v[1]).unwrap();
                let m = g.mul(a, v[1]).unwrap();
                let s = g.scale(m, 0.3);
                let t = g.silu(s);
                g.gelu(t)
            }),
        ),
        ("linear", op_error(&[&[5, 3], &[3, 4], &[4]], 2, |g, v| g.linear(v[0], v[1], Some(v[2])).unwrap())),
    ];
    for (name, spec, seed) in [("conv3x3", ConvSpec::same(3), 3), ("conv3x3/2", ConvSpec::down(3), 4), ("conv1x1", ConvSpec::same(1), 5)] {
        let k = spec.kernel;
        out.push((name, op_error(&[&[2, 5, 6], &[3, 2, k, k], &[3]], seed, |g, v| g.conv2d(v[0], v[1], Some(v[2]), spec).unwrap())));
    }
    out.push((
        "group_norm",
        op_error(&[&[4, 3, 3], &[4], &[4]], 6, |g, v| {
            let y = g.group_norm(v[0], v[1], v[2], 2).unwrap();
            // Squared so normalisation symmetry does not zero the gradient.
            g.mul(y, y).unwrap()
        }),
    ));
    out.push((
        "reshape/concat/transpose/upsample/add_channel/mean_pool",
        op_error(&[&[2, 3, 2], &[2, 6], &[2]], 7, |g, v| {
            let r = g.reshape(v[0], &[2, 6]).unwrap();
            let c1 = g.concat(&[r, v[1]], 1).unwrap();
            let t = g.transpose(c1).unwrap();
            let c0 = g.concat(&[t, t], 0).unwrap();
            let img = g.reshape(c0, &[2, 6, 4]).unwrap();
            let up = g.upsample2x(img).unwrap();
            let ch = g.add_channel(up, v[2]).unwrap();
            let sq = g.mul(ch, ch).unwrap();
            let p = g.mean_pool(sq).unwrap();
            let b = g.reshape(v[2], &[1, 2]).unwrap();
            g.concat(&[p, b], 1).unwrap()
        }),
    ));
    out.push((
        "embedding_bag",
        op_error(&[&[5, 3]], 8, |g, v| {
            let e = g.embedding_bag(v[0], vec![vec![0, 2, 2], vec![], vec![4]]).unwrap();
            g.mul(e, e).unwrap()
        }),
    ));
    let mask = AttentionMask::from_fn(4, 5, |i, j| (i + j) % 3 != 0);
    for (name, mode, seed) in [("attention/post", MaskMode::PostSoftmax, 9), ("attention/pre", MaskMode::PreSoftmaxRenorm, 10)] {
        let mask = mask.clone();
        out.push((
            name,
            op_error(&[&[4, 3], &[5, 2], &[3, 4], &[2, 4], &[2, 4], &[4, 3]], seed, move |g, v| {
                let s = g.scale(v[1], 1.0);
                g.attention(v[0], v[1], s, [v[2], v[3], v[4], v[5]], 2, &mask, mode).unwrap()
            }),
        ));
    }
    let target = Tensor::<f64>::randn(&[2, 3], 1.0, &mut ChaCha8Rng::seed_from_u64(11));
    out.push(("mse", op_error(&[&[2, 3]], 12, move |g, v| g.mse(v[0], target.clone()).unwrap())));
    out
}

/// Tiny denoiser used by the network-level checks.
pub fn small_config(image_size: usize, mults: &[usize], base: usize, mode: MaskMode) -> DenoiserConfig {
    DenoiserConfig {
        image_size,
        base_channels: base,
        channel_mults: mults.to_vec(),
        attention_levels: 2.min(mults.len()),
        encoder_attention: true,
        time_dim: 8,
        mask_mode: mode,
        heads: 1,
        d_text: 24,
        max_tokens: 8,
        ..Default::default()
    }
}

/// Every parameter replaced by uniform noise in `±scale`, so zero-initialised
/// paths carry gradient.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
}

/// Left and right strips with two texts.
pub fn strip_condition(gray: GrayField, n: usize) -> Conditioning {
    let a = InstanceMask::from_fn(n, n, |x, _| x < n / 4);
    let b = InstanceMask::from_fn(n, n, |x, _| x >= n - n / 4);
    Conditioning::new(
        gray,
        "a gray background with a red circle and a blue square",
        MaskSet::new(n, n, vec![a, b]).unwrap(),
        vec!["a red circle".into(), "a blue square".into()],
    )
    .unwrap()
}

/// The assembled 8×8 denoiser: three random probes per parameter tensor.
/// Returns the worst relative error (floor 1e-4), the worst parameter and the
/// probe count. Panics if a parameter gets no gradient.
pub fn denoiser_error(mode: MaskMode, seed: u64) -> (f64, String, usize) {
    let n = 8;
    let mut store = ParamStore::<f64>::new();
    let model = Denoiser::new(small_config(n, &[1, 2], 4, mode), &mut store, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    randomize(&mut store, 0.4, &mut rng);
    let z: Tensor<f64> = Tensor::randn(&[3, n, n], 1.0, &mut rng);
    let w: Tensor<f64> = Tensor::randn(&[3, n, n], 1.0, &mut rng);
    let gray = GrayField::new(n, n, (0..n * n).map(|_| rng.random::<f32>()).collect()).unwrap();
    let cond = strip_condition(gray, n);
    let opts = ForwardOptions::default();
    let loss = |s: &ParamStore<f64>| {
        let mut g = Graph::inference(s);
        let zv = g.constant(z.clone());
        let out = model.forward(&mut g, zv, 77, &cond, &opts).unwrap();
        let l = g.weighted_sum(out.eps, w.clone()).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new(&store);
    let zv = g.constant(z.clone());
    let out = model.forward(&mut g, zv, 77, &cond, &opts).unwrap();
    let l = g.weighted_sum(out.eps, w.clone()).unwrap();
    let grads = g.backward(l).unwrap().params;

    let (mut worst, mut worst_name, mut probes) = (0.0f64, String::new(), 0);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        let analytic = grads.get(id).unwrap_or_else(|| panic!("no gradient for {name}")).clone();
        let len = store.value(id).len();
        for _ in 0..3 {
            let k = rng.random_range(0..len);
            let orig = store.value(id).data()[k];
            store.value_mut(id).data_mut()[k] = orig + STEP;
            let up = loss(&store);
            store.value_mut(id).data_mut()[k] = orig - STEP;
            let down = loss(&store);
            store.value_mut(id).data_mut()[k] = orig;
            let e = rel(analytic.data()[k], (up - down) / (2.0 * STEP), 1e-4);
            if e > worst {
                worst = e;
                worst_name = format!("{name}[{k}]");
            }
            probes += 1;
        }
    }
    (worst, worst_name, probes)
}
