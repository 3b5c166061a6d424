//! Tape gradients against central differences for composite computations.

use flowcast_core::field::{ModelConfig, VectorFieldNet};
use flowcast_core::nn::{Bound, ParamStore};
use flowcast_core::tensor::gradcheck::check_gradients;
use flowcast_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn attention_style_composite() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let inputs = vec![
        Tensor::randn([2, 4, 3], &mut rng),
        Tensor::randn([2, 3, 4], &mut rng),
        Tensor::randn([2, 4, 3], &mut rng),
    ];
    let r = check_gradients(&inputs, 1e-5, 1e-3, None, |t, v| {
        let s = t.bmm(v[0], v[1])?;
        let a = t.softmax(s, 2)?;
        let o = t.bmm(a, v[2])?;
        let n = t.layer_norm(o, 1e-5);
        let g = t.gelu(n);
        let sq = t.square(g);
        Ok(t.mean(sq))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn vector_field_network() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cfg = ModelConfig { base_dim: 8, attn_heads: 2, time_freq_dim: 8, ..ModelConfig::default() };
    let net = VectorFieldNet::new(cfg, &mut store, &mut rng).unwrap();
    for id in net.output_params() {
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = Tensor::uniform(shape, -0.5, 0.5, &mut rng);
    }
    let mut inputs = vec![
        Tensor::randn(net.config.future_shape().to_vec(), &mut rng),
        Tensor::randn(net.config.past_shape().to_vec(), &mut rng),
    ];
    inputs.extend(store.tensors().iter().cloned());
    let coords: Vec<(usize, usize)> =
        (0..inputs.len()).map(|i| (i, rng.gen_range(0..inputs[i].len()))).collect();
    let w = Tensor::randn(net.config.future_shape().to_vec(), &mut rng);
    let r = check_gradients(&inputs, 1e-5, 1e-3, Some(&coords), |t, v| {
        let p = Bound::from_vars(v[2..].to_vec());
        let out = net.forward_vars(t, &p, v[0], 0.37, v[1], None)?;
        let w = t.constant(w.clone());
        let prod = t.mul(out, w)?;
        Ok(t.sum(prod))
    })
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}
