mod common;

use mec_core::rng_stream;
use mec_rl::neural::{NetShape, RecurrentNet};
use rand::Rng;

#[test]
fn every_block_matches_finite_differences() {
    for seed in 0..20 {
        for (block, err) in common::all_blocks(seed) {
            assert!(err < 1e-4, "{block} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn detached_chunks_sum_their_gradients() {
    // Loss over two chunks with the hidden state carried as a constant across
    // the boundary: its finite-difference gradient equals the sum of the two
    // per-chunk backward passes.
    let net = RecurrentNet::new(NetShape {
        input: 3,
        hidden: 5,
        heads: vec![2],
    });
    let mut rng = rng_stream(7, "chunks");
    let p = net.init(&mut rng, 1.0);
    let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let c: Vec<Vec<Vec<f64>>> = (0..8).map(|_| vec![vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]]).collect();
    let (a, b) = xs.split_at(5);
    let ra: Vec<&[f64]> = a.iter().map(|v| v.as_slice()).collect();
    let rb: Vec<&[f64]> = b.iter().map(|v| v.as_slice()).collect();
    let h0 = vec![0.0; 5];
    let first = net.forward_seq(&p, &ra, &h0);
    let boundary = first.final_hidden.clone();
    let second = net.forward_seq(&p, &rb, &boundary);
    let mut g = vec![0.0; net.num_params];
    net.backward_seq(&p, &first.cache, &c[..5], &mut g);
    net.backward_seq(&p, &second.cache, &c[5..], &mut g);

    let dot = |out: &mec_rl::neural::SeqOutput, cs: &[Vec<Vec<f64>>]| -> f64 {
        out.outputs
            .iter()
            .zip(cs)
            .map(|(o, cc)| o[0].iter().zip(&cc[0]).map(|(x, y)| x * y).sum::<f64>())
            .sum()
    };
    let loss = |q: &[f64]| dot(&net.forward_seq(q, &ra, &h0), &c[..5]) + dot(&net.forward_seq(q, &rb, &boundary), &c[5..]);
    let err = common::check(&p, &g, 2000, 1, loss);
    assert!(err < 1e-4, "rel err {err:e}");
}
