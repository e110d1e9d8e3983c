#![allow(dead_code)]

use corsa::data::EditPair;
use corsa::model::{AdapterConfig, AdapterState, BaseParams, ModelDims, TokenSeq, STOP_TOKEN};
use corsa::ParamVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn small_dims() -> ModelDims {
    ModelDims { vocab: 12, embed: 3, context: 5, hidden: 5 }
}

pub fn small_adapter() -> AdapterConfig {
    AdapterConfig { rank: 2, alpha: 4.0 }
}

pub fn base(dims: ModelDims, seed: u64) -> BaseParams {
    BaseParams::random(dims, &mut rng(seed)).unwrap()
}

/// Adapter with every factor drawn from N(0, scale²)-ish uniform noise, so
/// both LoRA factors carry gradient.
pub fn adapter(dims: ModelDims, cfg: AdapterConfig, seed: u64, scale: f64) -> AdapterState {
    let mut r = rng(seed);
    let a = AdapterState::init(dims, cfg, &mut r).unwrap();
    let mut p = a.params().clone();
    for x in p.values_mut() {
        *x = r.gen_range(-scale..scale);
    }
    a.with_params(p).unwrap()
}

fn tokens(r: &mut impl Rng, vocab: usize, len: usize) -> Vec<usize> {
    (0..len).map(|_| r.gen_range(2..vocab)).collect()
}

/// Random pairs with distinct answers, each terminated by STOP.
pub fn pairs(dims: ModelDims, n: usize, seed: u64) -> Vec<EditPair> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let len = r.gen_range(1..4);
            let x = TokenSeq::new(tokens(&mut r, dims.vocab, len));
            let old = r.gen_range(2..dims.vocab);
            let mut new = r.gen_range(2..dims.vocab);
            while new == old {
                new = r.gen_range(2..dims.vocab);
            }
            EditPair::new(x, TokenSeq::new(vec![old, STOP_TOKEN]), TokenSeq::new(vec![new, STOP_TOKEN]))
        })
        .collect()
}

/// `|a − b| / max(|a|, |b|, floor)` maximized over `coords`, with the
/// reference computed by central differences of `f`.
pub fn fd_rel_err(mut f: impl FnMut(&ParamVector) -> f64, grad: &ParamVector, at: &ParamVector, coords: &[usize], h: f64, floor: f64) -> f64 {
    let mut probe = at.clone();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let x0 = at.values()[i];
        probe.values_mut()[i] = x0 + h;
        let up = f(&probe);
        probe.values_mut()[i] = x0 - h;
        let down = f(&probe);
        probe.values_mut()[i] = x0;
        let fd = (up - down) / (2.0 * h);
        let g = grad.values()[i];
        worst = worst.max((fd - g).abs() / fd.abs().max(g.abs()).max(floor));
    }
    worst
}

pub fn all_coords(p: &ParamVector) -> Vec<usize> {
    (0..p.len()).collect()
}
