//! Layer primitives over `[batch, channels, time]` and `[batch, channels, freq, time]`.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use stepback_autodiff::{ConvGeometry, Var};

use super::params::{Bound, Init};
use super::Mode;
use crate::error::Result;

pub const IN_EPS: f64 = 1e-5;

/// Applies `w [c_out, k]` to a `[k, n]` column matrix and adds `b [c_out]`.
fn affine_cols(p: &Bound, name: &str, cols: &Var) -> Result<Var> {
    let w = p.get(&format!("{name}.w"))?;
    let b = p.get(&format!("{name}.b"))?;
    let c_out = w.shape()[0];
    Ok(w.matmul(cols).add(&b.reshape(&[c_out, 1])))
}

pub(crate) fn init_conv1d<R: Rng>(init: &mut Init<R>, name: &str, c_in: usize, c_out: usize, k: usize) {
    init.fan_in(format!("{name}.w"), &[c_out, c_in * k], c_in * k);
    init.fan_in(format!("{name}.b"), &[c_out], c_in * k);
}

/// 1-D convolution along time with explicit (left, right) zero padding.
pub(crate) fn conv1d(p: &Bound, name: &str, x: &Var, k: usize, stride: usize, pad: (usize, usize)) -> Result<Var> {
    let [b, c, t] = dims3(x);
    let cols = if k == 1 && stride == 1 {
        x.permute(&[1, 0, 2]).reshape(&[c, b * t])
    } else {
        x.reshape(&[b, c, 1, t])
            .unfold(ConvGeometry::along_time(k, stride, pad))
    };
    let t_out = cols.shape()[1] / b;
    let y = affine_cols(p, name, &cols)?;
    let c_out = y.shape()[0];
    Ok(y.reshape(&[c_out, b, t_out]).permute(&[1, 0, 2]))
}

/// Length-preserving padding for an odd or even kernel.
pub(crate) fn same_pad(k: usize) -> (usize, usize) {
    ((k - 1) / 2, k / 2)
}

/// Frame-wise fully connected layer (a 1×1 convolution).
pub(crate) fn pointwise(p: &Bound, name: &str, x: &Var) -> Result<Var> {
    conv1d(p, name, x, 1, 1, (0, 0))
}

pub(crate) fn init_conv2d<R: Rng>(init: &mut Init<R>, name: &str, c_in: usize, c_out: usize, k: usize) {
    init_conv1d(init, name, c_in, c_out, k * k);
}

/// Square-kernel 2-D convolution with symmetric padding.
pub(crate) fn conv2d(p: &Bound, name: &str, x: &Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
    let [b, _, h, w] = dims4(x);
    let geom = ConvGeometry::square(k, stride, pad);
    let (ho, wo) = geom.out_size(h, w);
    let y = affine_cols(p, name, &x.unfold(geom))?;
    let c_out = y.shape()[0];
    Ok(y.reshape(&[c_out, b, ho, wo]).permute(&[1, 0, 2, 3]))
}

/// Per-sample, per-channel normalization over every axis after the channel axis.
pub(crate) fn instance_norm(x: &Var) -> Var {
    let axes: Vec<usize> = (2..x.ndim()).collect();
    let centred = x.sub(&x.mean_keepdim(&axes));
    let var = centred.square().mean_keepdim(&axes);
    centred.div(&var.add_scalar(IN_EPS).sqrt())
}

/// Inverted dropout; the identity in eval mode.
pub(crate) fn dropout(x: &Var, rate: f64, mode: &mut Mode) -> Var {
    match mode {
        Mode::Train(rng) if rate > 0.0 => {
            let keep = 1.0 / (1.0 - rate);
            let mask = ArrayD::from_shape_fn(IxDyn(x.shape()), |_| {
                if rng.random::<f64>() < rate {
                    0.0
                } else {
                    keep
                }
            });
            x.mul_const(&mask)
        }
        _ => x.clone(),
    }
}

/// Adds `table[ids]` to every frame of `x [B, C, T]`.
pub(crate) fn add_embedding(p: &Bound, name: &str, x: &Var, ids: &[usize]) -> Result<Var> {
    let e = p.get(name)?.index_select(ids);
    let [b, c, _] = dims3(x);
    Ok(x.add(&e.reshape(&[b, c, 1])))
}

/// `[B, r·C, T]` → `[B, C, r·T]`, with output frame `r·t + j` taken from channel `r·c + j`.
pub(crate) fn pixel_shuffle(x: &Var, r: usize) -> Var {
    let [b, c, t] = dims3(x);
    assert_eq!(c % r, 0, "channels {c} not divisible by {r}");
    x.reshape(&[b, c / r, r, t])
        .permute(&[0, 1, 3, 2])
        .reshape(&[b, c / r, t * r])
}

/// Mean over non-overlapping pairs of frames.
pub(crate) fn avg_pool2(x: &Var) -> Var {
    let [b, c, t] = dims3(x);
    x.reshape(&[b, c, t / 2, 2])
        .mean_keepdim(&[3])
        .reshape(&[b, c, t / 2])
}

/// Repeats every frame twice.
pub(crate) fn upsample2(x: &Var) -> Var {
    let [b, c, t] = dims3(x);
    x.reshape(&[b, c, t, 1])
        .broadcast_to(&[b, c, t, 2])
        .reshape(&[b, c, 2 * t])
}

pub(crate) fn init_bigru<R: Rng>(init: &mut Init<R>, name: &str, c_in: usize, hidden: usize) {
    for dir in ["fwd", "bwd"] {
        init.fan_in(format!("{name}.{dir}.w_ih"), &[3 * hidden, c_in], hidden);
        init.fan_in(format!("{name}.{dir}.w_hh"), &[3 * hidden, hidden], hidden);
        init.fan_in(format!("{name}.{dir}.b_ih"), &[3 * hidden], hidden);
        init.fan_in(format!("{name}.{dir}.b_hh"), &[3 * hidden], hidden);
    }
}

/// Bidirectional GRU over `[B, C, T]`; forward and backward outputs are summed,
/// giving `[B, H, T]`.
pub(crate) fn bigru(p: &Bound, name: &str, x: &Var) -> Result<Var> {
    let fwd = gru_direction(p, &format!("{name}.fwd"), x, false)?;
    let bwd = gru_direction(p, &format!("{name}.bwd"), x, true)?;
    Ok(fwd.add(&bwd))
}

/// `r = σ(W_ir x + b_ir + W_hr h + b_hr)`, `z` likewise,
/// `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.
fn gru_direction(p: &Bound, name: &str, x: &Var, reverse: bool) -> Result<Var> {
    let [b, c, t] = dims3(x);
    let w_ih = p.get(&format!("{name}.w_ih"))?;
    let w_hh = p.get(&format!("{name}.w_hh"))?;
    let b_ih = p.get(&format!("{name}.b_ih"))?;
    let b_hh = p.get(&format!("{name}.b_hh"))?;
    let h3 = w_ih.shape()[0];
    let hid = h3 / 3;
    let xs = x
        .permute(&[0, 2, 1])
        .reshape(&[b * t, c])
        .matmul(&w_ih.t())
        .add(b_ih)
        .reshape(&[b, t, h3]);
    let w_hh_t = w_hh.t();
    let mut h = Var::zeros(&[b, hid]);
    let mut outs: Vec<Option<Var>> = vec![None; t];
    let order: Vec<usize> = if reverse { (0..t).rev().collect() } else { (0..t).collect() };
    for step in order {
        let xt = xs.slice(1, step, 1).reshape(&[b, h3]);
        let hh = h.matmul(&w_hh_t).add(b_hh);
        let r = xt.slice(1, 0, hid).add(&hh.slice(1, 0, hid)).sigmoid();
        let z = xt.slice(1, hid, hid).add(&hh.slice(1, hid, hid)).sigmoid();
        let n = xt
            .slice(1, 2 * hid, hid)
            .add(&r.mul(&hh.slice(1, 2 * hid, hid)))
            .tanh();
        h = n.add(&z.mul(&h.sub(&n)));
        outs[step] = Some(h.reshape(&[b, hid, 1]));
    }
    let outs: Vec<Var> = outs.into_iter().map(|o| o.expect("every step visited")).collect();
    Ok(Var::concat(&outs, 2))
}

pub(crate) fn dims3(x: &Var) -> [usize; 3] {
    x.shape()
        .try_into()
        .unwrap_or_else(|_| panic!("expected [B, C, T], got {:?}", x.shape()))
}

pub(crate) fn dims4(x: &Var) -> [usize; 4] {
    x.shape()
        .try_into()
        .unwrap_or_else(|_| panic!("expected [B, C, H, W], got {:?}", x.shape()))
}

#[cfg(test)]
mod tests {
    use ndarray::Array3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use stepback_autodiff::no_grad;

    use super::super::params::ParamStore;
    use super::*;

    fn random3(shape: [usize; 3], seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Var::constant(Array3::from_shape_fn(shape, |_| rng.random_range(-3.0..5.0)).into_dyn())
    }

    #[test]
    fn instance_norm_moments() {
        let _g = no_grad();
        let y = instance_norm(&random3([3, 4, 37], 1));
        for b in 0..3 {
            for c in 0..4 {
                let row: Vec<f64> = (0..37).map(|t| y.value()[[b, c, t]]).collect();
                let m = row.iter().sum::<f64>() / 37.0;
                let v = row.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 37.0;
                assert!(m.abs() < 1e-4, "mean {m}");
                assert!((v - 1.0).abs() < 1e-4, "var {v}");
            }
        }
    }

    #[test]
    fn pixel_shuffle_interleaves_channel_pairs() {
        let x = Var::constant(
            Array3::from_shape_fn((1, 4, 3), |(_, c, t)| (10 * c + t) as f64).into_dyn(),
        );
        let y = pixel_shuffle(&x, 2);
        assert_eq!(y.shape(), &[1, 2, 6]);
        // channel pair (0, 1) → output channel 0; frames alternate between them.
        let row: Vec<f64> = (0..6).map(|t| y.value()[[0, 0, t]]).collect();
        assert_eq!(row, vec![0.0, 10.0, 1.0, 11.0, 2.0, 12.0]);
    }

    #[test]
    fn pooling_and_upsampling_shapes() {
        let x = random3([2, 3, 8], 2);
        let pooled = avg_pool2(&x);
        assert_eq!(pooled.shape(), &[2, 3, 4]);
        assert!((pooled.value()[[1, 2, 1]] - (x.value()[[1, 2, 2]] + x.value()[[1, 2, 3]]) / 2.0).abs() < 1e-12);
        let up = upsample2(&pooled);
        assert_eq!(up.shape(), &[2, 3, 8]);
        assert_eq!(up.value()[[0, 1, 4]], up.value()[[0, 1, 5]]);
    }

    /// Compares the unfold-based convolution against a direct loop.
    #[test]
    fn conv1d_matches_direct_loop() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_conv1d(&mut Init { store: &mut store, rng: Some(&mut rng), shapes: Default::default() }, "c", 3, 2, 5);
        let p = store.bind(&[]);
        let x = random3([2, 3, 9], 4);
        let y = conv1d(&p, "c", &x, 5, 2, (2, 2)).unwrap();
        assert_eq!(y.shape(), &[2, 2, 5]);
        let w = store.get("c.w").unwrap();
        let bias = store.get("c.b").unwrap();
        for b in 0..2 {
            for o in 0..2 {
                for t in 0..5 {
                    let mut acc = bias[[o]];
                    for c in 0..3 {
                        for k in 0..5 {
                            let src = (2 * t + k) as isize - 2;
                            if (0..9).contains(&src) {
                                acc += w[[o, c * 5 + k]] * x.value()[[b, c, src as usize]];
                            }
                        }
                    }
                    assert!((y.value()[[b, o, t]] - acc).abs() < 1e-12);
                }
            }
        }
    }

    /// One GRU step from a zero state against the closed form.
    #[test]
    fn gru_single_step_matches_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        init_bigru(&mut Init { store: &mut store, rng: Some(&mut rng), shapes: Default::default() }, "g", 2, 3);
        let p = store.bind(&[]);
        let x = random3([1, 2, 1], 6);
        let y = gru_direction(&p, "g.fwd", &x, false).unwrap();
        let w_ih = store.get("g.fwd.w_ih").unwrap();
        let b_ih = store.get("g.fwd.b_ih").unwrap();
        let b_hh = store.get("g.fwd.b_hh").unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..3 {
            let gate = |row: usize| {
                b_ih[[row]] + (0..2).map(|c| w_ih[[row, c]] * x.value()[[0, c, 0]]).sum::<f64>()
            };
            let r = sig(gate(j) + b_hh[[j]]);
            let z = sig(gate(3 + j) + b_hh[[3 + j]]);
            let n = (gate(6 + j) + r * b_hh[[6 + j]]).tanh();
            let h = (1.0 - z) * n;
            assert!((y.value()[[0, j, 0]] - h).abs() < 1e-12);
        }
    }
}
