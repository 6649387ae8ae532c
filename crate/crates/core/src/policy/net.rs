//! Forward and reverse passes of the recurrent convolutional policy net.
//!
//! Everything is hand-rolled on `ndarray` buffers: same-padding 2D
//! convolutions, 2x2 max-pooling (ceil semantics at odd edges), tanh dense
//! layers, and backpropagation through the 3-step unrolled recurrence. The
//! analytic gradients are validated against central finite differences in
//! the test suite.

use ndarray::{Array1, Array2, Array3, Array4};

use super::{ActionDistribution, Observation, PolicyError, PolicyWeights};

/// out[o,y,x] = Σ_{i,dy,dx} k[o,i,dy,dx] · x[i, y+dy-p, x+dx-p], zero padded.
pub(super) fn conv2d(x: &Array3<f64>, k: &Array4<f64>, bias: &Array1<f64>) -> Array3<f64> {
    let (ci, h, w) = x.dim();
    let (co, ci2, kh, kw) = k.dim();
    debug_assert_eq!(ci, ci2);
    let p = kh / 2;
    let mut out = Array3::zeros((co, h, w));
    {
        let xs = x.as_slice().expect("standard layout");
        let os = out.as_slice_mut().expect("standard layout");
        for o in 0..co {
            let obase = o * h * w;
            for i in 0..ci {
                let ibase = i * h * w;
                for dy in 0..kh {
                    let y0 = p.saturating_sub(dy);
                    let y1 = (h + p).saturating_sub(dy).min(h);
                    for dx in 0..kw {
                        let kv = k[[o, i, dy, dx]];
                        let x0 = p.saturating_sub(dx);
                        let x1 = (w + p).saturating_sub(dx).min(w);
                        if x0 >= x1 {
                            continue;
                        }
                        for y in y0..y1 {
                            let ysrc = y + dy - p;
                            let src = &xs[ibase + ysrc * w + (x0 + dx - p)
                                ..ibase + ysrc * w + (x1 + dx - p)];
                            let dst = &mut os[obase + y * w + x0..obase + y * w + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += kv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    for o in 0..co {
        let b = bias[o];
        out.index_axis_mut(ndarray::Axis(0), o).mapv_inplace(|v| v + b);
    }
    out
}

/// Gradient of [`conv2d`] w.r.t. the kernel: correlate the input with the
/// upstream gradient.
pub(super) fn conv2d_kernel_grad(
    x: &Array3<f64>,
    dz: &Array3<f64>,
    kh: usize,
    kw: usize,
    dk: &mut Array4<f64>,
) {
    let (ci, h, w) = x.dim();
    let (co, _, _) = dz.dim();
    let p = kh / 2;
    let xs = x.as_slice().expect("standard layout");
    let ds = dz.as_slice().expect("standard layout");
    for o in 0..co {
        let obase = o * h * w;
        for i in 0..ci {
            let ibase = i * h * w;
            for dy in 0..kh {
                let y0 = p.saturating_sub(dy);
                let y1 = (h + p).saturating_sub(dy).min(h);
                for dx in 0..kw {
                    let x0 = p.saturating_sub(dx);
                    let x1 = (w + p).saturating_sub(dx).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let ysrc = y + dy - p;
                        let src = &xs[ibase + ysrc * w + (x0 + dx - p)
                            ..ibase + ysrc * w + (x1 + dx - p)];
                        let up = &ds[obase + y * w + x0..obase + y * w + x1];
                        for (u, s) in up.iter().zip(src) {
                            acc += u * s;
                        }
                    }
                    dk[[o, i, dy, dx]] += acc;
                }
            }
        }
    }
}

/// Gradient of [`conv2d`] w.r.t. the input (transposed convolution).
pub(super) fn conv2d_input_grad(k: &Array4<f64>, dz: &Array3<f64>) -> Array3<f64> {
    let (co, ci, kh, kw) = k.dim();
    let (_, h, w) = dz.dim();
    let p = kh / 2;
    let mut dx_out = Array3::zeros((ci, h, w));
    let ds = dz.as_slice().expect("standard layout");
    let xs = dx_out.as_slice_mut().expect("standard layout");
    for o in 0..co {
        let obase = o * h * w;
        for i in 0..ci {
            let ibase = i * h * w;
            for dy in 0..kh {
                let y0 = p.saturating_sub(dy);
                let y1 = (h + p).saturating_sub(dy).min(h);
                for dxk in 0..kw {
                    let kv = k[[o, i, dy, dxk]];
                    let x0 = p.saturating_sub(dxk);
                    let x1 = (w + p).saturating_sub(dxk).min(w);
                    if x0 >= x1 {
                        continue;
                    }
                    for y in y0..y1 {
                        let ysrc = y + dy - p;
                        let dst = &mut xs[ibase + ysrc * w + (x0 + dxk - p)
                            ..ibase + ysrc * w + (x1 + dxk - p)];
                        let up = &ds[obase + y * w + x0..obase + y * w + x1];
                        for (d, u) in dst.iter_mut().zip(up) {
                            *d += kv * u;
                        }
                    }
                }
            }
        }
    }
    dx_out
}

/// 2x2 max-pool with stride 2; odd edges keep a 1-wide window. Returns the
/// pooled map and the flat source index of each pooled element.
pub(super) fn maxpool2(x: &Array3<f64>) -> (Array3<f64>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (ph, pw) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Array3::zeros((c, ph, pw));
    let mut idx = vec![0u32; c * ph * pw];
    let xs = x.as_slice().expect("standard layout");
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..ph {
            for ox in 0..pw {
                let mut best = f64::NEG_INFINITY;
                let mut best_i = 0usize;
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let i = base + y * w + xx;
                        if xs[i] > best {
                            best = xs[i];
                            best_i = i;
                        }
                    }
                }
                out[[ch, oy, ox]] = best;
                idx[ch * ph * pw + oy * pw + ox] = best_i as u32;
            }
        }
    }
    (out, idx)
}

/// Scatters pooled gradients back onto their argmax sources.
pub(super) fn maxpool2_backward(
    dpool: &Array3<f64>,
    idx: &[u32],
    shape: (usize, usize, usize),
) -> Array3<f64> {
    let mut dx = Array3::zeros(shape);
    let xs = dx.as_slice_mut().expect("standard layout");
    for (d, &i) in dpool.iter().zip(idx) {
        xs[i as usize] += d;
    }
    dx
}

pub(super) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn dense_tanh(w: &Array2<f64>, b: &Array1<f64>, x: &Array1<f64>) -> Array1<f64> {
    let mut z = w.dot(x) + b;
    z.mapv_inplace(f64::tanh);
    z
}

/// Activations retained by [`forward_cached`] for the reverse pass.
pub struct ForwardCache {
    /// Per layer, per unrolled step: the layer's input map.
    inputs: Vec<Vec<Array3<f64>>>,
    /// Per layer, per step: tanh output before pooling.
    hidden: Vec<Vec<Array3<f64>>>,
    /// Per layer, per step: argmax indices of the pool.
    pool_idx: Vec<Vec<Vec<u32>>>,
    vehicle_in: Array1<f64>,
    vehicle_acts: Vec<Array1<f64>>,
    concat: Array1<f64>,
    fc1_act: Array1<f64>,
    dropout_mask: Array1<f64>,
    fc1_dropped: Array1<f64>,
    fc2_act: Array1<f64>,
    pub probs: Vec<f64>,
}

/// Full forward pass keeping activations. `dropout_mask` of `None` runs in
/// eval mode (identity between FC1 and FC2).
pub fn forward_cached(
    w: &PolicyWeights,
    obs: &Observation,
    dropout_mask: Option<&Array1<f64>>,
) -> Result<(ActionDistribution, ForwardCache), PolicyError> {
    w.check_observation(obs)?;
    let steps = 3usize;
    let mut inputs: Vec<Vec<Array3<f64>>> = Vec::with_capacity(3);
    let mut hidden: Vec<Vec<Array3<f64>>> = Vec::with_capacity(3);
    let mut pool_idx: Vec<Vec<Vec<u32>>> = Vec::with_capacity(3);

    // unroll the three recurrent layers over the three temporal slices
    let mut xs: Vec<Array3<f64>> = (0..steps)
        .map(|t| obs.env.index_axis(ndarray::Axis(0), t).to_owned())
        .collect();
    for layer in &w.recurrent {
        let mut hs: Vec<Array3<f64>> = Vec::with_capacity(steps);
        let mut pooled: Vec<Array3<f64>> = Vec::with_capacity(steps);
        let mut idxs: Vec<Vec<u32>> = Vec::with_capacity(steps);
        for t in 0..steps {
            let mut z = conv2d(&xs[t], &layer.w_in, &layer.bias);
            if t > 0 {
                let fb = conv2d(&hs[t - 1], &layer.w_fb, &Array1::zeros(layer.bias.len()));
                z += &fb;
            }
            z.mapv_inplace(f64::tanh);
            let (p, idx) = maxpool2(&z);
            hs.push(z);
            pooled.push(p);
            idxs.push(idx);
        }
        inputs.push(std::mem::replace(&mut xs, pooled));
        hidden.push(hs);
        pool_idx.push(idxs);
    }
    // only the final step of the last layer feeds the head
    let conv_flat: Array1<f64> = Array1::from_iter(xs[steps - 1].iter().cloned());

    let vehicle_in = Array1::from_vec(obs.vehicle.to_vec());
    let mut vehicle_acts = Vec::with_capacity(w.vehicle_fc.len());
    let mut v = vehicle_in.clone();
    for d in &w.vehicle_fc {
        v = dense_tanh(&d.w, &d.b, &v);
        vehicle_acts.push(v.clone());
    }

    let concat = ndarray::concatenate(
        ndarray::Axis(0),
        &[conv_flat.view(), v.view()],
    )
    .expect("concat");
    let fc1_act = dense_tanh(&w.fc1.w, &w.fc1.b, &concat);
    let dropout_mask = match dropout_mask {
        Some(m) => {
            if m.len() != fc1_act.len() {
                return Err(PolicyError::ShapeMismatch(format!(
                    "dropout mask length {} != fc1 width {}",
                    m.len(),
                    fc1_act.len()
                )));
            }
            m.clone()
        }
        None => Array1::ones(fc1_act.len()),
    };
    let fc1_dropped = &fc1_act * &dropout_mask;
    let fc2_act = dense_tanh(&w.fc2.w, &w.fc2.b, &fc1_dropped);
    let logits_arr = w.out.w.dot(&fc2_act) + &w.out.b;
    let logits: Vec<f64> = logits_arr.to_vec();
    let probs = softmax(&logits);

    let dist = ActionDistribution {
        probs: probs.clone(),
        logits,
    };
    let cache = ForwardCache {
        inputs,
        hidden,
        pool_idx,
        vehicle_in,
        vehicle_acts,
        concat,
        fc1_act,
        dropout_mask,
        fc1_dropped,
        fc2_act,
        probs,
    };
    Ok((dist, cache))
}

/// Gradient of `coeff · log π(action | obs)` with respect to every weight,
/// accumulated into `grad`.
pub fn backward_into(
    w: &PolicyWeights,
    cache: &ForwardCache,
    action: usize,
    coeff: f64,
    grad: &mut PolicyWeights,
) {
    let k = cache.probs.len();
    // d log softmax: onehot − probs, scaled
    let mut dlogits = Array1::zeros(k);
    for j in 0..k {
        let ind = if j == action { 1.0 } else { 0.0 };
        dlogits[j] = coeff * (ind - cache.probs[j]);
    }

    // output linear layer
    grad_dense_linear(&dlogits, &cache.fc2_act, &mut grad.out.w, &mut grad.out.b);
    let dfc2 = w.out.w.t().dot(&dlogits);

    // FC2 (tanh)
    let dz2 = &dfc2 * &cache.fc2_act.mapv(|a| 1.0 - a * a);
    grad_dense_linear(&dz2, &cache.fc1_dropped, &mut grad.fc2.w, &mut grad.fc2.b);
    let dfc1_dropped = w.fc2.w.t().dot(&dz2);

    // dropout then FC1 (tanh)
    let dfc1 = &dfc1_dropped * &cache.dropout_mask;
    let dz1 = &dfc1 * &cache.fc1_act.mapv(|a| 1.0 - a * a);
    grad_dense_linear(&dz1, &cache.concat, &mut grad.fc1.w, &mut grad.fc1.b);
    let dconcat = w.fc1.w.t().dot(&dz1);

    // split the concat gradient between the conv trunk and vehicle subnet
    let flat_dim = dconcat.len() - cache.vehicle_acts.last().unwrap().len();
    let dconv_flat = dconcat.slice(ndarray::s![..flat_dim]).to_owned();
    let mut dveh = dconcat.slice(ndarray::s![flat_dim..]).to_owned();

    // vehicle subnet backward (all tanh)
    for (li, d) in w.vehicle_fc.iter().enumerate().rev() {
        let act = &cache.vehicle_acts[li];
        let dz = &dveh * &act.mapv(|a| 1.0 - a * a);
        let input = if li == 0 {
            &cache.vehicle_in
        } else {
            &cache.vehicle_acts[li - 1]
        };
        let gv = &mut grad.vehicle_fc[li];
        grad_dense_linear(&dz, input, &mut gv.w, &mut gv.b);
        dveh = d.w.t().dot(&dz);
    }

    // conv trunk: seed the last layer's final-step pooled gradient and run
    // truncated BPTT down the stack
    let steps = 3usize;
    let last = w.recurrent.len() - 1;
    let final_shape = pooled_shape(&cache.hidden[last][steps - 1]);
    let mut dpooled: Vec<Array3<f64>> = (0..steps)
        .map(|t| {
            if t == steps - 1 {
                Array3::from_shape_vec(final_shape, dconv_flat.to_vec()).expect("shape")
            } else {
                Array3::zeros(final_shape)
            }
        })
        .collect();

    for l in (0..w.recurrent.len()).rev() {
        let layer = &w.recurrent[l];
        let gl = &mut grad.recurrent[l];
        let h_shape = cache.hidden[l][0].dim();
        let mut dcarry: Array3<f64> = Array3::zeros(h_shape);
        let mut dx_prev: Vec<Array3<f64>> = Vec::with_capacity(steps);
        for t in (0..steps).rev() {
            let mut dh = maxpool2_backward(&dpooled[t], &cache.pool_idx[l][t], h_shape);
            dh += &dcarry;
            let h = &cache.hidden[l][t];
            let dz = &dh * &h.mapv(|a| 1.0 - a * a);
            // bias gradient: sum over spatial positions per channel
            for c in 0..gl.bias.len() {
                gl.bias[c] += dz.index_axis(ndarray::Axis(0), c).sum();
            }
            let kh = layer.w_in.dim().2;
            let kw = layer.w_in.dim().3;
            conv2d_kernel_grad(&cache.inputs[l][t], &dz, kh, kw, &mut gl.w_in);
            if t > 0 {
                conv2d_kernel_grad(&cache.hidden[l][t - 1], &dz, kh, kw, &mut gl.w_fb);
                dcarry = conv2d_input_grad(&layer.w_fb, &dz);
            }
            dx_prev.push(conv2d_input_grad(&layer.w_in, &dz));
        }
        dx_prev.reverse();
        dpooled = dx_prev;
    }
}

fn grad_dense_linear(dz: &Array1<f64>, input: &Array1<f64>, dw: &mut Array2<f64>, db: &mut Array1<f64>) {
    for (i, &d) in dz.iter().enumerate() {
        db[i] += d;
        let mut row = dw.row_mut(i);
        for (j, &x) in input.iter().enumerate() {
            row[j] += d * x;
        }
    }
}

fn pooled_shape(h: &Array3<f64>) -> (usize, usize, usize) {
    let (c, hh, ww) = h.dim();
    (c, hh.div_ceil(2), ww.div_ceil(2))
}
