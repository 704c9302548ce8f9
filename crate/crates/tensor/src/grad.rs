//! Reverse accumulation over a [`Tape`].
//!
//! Gradient nodes are recorded onto the tape they differentiate, using the
//! same primitive ops as the forward pass. Differentiating a gradient (as the
//! WGAN gradient penalty requires) is therefore just another call to [`grad`].

use crate::tape::{NodeId, Op, Tape};
use crate::{Error, Result, Tensor};

/// Record `d output / d node` for every node in `wrt` and return the new node ids.
///
/// `output` must hold a single element. Nodes that `output` does not depend on
/// receive an all-zero constant.
pub fn grad(tape: &mut Tape, output: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>> {
    if !tape.contains(output) {
        return Err(Error::UnknownNode(output.index()));
    }
    for &w in wrt {
        if !tape.contains(w) {
            return Err(Error::UnknownNode(w.index()));
        }
    }
    let out_shape = tape.shape(output).to_vec();
    if tape.value(output).len() != 1 {
        return Err(Error::NotScalar { shape: out_shape });
    }

    let last = output.index();
    // Nodes between a `wrt` node and the output; only these receive gradients.
    let mut live = vec![false; last + 1];
    for &w in wrt {
        if w.index() <= last {
            live[w.index()] = true;
        }
    }
    let start = wrt.iter().map(|w| w.index()).min().unwrap_or(last + 1);
    for i in start..=last {
        if !live[i] {
            live[i] = tape.nodes[i].inputs.iter().any(|p| live[p.index()]);
        }
    }

    let mut grads: Vec<Option<NodeId>> = vec![None; last + 1];
    if live[last] {
        grads[last] = Some(tape.constant(Tensor::ones(&out_shape)));
    }
    for i in (start..=last).rev() {
        if !live[i] {
            continue;
        }
        let Some(g) = grads[i] else { continue };
        let node = &tape.nodes[i];
        if node.op == Op::Leaf {
            continue;
        }
        let op = node.op.clone();
        let inputs = node.inputs.clone();
        for (k, &inp) in inputs.iter().enumerate() {
            if !live[inp.index()] {
                continue;
            }
            if let Some(contrib) = vjp(tape, i, &op, &inputs, k, g)? {
                grads[inp.index()] = Some(match grads[inp.index()] {
                    Some(prev) => tape.add(prev, contrib)?,
                    None => contrib,
                });
            }
        }
    }

    wrt.iter()
        .map(|&w| match grads.get(w.index()).copied().flatten() {
            Some(g) => Ok(g),
            None => {
                let shape = tape.shape(w).to_vec();
                Ok(tape.constant(Tensor::zeros(&shape)))
            }
        })
        .collect()
}

/// Gradient values of a scalar `output` with respect to each node in `wrt`.
pub fn gradient(tape: &mut Tape, output: NodeId, wrt: &[NodeId]) -> Result<Vec<Tensor>> {
    let ids = grad(tape, output, wrt)?;
    Ok(ids.into_iter().map(|g| tape.value(g).clone()).collect())
}

/// Vector-Jacobian product of node `index` for its `k`-th input, given the
/// upstream gradient `g`. `None` means the op has zero derivative there.
fn vjp(
    tape: &mut Tape,
    index: usize,
    op: &Op,
    inputs: &[NodeId],
    k: usize,
    g: NodeId,
) -> Result<Option<NodeId>> {
    let out = NodeId(index as u32);
    let a = inputs[0];
    let input_shape = |tape: &Tape, i: NodeId| tape.shape(i).to_vec();
    let id = match op {
        Op::Leaf => return Ok(None),
        Op::Add => g,
        Op::Sub => {
            if k == 0 {
                g
            } else {
                tape.scale(g, -1.0)?
            }
        }
        Op::Mul => tape.mul(g, inputs[1 - k])?,
        Op::Div => {
            let b = inputs[1];
            if k == 0 {
                tape.div(g, b)?
            } else {
                let go = tape.mul(g, out)?;
                let q = tape.div(go, b)?;
                tape.scale(q, -1.0)?
            }
        }
        Op::Scale(s) => tape.scale(g, *s)?,
        Op::AddScalar(_) => g,
        Op::Square => {
            let ga = tape.mul(g, a)?;
            tape.scale(ga, 2.0)?
        }
        Op::Sqrt => {
            let half = tape.scale(g, 0.5)?;
            tape.div(half, out)?
        }
        Op::Exp => tape.mul(g, out)?,
        Op::Tanh => {
            let sq = tape.square(out)?;
            let neg = tape.scale(sq, -1.0)?;
            let slope = tape.add_scalar(neg, 1.0)?;
            tape.mul(g, slope)?
        }
        Op::Relu => {
            let mask = tape.apply(Op::Step { neg_slope: 0.0 }, &[a])?;
            tape.mul(g, mask)?
        }
        Op::LeakyRelu(alpha) => {
            let mask = tape.apply(Op::Step { neg_slope: *alpha }, &[a])?;
            tape.mul(g, mask)?
        }
        Op::Step { .. } => return Ok(None),
        Op::Sum => {
            let shape = input_shape(tape, a);
            tape.apply(Op::Fill { shape }, &[g])?
        }
        Op::Fill { .. } => {
            let s = tape.sum(g)?;
            let shape = input_shape(tape, a);
            if tape.shape(s) == shape.as_slice() {
                s
            } else {
                tape.reshape(s, &shape)?
            }
        }
        Op::SumPerSample => {
            let shape = input_shape(tape, a);
            tape.broadcast_per_sample(g, &shape)?
        }
        Op::BroadcastPerSample { .. } => tape.sum_per_sample(g)?,
        Op::SumPerChannel => {
            let shape = input_shape(tape, a);
            tape.broadcast_per_channel(g, &shape)?
        }
        Op::BroadcastPerChannel { .. } => tape.sum_per_channel(g)?,
        Op::SumBatch => {
            let n = tape.value(a).batch();
            tape.broadcast_batch(g, n)?
        }
        Op::BroadcastBatch { .. } => tape.apply(Op::SumBatch, &[g])?,
        Op::SpatialSum => {
            let shape = input_shape(tape, a);
            tape.apply(Op::SpatialBroadcast { shape }, &[g])?
        }
        Op::SpatialBroadcast { .. } => tape.apply(Op::SpatialSum, &[g])?,
        Op::ChannelCombine { transpose } => {
            let w = inputs[1];
            match (k, transpose) {
                (0, false) => tape.apply(Op::ChannelCombine { transpose: true }, &[g, w])?,
                (0, true) => tape.apply(Op::ChannelCombine { transpose: false }, &[g, w])?,
                (_, false) => tape.apply(Op::ChannelOuter, &[g, a])?,
                (_, true) => tape.apply(Op::ChannelOuter, &[a, g])?,
            }
        }
        Op::ChannelOuter => {
            if k == 0 {
                tape.apply(Op::ChannelCombine { transpose: false }, &[inputs[1], g])?
            } else {
                tape.apply(Op::ChannelCombine { transpose: true }, &[a, g])?
            }
        }
        Op::Conv2d(geom) => {
            let kern = inputs[1];
            if k == 0 {
                let s = tape.shape(a);
                let in_hw = (s[2], s[3]);
                tape.apply(Op::Conv2dInputGrad { geom: *geom, in_hw }, &[g, kern])?
            } else {
                let kernel = tape.shape(kern)[2];
                tape.apply(Op::Conv2dWeightGrad { geom: *geom, kernel }, &[a, g])?
            }
        }
        Op::Conv2dInputGrad { geom, .. } => {
            let kern = inputs[1];
            if k == 0 {
                tape.apply(Op::Conv2d(*geom), &[g, kern])?
            } else {
                let kernel = tape.shape(kern)[2];
                tape.apply(Op::Conv2dWeightGrad { geom: *geom, kernel }, &[g, a])?
            }
        }
        Op::Conv2dWeightGrad { geom, .. } => {
            let gy = inputs[1];
            if k == 0 {
                let s = tape.shape(a);
                let in_hw = (s[2], s[3]);
                tape.apply(Op::Conv2dInputGrad { geom: *geom, in_hw }, &[gy, g])?
            } else {
                tape.apply(Op::Conv2d(*geom), &[a, g])?
            }
        }
        Op::UpsampleNearest => {
            let p = tape.avg_pool2(g)?;
            tape.scale(p, 4.0)?
        }
        Op::AvgPool2 => {
            let u = tape.upsample_nearest(g)?;
            tape.scale(u, 0.25)?
        }
        Op::UpsampleBilinear => tape.apply(Op::BilinearAdjoint, &[g])?,
        Op::BilinearAdjoint => tape.upsample_bilinear(g)?,
        Op::Reshape { .. } => {
            let shape = input_shape(tape, a);
            tape.reshape(g, &shape)?
        }
        Op::LogSoftmax => {
            let probs = tape.exp(out)?;
            let total = tape.sum_per_sample(g)?;
            let shape = input_shape(tape, a);
            let tb = tape.broadcast_per_sample(total, &shape)?;
            let pt = tape.mul(probs, tb)?;
            tape.sub(g, pt)?
        }
        Op::SampleNorm => {
            let q = tape.div(g, out)?;
            let shape = input_shape(tape, a);
            let qb = tape.broadcast_per_sample(q, &shape)?;
            tape.mul(qb, a)?
        }
        Op::BatchNorm { eps } => tape.apply(Op::BatchNormBackward { eps: *eps }, &[g, a])?,
        Op::BatchNormBackward { .. } => {
            return Err(Error::MissingSecondOrderRule {
                index,
                op: op.name(),
            })
        }
    };
    Ok(Some(id))
}

/// Record the WGAN-GP penalty `mean_n (||d critic / d x_hat_n||_2 - 1)^2`.
///
/// `critic_sum` must be the sum of per-sample critic outputs at `x_hat`, so
/// its gradient with respect to sample `n` is that sample's own input gradient.
pub fn gradient_penalty(tape: &mut Tape, critic_sum: NodeId, x_hat: NodeId) -> Result<NodeId> {
    let gx = grad(tape, critic_sum, &[x_hat])?[0];
    let norms = tape.sample_norm(gx)?;
    let dev = tape.add_scalar(norms, -1.0)?;
    let sq = tape.square(dev)?;
    tape.mean(sq)
}

/// Penalty node plus its gradient nodes with respect to `params`.
///
/// Fails with [`Error::MissingSecondOrderRule`] if the critic path contains an
/// op whose backward rule cannot itself be differentiated.
pub fn gradient_of_gradient_norm(
    tape: &mut Tape,
    critic_sum: NodeId,
    x_hat: NodeId,
    params: &[NodeId],
) -> Result<(NodeId, Vec<NodeId>)> {
    let penalty = gradient_penalty(tape, critic_sum, x_hat)?;
    let grads = grad(tape, penalty, params)?;
    Ok((penalty, grads))
}

/// Replay nodes `from..=upto` in place.
fn replay(tape: &mut Tape, from: usize, upto: usize) -> Result<()> {
    for index in from..=upto {
        let node = &tape.nodes[index];
        if node.op == Op::Leaf {
            continue;
        }
        let args: Vec<&Tensor> = node.inputs.iter().map(|&i| tape.value(i)).collect();
        let value = node.op.forward(&args)?;
        tape.nodes[index].value = value;
    }
    Ok(())
}

/// Compare the recorded gradient of `output` with respect to the leaf `wrt`
/// against central differences with step `h`.
///
/// Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|, 1e-8)`. The
/// tape's values are restored before returning.
pub fn finite_difference_check(tape: &mut Tape, output: NodeId, wrt: NodeId, h: f64) -> Result<f64> {
    if !tape.contains(wrt) {
        return Err(Error::UnknownNode(wrt.index()));
    }
    if tape.op(wrt) != &Op::Leaf {
        return Err(Error::Shape(format!(
            "finite differences need a leaf, node {} is {}",
            wrt.index(),
            tape.op(wrt).name()
        )));
    }
    let analytic = gradient(tape, output, &[wrt])?.remove(0);
    let original = tape.value(wrt).clone();
    let from = wrt.index() + 1;
    let upto = output.index();
    let mut worst: f64 = 0.0;
    for i in 0..original.len() {
        let mut plus = original.clone();
        plus.data_mut()[i] += h;
        tape.nodes[wrt.index()].value = plus;
        replay(tape, from, upto)?;
        let fp = tape.value(output).item()?;
        let mut minus = original.clone();
        minus.data_mut()[i] -= h;
        tape.nodes[wrt.index()].value = minus;
        replay(tape, from, upto)?;
        let fm = tape.value(output).item()?;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1e-8));
    }
    tape.nodes[wrt.index()].value = original;
    replay(tape, from, tape.len() - 1)?;
    Ok(worst)
}
