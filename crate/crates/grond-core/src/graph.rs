//! Static layer graph shared by every registered architecture.
//!
//! A model is a flat parameter arena plus a list of nodes in execution
//! order. Each node reads value slots and writes one output slot, which is
//! enough to express the conv-BN-ReLU chains and residual joins used here,
//! and keeps backward passes a single reverse sweep.

use crate::error::{Error, Result};
use crate::layers::{self, BnCache, ConvGeom, BN_EPS, BN_MOMENTUM};
use crate::params::ParamSet;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub enum Op {
    Conv {
        weight: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        running_mean: usize,
        running_var: usize,
    },
    Relu,
    /// Residual join of exactly two inputs.
    Add,
    GlobalAvgPool,
    Linear {
        weight: usize,
        bias: usize,
    },
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<usize>,
    pub out: usize,
}

/// A conv kernel and the batch-norm block that follows it; the unit of
/// channel-level analysis (UCLC scoring, ABI flattening, CLP pruning).
#[derive(Clone, Debug)]
pub struct ConvBnPair {
    pub layer_id: String,
    pub conv: usize,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
    pub out_ch: usize,
}

#[derive(Clone, Debug)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub input_slot: usize,
    pub output_slot: usize,
    pub slot_count: usize,
    /// Named feature taps: (tag, slot).
    pub taps: Vec<(String, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Forward results. Slot tensors are retained according to the `keep`
/// policy passed to `forward`; BN caches are per node.
pub struct Activations {
    pub slots: Vec<Option<Tensor>>,
    pub bn: Vec<Option<BnCache>>,
}

pub struct Grads {
    /// Parameter gradients, indexed like the parameter arena.
    pub by_param: Vec<Option<Tensor>>,
    pub input: Option<Tensor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Keep {
    /// Retain every slot (required before a backward pass).
    All,
    /// Drop slots as soon as their last consumer has run; cheap inference.
    Minimal,
}

impl Graph {
    pub fn tap_slot(&self, tag: &str) -> Option<usize> {
        self.taps.iter().find(|(t, _)| t == tag).map(|&(_, s)| s)
    }

    pub fn tap_tags(&self) -> Vec<&str> {
        self.taps.iter().map(|(t, _)| t.as_str()).collect()
    }

    /// Eval-mode pass using running BN statistics; `params` is untouched.
    pub fn forward_eval(
        &self,
        params: &ParamSet,
        x: &Tensor,
        keep: Keep,
        stop_slot: Option<usize>,
    ) -> Result<Activations> {
        let mut slots: Vec<Option<Tensor>> = vec![None; self.slot_count];
        let mut bn: Vec<Option<BnCache>> = vec![None; self.nodes.len()];
        let last_use = self.last_use_table(stop_slot);
        slots[self.input_slot] = Some(x.clone());
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(stop) = stop_slot {
                if slots[stop].is_some() {
                    break;
                }
            }
            let out = match &node.op {
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let input = require(&slots, node.inputs[0])?;
                    let (y, cache) = layers::bn_forward_eval(
                        input,
                        params.get(*gamma).data(),
                        params.get(*beta).data(),
                        params.get(*running_mean).data(),
                        params.get(*running_var).data(),
                        BN_EPS,
                    )?;
                    bn[i] = Some(cache);
                    y
                }
                _ => stateless_op(node, params, &slots)?,
            };
            slots[node.out] = Some(out);
            if keep == Keep::Minimal {
                for &inp in &node.inputs {
                    if last_use[inp] == i && Some(inp) != stop_slot {
                        slots[inp] = None;
                    }
                }
            }
        }
        Ok(Activations { slots, bn })
    }

    /// Train-mode pass; normalizes with batch statistics and updates the
    /// running estimates in `params`. Keeps all slots for backward.
    pub fn forward_train(&self, params: &mut ParamSet, x: &Tensor) -> Result<Activations> {
        let mut slots: Vec<Option<Tensor>> = vec![None; self.slot_count];
        let mut bn: Vec<Option<BnCache>> = vec![None; self.nodes.len()];
        slots[self.input_slot] = Some(x.clone());
        for (i, node) in self.nodes.iter().enumerate() {
            let out = match &node.op {
                Op::BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                } => {
                    let input = require(&slots, node.inputs[0])?;
                    let gamma = params.get(*gamma).data().to_vec();
                    let beta = params.get(*beta).data().to_vec();
                    let (rm, rv) = params.get_pair_mut(*running_mean, *running_var);
                    let (y, cache) = layers::bn_forward_train(
                        input,
                        &gamma,
                        &beta,
                        rm.data_mut(),
                        rv.data_mut(),
                        BN_EPS,
                        BN_MOMENTUM,
                    )?;
                    bn[i] = Some(cache);
                    y
                }
                _ => stateless_op(node, params, &slots)?,
            };
            slots[node.out] = Some(out);
        }
        Ok(Activations { slots, bn })
    }

    /// Reverse sweep from the output slot. `acts` must come from a
    /// `Keep::All` forward pass in the same mode.
    pub fn backward(
        &self,
        params: &ParamSet,
        acts: &Activations,
        dout: Tensor,
        need_input_grad: bool,
        need_param_grads: bool,
    ) -> Result<Grads> {
        let mut slot_grads: Vec<Option<Tensor>> = vec![None; self.slot_count];
        let mut by_param: Vec<Option<Tensor>> = vec![None; params.len()];
        slot_grads[self.output_slot] = Some(dout);
        for (i, node) in self.nodes.iter().enumerate().rev() {
            let dy = match slot_grads[node.out].take() {
                Some(g) => g,
                None => continue, // dead branch (e.g. past a feature stop)
            };
            match &node.op {
                Op::Conv { weight, geom } => {
                    let x = require(&acts.slots, node.inputs[0])?;
                    let need_dx = need_input_grad || node.inputs[0] != self.input_slot;
                    let (dx, dw) = layers::conv2d_backward(
                        x,
                        params.get(*weight),
                        geom,
                        &dy,
                        need_dx,
                        need_param_grads,
                    )?;
                    if let Some(dw) = dw {
                        accumulate_param(&mut by_param, *weight, dw);
                    }
                    if let Some(dx) = dx {
                        accumulate_slot(&mut slot_grads, node.inputs[0], dx)?;
                    }
                }
                Op::BatchNorm { gamma, .. } => {
                    let x = require(&acts.slots, node.inputs[0])?;
                    let cache = acts.bn[i]
                        .as_ref()
                        .ok_or_else(|| Error::Argument("missing BN cache in backward".into()))?;
                    let (dx, dgamma, dbeta) =
                        layers::bn_backward(x, params.get(*gamma).data(), cache, BN_EPS, &dy)?;
                    if need_param_grads {
                        let c = dgamma.len();
                        accumulate_param(
                            &mut by_param,
                            *gamma,
                            Tensor::from_vec(&[c], dgamma)?,
                        );
                        if let Op::BatchNorm { beta, .. } = &node.op {
                            accumulate_param(&mut by_param, *beta, Tensor::from_vec(&[c], dbeta)?);
                        }
                    }
                    accumulate_slot(&mut slot_grads, node.inputs[0], dx)?;
                }
                Op::Relu => {
                    let y = require(&acts.slots, node.out)?;
                    let dx = layers::relu_backward(y, &dy);
                    accumulate_slot(&mut slot_grads, node.inputs[0], dx)?;
                }
                Op::Add => {
                    accumulate_slot(&mut slot_grads, node.inputs[0], dy.clone())?;
                    accumulate_slot(&mut slot_grads, node.inputs[1], dy)?;
                }
                Op::GlobalAvgPool => {
                    let x = require(&acts.slots, node.inputs[0])?;
                    let dx = layers::global_avg_pool_backward(x.shape(), &dy);
                    accumulate_slot(&mut slot_grads, node.inputs[0], dx)?;
                }
                Op::Linear { weight, bias } => {
                    let x = require(&acts.slots, node.inputs[0])?;
                    let (dx, dw, db) =
                        layers::linear_backward(x, params.get(*weight), &dy, true)?;
                    if need_param_grads {
                        accumulate_param(&mut by_param, *weight, dw);
                        let c = db.len();
                        accumulate_param(&mut by_param, *bias, Tensor::from_vec(&[c], db)?);
                    }
                    if let Some(dx) = dx {
                        accumulate_slot(&mut slot_grads, node.inputs[0], dx)?;
                    }
                }
            }
        }
        let input = slot_grads[self.input_slot].take();
        Ok(Grads {
            by_param,
            input: if need_input_grad { input } else { None },
        })
    }

    /// Index of the last node consuming each slot (usize::MAX if unused).
    fn last_use_table(&self, stop_slot: Option<usize>) -> Vec<usize> {
        let mut last = vec![usize::MAX; self.slot_count];
        for (i, node) in self.nodes.iter().enumerate() {
            for &inp in &node.inputs {
                last[inp] = i;
            }
        }
        if let Some(stop) = stop_slot {
            last[stop] = usize::MAX;
        }
        last
    }
}

/// Ops with no mode-dependent state, shared by both forward passes.
fn stateless_op(node: &Node, params: &ParamSet, slots: &[Option<Tensor>]) -> Result<Tensor> {
    match &node.op {
        Op::Conv { weight, geom } => {
            layers::conv2d_forward(require(slots, node.inputs[0])?, params.get(*weight), geom)
        }
        Op::Relu => Ok(layers::relu_forward(require(slots, node.inputs[0])?)),
        Op::Add => layers::add_forward(
            require(slots, node.inputs[0])?,
            require(slots, node.inputs[1])?,
        ),
        Op::GlobalAvgPool => layers::global_avg_pool_forward(require(slots, node.inputs[0])?),
        Op::Linear { weight, bias } => layers::linear_forward(
            require(slots, node.inputs[0])?,
            params.get(*weight),
            params.get(*bias).data(),
        ),
        Op::BatchNorm { .. } => unreachable!("BN handled by the mode-specific passes"),
    }
}

fn require<'a>(slots: &'a [Option<Tensor>], idx: usize) -> Result<&'a Tensor> {
    slots[idx]
        .as_ref()
        .ok_or_else(|| Error::Argument(format!("slot {idx} consumed before being produced")))
}

fn accumulate_slot(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) -> Result<()> {
    match &mut grads[idx] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::Argument("gradient shape mismatch on slot".into()));
            }
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}

fn accumulate_param(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
