use crate::arch::{self, width_div_from_scale};
use crate::error::{Error, Result};
use crate::graph::{Activations, ConvBnPair, Graph, Grads, Keep};
use crate::layers::{argmax_rows, softmax_cross_entropy};
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Architecture manifest carried by every snapshot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelMeta {
    pub arch_id: String,
    pub class_count: usize,
    pub input_shape: [usize; 3],
    /// channel_scale = 1 / width_div
    pub width_div: u32,
    pub seed: u64,
    pub epoch: u32,
}

impl ModelMeta {
    pub fn channel_scale(&self) -> f64 {
        1.0 / self.width_div as f64
    }
}

/// A runnable network: parameter arena plus the layer graph rebuilt
/// deterministically from the manifest. Cloning yields an independent
/// snapshot; nothing here mutates `self` except train-mode forward passes,
/// which update BN running statistics and are marked `&mut`.
#[derive(Clone, Debug)]
pub struct Model {
    pub meta: ModelMeta,
    pub params: ParamSet,
    graph: Graph,
    conv_bn: Vec<ConvBnPair>,
}

/// Builds a freshly initialized model. Deterministic for a fixed seed.
pub fn build_model(
    arch_id: &str,
    class_count: usize,
    channel_scale: f64,
    seed: u64,
    input_shape: [usize; 3],
) -> Result<Model> {
    let width_div = width_div_from_scale(channel_scale)?;
    let built = arch::build_arch(arch_id, class_count, width_div, input_shape[0], seed)?;
    Ok(Model {
        meta: ModelMeta {
            arch_id: arch_id.to_string(),
            class_count,
            input_shape,
            width_div,
            seed,
            epoch: 0,
        },
        params: built.params,
        graph: built.graph,
        conv_bn: built.conv_bn,
    })
}

impl Model {
    /// Rebuilds the graph for an existing manifest and returns the empty
    /// parameter layout; used by snapshot loading.
    pub(crate) fn from_meta(meta: ModelMeta) -> Result<Model> {
        let built = arch::build_arch(
            &meta.arch_id,
            meta.class_count,
            meta.width_div,
            meta.input_shape[0],
            meta.seed,
        )?;
        Ok(Model {
            meta,
            params: built.params,
            graph: built.graph,
            conv_bn: built.conv_bn,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn conv_bn_pairs(&self) -> &[ConvBnPair] {
        &self.conv_bn
    }

    pub fn feature_tags(&self) -> Vec<&str> {
        self.graph.tap_tags()
    }

    pub fn bits_eq(&self, other: &Model) -> bool {
        self.meta == other.meta && self.params.bits_eq(&other.params)
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = batch.shape();
        if s.len() != 4 || s[1] != self.meta.input_shape[0] {
            return Err(Error::Argument(format!(
                "expected NCHW batch with {} channels, got shape {s:?}",
                self.meta.input_shape[0]
            )));
        }
        Ok(())
    }

    /// Eval-mode logits; no parameter mutation.
    pub fn logits(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let acts = self
            .graph
            .forward_eval(&self.params, batch, Keep::Minimal, None)?;
        take_slot(acts, self.graph.output_slot)
    }

    /// Post-BN+ReLU activations of a named block, or the pooled feature
    /// vector for `pre_head`. Pure.
    pub fn forward_features(&self, batch: &Tensor, layer_tag: &str) -> Result<Tensor> {
        self.check_batch(batch)?;
        let slot = self.graph.tap_slot(layer_tag).ok_or_else(|| {
            Error::Argument(format!(
                "unknown layer_tag {layer_tag:?}; available: {:?}",
                self.feature_tags()
            ))
        })?;
        let acts = self
            .graph
            .forward_eval(&self.params, batch, Keep::Minimal, Some(slot))?;
        take_slot(acts, slot)
    }

    /// Eval-mode cross-entropy loss and its gradient w.r.t. the input
    /// batch, for perturbation synthesis. Parameters are left untouched.
    pub fn input_gradient(&self, batch: &Tensor, targets: &[u32]) -> Result<(f64, Tensor)> {
        self.check_batch(batch)?;
        let acts = self
            .graph
            .forward_eval(&self.params, batch, Keep::All, None)?;
        let logits = acts.slots[self.graph.output_slot]
            .as_ref()
            .ok_or_else(|| Error::Argument("forward produced no logits".into()))?;
        let (loss, dlogits) = softmax_cross_entropy(logits, targets)?;
        let grads = self
            .graph
            .backward(&self.params, &acts, dlogits, true, false)?;
        let input = grads
            .input
            .ok_or_else(|| Error::Argument("input gradient unavailable".into()))?;
        Ok((loss, input))
    }

    /// Train-mode forward/backward returning loss, batch accuracy, and
    /// parameter gradients. Updates BN running statistics.
    pub fn train_step_grads(
        &mut self,
        batch: &Tensor,
        targets: &[u32],
    ) -> Result<(f64, usize, Grads)> {
        self.check_batch(batch)?;
        let acts = self.graph.forward_train(&mut self.params, batch)?;
        let logits = acts.slots[self.graph.output_slot]
            .as_ref()
            .ok_or_else(|| Error::Argument("forward produced no logits".into()))?;
        let (loss, dlogits) = softmax_cross_entropy(logits, targets)?;
        let correct = argmax_rows(logits)
            .iter()
            .zip(targets)
            .filter(|(p, t)| p == t)
            .count();
        let grads = self.graph.backward(&self.params, &acts, dlogits, false, true)?;
        Ok((loss, correct, grads))
    }

    /// Batched argmax predictions in eval mode.
    pub fn predict(&self, images: &Tensor, batch_size: usize) -> Result<Vec<u32>> {
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut start = 0;
        while start < n {
            let end = (start + batch_size).min(n);
            let batch = slice_batch(images, start, end);
            let logits = self.logits(&batch)?;
            out.extend(argmax_rows(&logits));
            start = end;
        }
        Ok(out)
    }

    /// Fraction of correct predictions, as a percentage.
    pub fn accuracy(&self, images: &Tensor, labels: &[u32], batch_size: usize) -> Result<f64> {
        if labels.is_empty() {
            return Err(Error::Argument("accuracy over an empty set".into()));
        }
        let preds = self.predict(images, batch_size)?;
        let correct = preds.iter().zip(labels).filter(|(p, t)| p == t).count();
        Ok(100.0 * correct as f64 / labels.len() as f64)
    }
}

/// Copies rows [start, end) of an NCHW tensor into a new batch.
pub fn slice_batch(images: &Tensor, start: usize, end: usize) -> Tensor {
    let s = images.shape();
    let per: usize = s[1..].iter().product();
    let mut shape = s.to_vec();
    shape[0] = end - start;
    let data = images.data()[start * per..end * per].to_vec();
    Tensor::from_vec(&shape, data).expect("slice of a valid tensor is valid")
}

fn take_slot(mut acts: Activations, slot: usize) -> Result<Tensor> {
    acts.slots[slot]
        .take()
        .ok_or_else(|| Error::Argument(format!("slot {slot} was not produced")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_arch_is_a_config_error() {
        let err = build_model("resnet50", 10, 1.0, 7, [3, 32, 32]).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn resnet18_final_stage_width_scales() {
        let full = build_model("resnet18", 10, 1.0, 7, [3, 32, 32]).unwrap();
        let w = full.params.by_name("stage4.block1.conv2.weight").unwrap();
        assert_eq!(w.shape()[0], 512);
        let eighth = build_model("resnet18", 10, 0.125, 7, [3, 32, 32]).unwrap();
        let w = eighth.params.by_name("stage4.block1.conv2.weight").unwrap();
        assert_eq!(w.shape()[0], 64);
    }

    #[test]
    fn build_is_deterministic_for_fixed_seed() {
        let a = build_model("resnet18", 10, 0.125, 7, [3, 32, 32]).unwrap();
        let b = build_model("resnet18", 10, 0.125, 7, [3, 32, 32]).unwrap();
        assert!(a.bits_eq(&b));
        let c = build_model("resnet18", 10, 0.125, 8, [3, 32, 32]).unwrap();
        assert!(!a.bits_eq(&c));
    }

    #[test]
    fn invalid_channel_scale_rejected() {
        let err = build_model("resnet18", 10, 0.3, 7, [3, 32, 32]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn forward_features_shapes() {
        let m = build_model("resnet18", 10, 0.125, 7, [3, 32, 32]).unwrap();
        let x = Tensor::zeros(&[2, 3, 32, 32]);
        let f4 = m.forward_features(&x, "stage4").unwrap();
        assert_eq!(f4.shape(), &[2, 64, 4, 4]);
        let pooled = m.forward_features(&x, "pre_head").unwrap();
        assert_eq!(pooled.shape(), &[2, 64]);
        let err = m.forward_features(&x, "stage9").unwrap_err();
        assert!(matches!(err, Error::Argument(_)));
    }

    #[test]
    fn zero_input_gives_zero_features_with_zero_beta() {
        // Fresh model: conv has no bias, beta = 0, running stats are
        // (0, 1), so eval-mode features of an all-zero batch are zero.
        let m = build_model("convnet", 4, 0.125, 3, [3, 16, 16]).unwrap();
        let x = Tensor::zeros(&[1, 3, 16, 16]);
        let f = m.forward_features(&x, "conv2").unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }
}
