//! Registered architecture family: a ResNet18-style basic-block net and a
//! plain conv-BN-ReLU stack, both with uniformly scalable widths.

use crate::error::{Error, Result};
use crate::graph::{ConvBnPair, Graph, Node, Op};
use crate::layers::ConvGeom;
use crate::params::ParamSet;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const ARCH_RESNET18: &str = "resnet18";
pub const ARCH_CONVNET: &str = "convnet";

/// Valid uniform width divisors (channel_scale = 1/div).
pub const WIDTH_DIVISORS: [u32; 4] = [1, 2, 4, 8];

pub fn width_div_from_scale(channel_scale: f64) -> Result<u32> {
    for div in WIDTH_DIVISORS {
        if (channel_scale - 1.0 / div as f64).abs() < 1e-9 {
            return Ok(div);
        }
    }
    Err(Error::Config(format!(
        "channel_scale {channel_scale} not in {{1, 1/2, 1/4, 1/8}}"
    )))
}

pub fn arch_ids() -> [&'static str; 2] {
    [ARCH_RESNET18, ARCH_CONVNET]
}

pub(crate) struct Built {
    pub graph: Graph,
    pub params: ParamSet,
    pub conv_bn: Vec<ConvBnPair>,
}

pub(crate) fn build_arch(
    arch_id: &str,
    class_count: usize,
    width_div: u32,
    in_channels: usize,
    seed: u64,
) -> Result<Built> {
    if class_count < 2 {
        return Err(Error::Config(format!(
            "class_count must be at least 2, got {class_count}"
        )));
    }
    let mut rng = SeededRng::derive(seed, 0x41_52_43_48); // init stream
    match arch_id {
        ARCH_RESNET18 => Ok(build_resnet18(class_count, width_div, in_channels, &mut rng)),
        ARCH_CONVNET => Ok(build_convnet(class_count, width_div, in_channels, &mut rng)),
        other => Err(Error::Config(format!(
            "unknown arch_id {other:?}; registered: {:?}",
            arch_ids()
        ))),
    }
}

struct Builder {
    nodes: Vec<Node>,
    params: ParamSet,
    conv_bn: Vec<ConvBnPair>,
    taps: Vec<(String, usize)>,
    slots: usize,
}

impl Builder {
    fn new() -> Builder {
        Builder {
            nodes: Vec::new(),
            params: ParamSet::default(),
            conv_bn: Vec::new(),
            taps: Vec::new(),
            slots: 1, // slot 0 is the input
        }
    }

    fn slot(&mut self) -> usize {
        let s = self.slots;
        self.slots += 1;
        s
    }

    /// Kaiming-style fan-out normal init for a conv kernel.
    fn conv(
        &mut self,
        name: &str,
        input: usize,
        geom: ConvGeom,
        rng: &mut SeededRng,
    ) -> (usize, usize) {
        let fan_out = geom.out_ch * geom.kernel * geom.kernel;
        let std = (2.0 / fan_out as f32).sqrt();
        let mut w = Tensor::zeros(&[geom.out_ch, geom.in_ch, geom.kernel, geom.kernel]);
        rng.fill_normal(w.data_mut(), 0.0, std);
        let widx = self.params.push(format!("{name}.weight"), w, true);
        let out = self.slot();
        self.nodes.push(Node {
            op: Op::Conv { weight: widx, geom },
            inputs: vec![input],
            out,
        });
        (out, widx)
    }

    fn bn(&mut self, name: &str, input: usize, channels: usize) -> (usize, [usize; 4]) {
        let gamma = self
            .params
            .push(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0), true);
        let beta = self
            .params
            .push(format!("{name}.beta"), Tensor::zeros(&[channels]), true);
        let rmean = self.params.push(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            false,
        );
        let rvar = self.params.push(
            format!("{name}.running_var"),
            Tensor::filled(&[channels], 1.0),
            false,
        );
        let out = self.slot();
        self.nodes.push(Node {
            op: Op::BatchNorm {
                gamma,
                beta,
                running_mean: rmean,
                running_var: rvar,
            },
            inputs: vec![input],
            out,
        });
        (out, [gamma, beta, rmean, rvar])
    }

    /// conv + BN, registering the pair for UCLC-style channel analysis.
    fn conv_bn(
        &mut self,
        conv_name: &str,
        bn_name: &str,
        input: usize,
        geom: ConvGeom,
        rng: &mut SeededRng,
    ) -> usize {
        let (s, widx) = self.conv(conv_name, input, geom, rng);
        let (s, bn_idx) = self.bn(bn_name, s, geom.out_ch);
        self.conv_bn.push(ConvBnPair {
            layer_id: conv_name.to_string(),
            conv: widx,
            gamma: bn_idx[0],
            beta: bn_idx[1],
            running_mean: bn_idx[2],
            running_var: bn_idx[3],
            out_ch: geom.out_ch,
        });
        s
    }

    fn relu(&mut self, input: usize) -> usize {
        let out = self.slot();
        self.nodes.push(Node {
            op: Op::Relu,
            inputs: vec![input],
            out,
        });
        out
    }

    fn add(&mut self, a: usize, b: usize) -> usize {
        let out = self.slot();
        self.nodes.push(Node {
            op: Op::Add,
            inputs: vec![a, b],
            out,
        });
        out
    }

    fn global_pool(&mut self, input: usize) -> usize {
        let out = self.slot();
        self.nodes.push(Node {
            op: Op::GlobalAvgPool,
            inputs: vec![input],
            out,
        });
        out
    }

    fn head(&mut self, input: usize, in_dim: usize, classes: usize, rng: &mut SeededRng) -> usize {
        let bound = 1.0 / (in_dim as f32).sqrt();
        let mut w = Tensor::zeros(&[classes, in_dim]);
        rng.fill_uniform(w.data_mut(), -bound, bound);
        let mut b = Tensor::zeros(&[classes]);
        rng.fill_uniform(b.data_mut(), -bound, bound);
        let widx = self.params.push("head.weight", w, true);
        let bidx = self.params.push("head.bias", b, true);
        let out = self.slot();
        self.nodes.push(Node {
            op: Op::Linear {
                weight: widx,
                bias: bidx,
            },
            inputs: vec![input],
            out,
        });
        out
    }

    fn tap(&mut self, tag: &str, slot: usize) {
        self.taps.push((tag.to_string(), slot));
    }

    fn finish(self, output: usize) -> Built {
        Built {
            graph: Graph {
                nodes: self.nodes,
                input_slot: 0,
                output_slot: output,
                slot_count: self.slots,
                taps: self.taps,
            },
            params: self.params,
            conv_bn: self.conv_bn,
        }
    }
}

fn geom(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, pad: usize) -> ConvGeom {
    ConvGeom {
        in_ch,
        out_ch,
        kernel,
        stride,
        pad,
    }
}

/// CIFAR-style ResNet18: 3x3 stem, four stages of two basic blocks,
/// widths 64/128/256/512 divided by the width divisor.
fn build_resnet18(classes: usize, div: u32, in_ch: usize, rng: &mut SeededRng) -> Built {
    let mut b = Builder::new();
    let w: Vec<usize> = [64usize, 128, 256, 512]
        .iter()
        .map(|&c| c / div as usize)
        .collect();
    let s = b.conv_bn("stem.conv", "stem.bn", 0, geom(in_ch, w[0], 3, 1, 1), rng);
    let mut x = b.relu(s);
    b.tap("stem", x);
    let mut in_w = w[0];
    for (stage, &out_w) in w.iter().enumerate() {
        let stage_name = format!("stage{}", stage + 1);
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("{stage_name}.block{block}");
            let main = b.conv_bn(
                &format!("{p}.conv1"),
                &format!("{p}.bn1"),
                x,
                geom(in_w, out_w, 3, stride, 1),
                rng,
            );
            let main = b.relu(main);
            let main = b.conv_bn(
                &format!("{p}.conv2"),
                &format!("{p}.bn2"),
                main,
                geom(out_w, out_w, 3, 1, 1),
                rng,
            );
            let skip = if stride != 1 || in_w != out_w {
                b.conv_bn(
                    &format!("{p}.down.conv"),
                    &format!("{p}.down.bn"),
                    x,
                    geom(in_w, out_w, 1, stride, 0),
                    rng,
                )
            } else {
                x
            };
            let joined = b.add(main, skip);
            x = b.relu(joined);
            in_w = out_w;
        }
        b.tap(&stage_name, x);
    }
    let pooled = b.global_pool(x);
    b.tap("pre_head", pooled);
    let logits = b.head(pooled, in_w, classes, rng);
    b.finish(logits)
}

/// Plain conv-BN-ReLU stack: widths 64/128/256/512 over the divisor, with
/// stride-2 downsampling after the first layer.
fn build_convnet(classes: usize, div: u32, in_ch: usize, rng: &mut SeededRng) -> Built {
    let mut b = Builder::new();
    let w: Vec<usize> = [64usize, 128, 256, 512]
        .iter()
        .map(|&c| c / div as usize)
        .collect();
    let mut x = 0;
    let mut in_w = in_ch;
    for (i, &out_w) in w.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let name = format!("conv{}", i + 1);
        let s = b.conv_bn(
            &name,
            &format!("bn{}", i + 1),
            x,
            geom(in_w, out_w, 3, stride, 1),
            rng,
        );
        x = b.relu(s);
        b.tap(&name, x);
        in_w = out_w;
    }
    let pooled = b.global_pool(x);
    b.tap("pre_head", pooled);
    let logits = b.head(pooled, in_w, classes, rng);
    b.finish(logits)
}
