//! Registered feature extractors.
//!
//! Every backbone is a plain sequential stack ending in global average
//! pooling, so the feature width is the channel count of the last
//! convolution and any input size the stack can digest is accepted.

use super::layers::LayerSpec;

/// Identifiers accepted by [`lookup`].
pub const REGISTERED: [&str; 4] = ["desk", "alexnet", "vgg16", "mobilenet_v1"];

pub const DEFAULT_BACKBONE: &str = "desk";

/// Layer list for a registered backbone id.
pub fn lookup(id: &str) -> Option<Vec<LayerSpec>> {
    match id {
        "desk" => Some(desk()),
        "alexnet" => Some(alexnet()),
        "vgg16" => Some(vgg16()),
        "mobilenet_v1" => Some(mobilenet_v1()),
        _ => None,
    }
}

/// Three strided 3x3 convolutions, 16/32/64 channels.
fn desk() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        LayerSpec::conv(16, 3, 2, 1),
        Relu,
        LayerSpec::conv(32, 3, 2, 1),
        Relu,
        LayerSpec::conv(64, 3, 2, 1),
        Relu,
        GlobalAvgPool,
    ]
}

fn alexnet() -> Vec<LayerSpec> {
    use LayerSpec::*;
    vec![
        LayerSpec::conv(64, 11, 4, 2),
        Relu,
        MaxPool { kernel: 3, stride: 2 },
        LayerSpec::conv(192, 5, 1, 2),
        Relu,
        MaxPool { kernel: 3, stride: 2 },
        LayerSpec::conv(384, 3, 1, 1),
        Relu,
        LayerSpec::conv(256, 3, 1, 1),
        Relu,
        LayerSpec::conv(256, 3, 1, 1),
        Relu,
        MaxPool { kernel: 3, stride: 2 },
        GlobalAvgPool,
    ]
}

fn vgg16() -> Vec<LayerSpec> {
    const PLAN: [usize; 18] = [
        64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0,
    ];
    let mut layers = Vec::new();
    for &c in &PLAN {
        if c == 0 {
            layers.push(LayerSpec::MaxPool { kernel: 2, stride: 2 });
        } else {
            layers.push(LayerSpec::conv(c, 3, 1, 1));
            layers.push(LayerSpec::Relu);
        }
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

fn mobilenet_v1() -> Vec<LayerSpec> {
    const BLOCKS: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let mut layers = vec![LayerSpec::conv(32, 3, 2, 1), LayerSpec::Relu];
    let mut channels = 32;
    for &(out, stride) in &BLOCKS {
        layers.push(LayerSpec::Conv {
            out_channels: channels,
            kernel: 3,
            stride,
            padding: 1,
            groups: channels,
        });
        layers.push(LayerSpec::Relu);
        layers.push(LayerSpec::conv(out, 1, 1, 0));
        layers.push(LayerSpec::Relu);
        channels = out;
    }
    layers.push(LayerSpec::GlobalAvgPool);
    layers
}

/// Walks the stack over an input shape; `None` if some layer does not fit.
pub fn trace_shapes(layers: &[LayerSpec], input: [usize; 3]) -> Option<Vec<[usize; 3]>> {
    let mut shapes = vec![input];
    let mut current = input;
    for layer in layers {
        current = layer.output_shape(current)?;
        if current[1] == 0 || current[2] == 0 {
            return None;
        }
        shapes.push(current);
    }
    Some(shapes)
}
