//! Graph definitions for the registry backbones.
//!
//! The eight transfer-learning architectures follow their canonical layouts
//! (channel counts, strides, branch structure); convolutions use symmetric
//! zero padding. Heads are always global-average-pool followed by a single
//! dense layer.

use super::BackboneId;
use crate::error::Result;
use crate::nn::{Graph, GraphBuilder, NodeId};

pub(crate) fn build_graph(backbone: BackboneId, num_classes: usize) -> Result<Graph> {
    let graph = match backbone {
        BackboneId::TinyTestNet => tiny_testnet(num_classes),
        BackboneId::ResNet101 => resnet([3, 4, 23, 3], num_classes),
        BackboneId::ResNet152 => resnet([3, 8, 36, 3], num_classes),
        BackboneId::DenseNet121 => densenet([6, 12, 24, 16], num_classes),
        BackboneId::DenseNet169 => densenet([6, 12, 32, 32], num_classes),
        BackboneId::DenseNet201 => densenet([6, 12, 48, 32], num_classes),
        BackboneId::Xception => xception(num_classes),
        BackboneId::InceptionV3 => inception_v3(num_classes),
        BackboneId::InceptionResNetV2 => inception_resnet_v2(num_classes),
    };
    Ok(graph)
}

fn head(b: &mut GraphBuilder, input: NodeId, in_features: usize, num_classes: usize) -> NodeId {
    let gap = b.global_avg_pool("gap", input);
    b.dense("head.fc", gap, in_features, num_classes)
}

fn tiny_testnet(num_classes: usize) -> Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let c1 = b.conv("conv1", x, 3, 48, (3, 3), (1, 1), (1, 1), 1);
    let r1 = b.relu("relu1", c1);
    let p1 = b.max_pool("pool1", r1, (2, 2), (2, 2), (0, 0));
    let c2 = b.conv("conv2", p1, 48, 96, (3, 3), (1, 1), (1, 1), 1);
    let r2 = b.relu("relu2", c2);
    let p2 = b.max_pool("pool2", r2, (2, 2), (2, 2), (0, 0));
    let c3 = b.conv("conv3", p2, 96, 8, (3, 3), (1, 1), (1, 1), 1);
    let r3 = b.relu("features", c3);
    let out = head(&mut b, r3, 8, num_classes);
    b.build(out)
}

/// conv + batch norm (+ optional relu), the standard building triple.
#[allow(clippy::too_many_arguments)]
fn conv_bn(
    b: &mut GraphBuilder,
    prefix: &str,
    input: NodeId,
    in_c: usize,
    out_c: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    relu: bool,
) -> NodeId {
    let c = b.conv(format!("{prefix}.conv"), input, in_c, out_c, kernel, stride, padding, 1);
    let n = b.batch_norm(format!("{prefix}.bn"), c, out_c);
    if relu {
        b.relu(format!("{prefix}.relu"), n)
    } else {
        n
    }
}

fn resnet(blocks: [usize; 4], num_classes: usize) -> Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let stem = conv_bn(&mut b, "stem", x, 3, 64, (7, 7), (2, 2), (3, 3), true);
    let mut cur = b.max_pool("stem.pool", stem, (3, 3), (2, 2), (1, 1));
    let mut in_c = 64;
    for (stage, &n_blocks) in blocks.iter().enumerate() {
        let planes = 64 << stage;
        let out_c = planes * 4;
        for block in 0..n_blocks {
            let stride = if stage > 0 && block == 0 { (2, 2) } else { (1, 1) };
            let p = format!("layer{}.{block}", stage + 1);
            let c1 = conv_bn(&mut b, &format!("{p}.a"), cur, in_c, planes, (1, 1), (1, 1), (0, 0), true);
            let c2 = conv_bn(&mut b, &format!("{p}.b"), c1, planes, planes, (3, 3), stride, (1, 1), true);
            let c3 = conv_bn(&mut b, &format!("{p}.c"), c2, planes, out_c, (1, 1), (1, 1), (0, 0), false);
            let shortcut = if block == 0 {
                conv_bn(&mut b, &format!("{p}.down"), cur, in_c, out_c, (1, 1), stride, (0, 0), false)
            } else {
                cur
            };
            let sum = b.add(format!("{p}.add"), c3, shortcut);
            cur = b.relu(format!("{p}.relu"), sum);
            in_c = out_c;
        }
    }
    let out = head(&mut b, cur, in_c, num_classes);
    b.build(out)
}

fn densenet(blocks: [usize; 4], num_classes: usize) -> Graph {
    const GROWTH: usize = 32;
    const BN_SIZE: usize = 4;
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let stem = conv_bn(&mut b, "stem", x, 3, 64, (7, 7), (2, 2), (3, 3), true);
    let mut cur = b.max_pool("stem.pool", stem, (3, 3), (2, 2), (1, 1));
    let mut channels = 64;
    for (bi, &n_layers) in blocks.iter().enumerate() {
        for li in 0..n_layers {
            let p = format!("block{}.layer{li}", bi + 1);
            let n1 = b.batch_norm(format!("{p}.bn1"), cur, channels);
            let r1 = b.relu(format!("{p}.relu1"), n1);
            let c1 = b.conv(format!("{p}.conv1"), r1, channels, BN_SIZE * GROWTH, (1, 1), (1, 1), (0, 0), 1);
            let n2 = b.batch_norm(format!("{p}.bn2"), c1, BN_SIZE * GROWTH);
            let r2 = b.relu(format!("{p}.relu2"), n2);
            let c2 = b.conv(format!("{p}.conv2"), r2, BN_SIZE * GROWTH, GROWTH, (3, 3), (1, 1), (1, 1), 1);
            cur = b.concat(format!("{p}.concat"), vec![cur, c2]);
            channels += GROWTH;
        }
        if bi + 1 < blocks.len() {
            let p = format!("trans{}", bi + 1);
            let n = b.batch_norm(format!("{p}.bn"), cur, channels);
            let r = b.relu(format!("{p}.relu"), n);
            channels /= 2;
            let c = b.conv(format!("{p}.conv"), r, channels * 2, channels, (1, 1), (1, 1), (0, 0), 1);
            cur = b.avg_pool(format!("{p}.pool"), c, (2, 2), (2, 2), (0, 0));
        }
    }
    let n = b.batch_norm("final.bn", cur, channels);
    let r = b.relu("final.relu", n);
    let out = head(&mut b, r, channels, num_classes);
    b.build(out)
}

/// Depthwise 3x3 + pointwise 1x1 + batch norm.
fn sep_conv_bn(
    b: &mut GraphBuilder,
    prefix: &str,
    input: NodeId,
    in_c: usize,
    out_c: usize,
) -> NodeId {
    let dw = b.conv(format!("{prefix}.dw"), input, in_c, in_c, (3, 3), (1, 1), (1, 1), in_c);
    let pw = b.conv(format!("{prefix}.pw"), dw, in_c, out_c, (1, 1), (1, 1), (0, 0), 1);
    b.batch_norm(format!("{prefix}.bn"), pw, out_c)
}

fn xception(num_classes: usize) -> Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let c1 = conv_bn(&mut b, "entry.conv1", x, 3, 32, (3, 3), (2, 2), (0, 0), true);
    let mut cur = conv_bn(&mut b, "entry.conv2", c1, 32, 64, (3, 3), (1, 1), (0, 0), true);
    let mut in_c = 64;

    // Entry-flow reduction blocks. The first block omits the leading relu.
    for (i, out_c) in [128usize, 256, 728].into_iter().enumerate() {
        let p = format!("entry.block{}", i + 2);
        let shortcut = {
            let sc = b.conv(format!("{p}.skip"), cur, in_c, out_c, (1, 1), (2, 2), (0, 0), 1);
            b.batch_norm(format!("{p}.skip.bn"), sc, out_c)
        };
        let mut t = cur;
        if i > 0 {
            t = b.relu(format!("{p}.relu1"), t);
        }
        t = sep_conv_bn(&mut b, &format!("{p}.sep1"), t, in_c, out_c);
        t = b.relu(format!("{p}.relu2"), t);
        t = sep_conv_bn(&mut b, &format!("{p}.sep2"), t, out_c, out_c);
        t = b.max_pool(format!("{p}.pool"), t, (3, 3), (2, 2), (1, 1));
        cur = b.add(format!("{p}.add"), t, shortcut);
        in_c = out_c;
    }

    // Middle flow: eight identity residual blocks at 728 channels.
    for i in 0..8 {
        let p = format!("middle.block{}", i + 1);
        let mut t = cur;
        for j in 0..3 {
            t = b.relu(format!("{p}.relu{}", j + 1), t);
            t = sep_conv_bn(&mut b, &format!("{p}.sep{}", j + 1), t, 728, 728);
        }
        cur = b.add(format!("{p}.add"), t, cur);
    }

    // Exit flow.
    let p = "exit.block1";
    let shortcut = {
        let sc = b.conv(format!("{p}.skip"), cur, 728, 1024, (1, 1), (2, 2), (0, 0), 1);
        b.batch_norm(format!("{p}.skip.bn"), sc, 1024)
    };
    let mut t = b.relu(format!("{p}.relu1"), cur);
    t = sep_conv_bn(&mut b, &format!("{p}.sep1"), t, 728, 728);
    t = b.relu(format!("{p}.relu2"), t);
    t = sep_conv_bn(&mut b, &format!("{p}.sep2"), t, 728, 1024);
    t = b.max_pool(format!("{p}.pool"), t, (3, 3), (2, 2), (1, 1));
    cur = b.add(format!("{p}.add"), t, shortcut);

    let s1 = sep_conv_bn(&mut b, "exit.sep3", cur, 1024, 1536);
    let r1 = b.relu("exit.relu3", s1);
    let s2 = sep_conv_bn(&mut b, "exit.sep4", r1, 1536, 2048);
    let r2 = b.relu("exit.relu4", s2);
    let out = head(&mut b, r2, 2048, num_classes);
    b.build(out)
}

fn inception_v3(num_classes: usize) -> Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let c = conv_bn(&mut b, "stem.1a", x, 3, 32, (3, 3), (2, 2), (0, 0), true);
    let c = conv_bn(&mut b, "stem.2a", c, 32, 32, (3, 3), (1, 1), (0, 0), true);
    let c = conv_bn(&mut b, "stem.2b", c, 32, 64, (3, 3), (1, 1), (1, 1), true);
    let c = b.max_pool("stem.pool1", c, (3, 3), (2, 2), (0, 0));
    let c = conv_bn(&mut b, "stem.3b", c, 64, 80, (1, 1), (1, 1), (0, 0), true);
    let c = conv_bn(&mut b, "stem.4a", c, 80, 192, (3, 3), (1, 1), (0, 0), true);
    let mut cur = b.max_pool("stem.pool2", c, (3, 3), (2, 2), (0, 0));
    let mut in_c = 192;

    // Inception-A x3.
    for (i, pool_c) in [32usize, 64, 64].into_iter().enumerate() {
        let p = format!("mixed_a{i}");
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, in_c, 64, (1, 1), (1, 1), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, in_c, 48, (1, 1), (1, 1), (0, 0), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 48, 64, (5, 5), (1, 1), (2, 2), true);
        let b3a = conv_bn(&mut b, &format!("{p}.b3a"), cur, in_c, 64, (1, 1), (1, 1), (0, 0), true);
        let b3b = conv_bn(&mut b, &format!("{p}.b3b"), b3a, 64, 96, (3, 3), (1, 1), (1, 1), true);
        let b3 = conv_bn(&mut b, &format!("{p}.b3c"), b3b, 96, 96, (3, 3), (1, 1), (1, 1), true);
        let b4p = b.avg_pool(format!("{p}.b4pool"), cur, (3, 3), (1, 1), (1, 1));
        let b4 = conv_bn(&mut b, &format!("{p}.b4"), b4p, in_c, pool_c, (1, 1), (1, 1), (0, 0), true);
        cur = b.concat(format!("{p}.out"), vec![b1, b2, b3, b4]);
        in_c = 64 + 64 + 96 + pool_c;
    }

    // Reduction-B.
    {
        let p = "mixed_b";
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, in_c, 384, (3, 3), (2, 2), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, in_c, 64, (1, 1), (1, 1), (0, 0), true);
        let b2b = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 64, 96, (3, 3), (1, 1), (1, 1), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2c"), b2b, 96, 96, (3, 3), (2, 2), (0, 0), true);
        let b3 = b.max_pool(format!("{p}.pool"), cur, (3, 3), (2, 2), (0, 0));
        cur = b.concat(format!("{p}.out"), vec![b1, b2, b3]);
        in_c = 384 + 96 + in_c;
    }

    // Inception-C x4 with growing 7x7 channel counts.
    for (i, c7) in [128usize, 160, 160, 192].into_iter().enumerate() {
        let p = format!("mixed_c{i}");
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, in_c, 192, (1, 1), (1, 1), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, in_c, c7, (1, 1), (1, 1), (0, 0), true);
        let b2b = conv_bn(&mut b, &format!("{p}.b2b"), b2a, c7, c7, (1, 7), (1, 1), (0, 3), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2c"), b2b, c7, 192, (7, 1), (1, 1), (3, 0), true);
        let b3a = conv_bn(&mut b, &format!("{p}.b3a"), cur, in_c, c7, (1, 1), (1, 1), (0, 0), true);
        let b3b = conv_bn(&mut b, &format!("{p}.b3b"), b3a, c7, c7, (7, 1), (1, 1), (3, 0), true);
        let b3c = conv_bn(&mut b, &format!("{p}.b3c"), b3b, c7, c7, (1, 7), (1, 1), (0, 3), true);
        let b3d = conv_bn(&mut b, &format!("{p}.b3d"), b3c, c7, c7, (7, 1), (1, 1), (3, 0), true);
        let b3 = conv_bn(&mut b, &format!("{p}.b3e"), b3d, c7, 192, (1, 7), (1, 1), (0, 3), true);
        let b4p = b.avg_pool(format!("{p}.b4pool"), cur, (3, 3), (1, 1), (1, 1));
        let b4 = conv_bn(&mut b, &format!("{p}.b4"), b4p, in_c, 192, (1, 1), (1, 1), (0, 0), true);
        cur = b.concat(format!("{p}.out"), vec![b1, b2, b3, b4]);
        in_c = 192 * 4;
    }

    // Reduction-D.
    {
        let p = "mixed_d";
        let b1a = conv_bn(&mut b, &format!("{p}.b1a"), cur, in_c, 192, (1, 1), (1, 1), (0, 0), true);
        let b1 = conv_bn(&mut b, &format!("{p}.b1b"), b1a, 192, 320, (3, 3), (2, 2), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, in_c, 192, (1, 1), (1, 1), (0, 0), true);
        let b2b = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 192, 192, (1, 7), (1, 1), (0, 3), true);
        let b2c = conv_bn(&mut b, &format!("{p}.b2c"), b2b, 192, 192, (7, 1), (1, 1), (3, 0), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2d"), b2c, 192, 192, (3, 3), (2, 2), (0, 0), true);
        let b3 = b.max_pool(format!("{p}.pool"), cur, (3, 3), (2, 2), (0, 0));
        cur = b.concat(format!("{p}.out"), vec![b1, b2, b3]);
        in_c = 320 + 192 + in_c;
    }

    // Inception-E x2.
    for i in 0..2 {
        let p = format!("mixed_e{i}");
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, in_c, 320, (1, 1), (1, 1), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, in_c, 384, (1, 1), (1, 1), (0, 0), true);
        let b2l = conv_bn(&mut b, &format!("{p}.b2l"), b2a, 384, 384, (1, 3), (1, 1), (0, 1), true);
        let b2r = conv_bn(&mut b, &format!("{p}.b2r"), b2a, 384, 384, (3, 1), (1, 1), (1, 0), true);
        let b2 = b.concat(format!("{p}.b2out"), vec![b2l, b2r]);
        let b3a = conv_bn(&mut b, &format!("{p}.b3a"), cur, in_c, 448, (1, 1), (1, 1), (0, 0), true);
        let b3b = conv_bn(&mut b, &format!("{p}.b3b"), b3a, 448, 384, (3, 3), (1, 1), (1, 1), true);
        let b3l = conv_bn(&mut b, &format!("{p}.b3l"), b3b, 384, 384, (1, 3), (1, 1), (0, 1), true);
        let b3r = conv_bn(&mut b, &format!("{p}.b3r"), b3b, 384, 384, (3, 1), (1, 1), (1, 0), true);
        let b3 = b.concat(format!("{p}.b3out"), vec![b3l, b3r]);
        let b4p = b.avg_pool(format!("{p}.b4pool"), cur, (3, 3), (1, 1), (1, 1));
        let b4 = conv_bn(&mut b, &format!("{p}.b4"), b4p, in_c, 192, (1, 1), (1, 1), (0, 0), true);
        cur = b.concat(format!("{p}.out"), vec![b1, b2, b3, b4]);
        in_c = 320 + 768 + 768 + 192;
    }

    let out = head(&mut b, cur, in_c, num_classes);
    b.build(out)
}

fn inception_resnet_v2(num_classes: usize) -> Graph {
    let mut b = GraphBuilder::new(3);
    let x = b.input();
    let c = conv_bn(&mut b, "stem.1a", x, 3, 32, (3, 3), (2, 2), (0, 0), true);
    let c = conv_bn(&mut b, "stem.2a", c, 32, 32, (3, 3), (1, 1), (0, 0), true);
    let c = conv_bn(&mut b, "stem.2b", c, 32, 64, (3, 3), (1, 1), (1, 1), true);
    let c = b.max_pool("stem.pool1", c, (3, 3), (2, 2), (0, 0));
    let c = conv_bn(&mut b, "stem.3b", c, 64, 80, (1, 1), (1, 1), (0, 0), true);
    let c = conv_bn(&mut b, "stem.4a", c, 80, 192, (3, 3), (1, 1), (0, 0), true);
    let cur = b.max_pool("stem.pool2", c, (3, 3), (2, 2), (0, 0));

    // mixed_5b.
    let p = "mixed_5b";
    let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, 192, 96, (1, 1), (1, 1), (0, 0), true);
    let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, 192, 48, (1, 1), (1, 1), (0, 0), true);
    let b2 = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 48, 64, (5, 5), (1, 1), (2, 2), true);
    let b3a = conv_bn(&mut b, &format!("{p}.b3a"), cur, 192, 64, (1, 1), (1, 1), (0, 0), true);
    let b3b = conv_bn(&mut b, &format!("{p}.b3b"), b3a, 64, 96, (3, 3), (1, 1), (1, 1), true);
    let b3 = conv_bn(&mut b, &format!("{p}.b3c"), b3b, 96, 96, (3, 3), (1, 1), (1, 1), true);
    let b4p = b.avg_pool(format!("{p}.b4pool"), cur, (3, 3), (1, 1), (1, 1));
    let b4 = conv_bn(&mut b, &format!("{p}.b4"), b4p, 192, 64, (1, 1), (1, 1), (0, 0), true);
    let mut cur = b.concat(format!("{p}.out"), vec![b1, b2, b3, b4]); // 320

    // block35 x10 (scale 0.17).
    for i in 0..10 {
        let p = format!("block35.{i}");
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, 320, 32, (1, 1), (1, 1), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, 320, 32, (1, 1), (1, 1), (0, 0), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 32, 32, (3, 3), (1, 1), (1, 1), true);
        let b3a = conv_bn(&mut b, &format!("{p}.b3a"), cur, 320, 32, (1, 1), (1, 1), (0, 0), true);
        let b3b = conv_bn(&mut b, &format!("{p}.b3b"), b3a, 32, 48, (3, 3), (1, 1), (1, 1), true);
        let b3 = conv_bn(&mut b, &format!("{p}.b3c"), b3b, 48, 64, (3, 3), (1, 1), (1, 1), true);
        let cat = b.concat(format!("{p}.cat"), vec![b1, b2, b3]); // 128
        let up = b.conv(format!("{p}.up"), cat, 128, 320, (1, 1), (1, 1), (0, 0), 1);
        let scaled = b.scale(format!("{p}.scale"), up, 0.17);
        let sum = b.add(format!("{p}.add"), cur, scaled);
        cur = b.relu(format!("{p}.relu"), sum);
    }

    // mixed_6a: 320 -> 1088.
    let p = "mixed_6a";
    let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, 320, 384, (3, 3), (2, 2), (0, 0), true);
    let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, 320, 256, (1, 1), (1, 1), (0, 0), true);
    let b2b = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 256, 256, (3, 3), (1, 1), (1, 1), true);
    let b2 = conv_bn(&mut b, &format!("{p}.b2c"), b2b, 256, 384, (3, 3), (2, 2), (0, 0), true);
    let b3 = b.max_pool(format!("{p}.pool"), cur, (3, 3), (2, 2), (0, 0));
    let mut cur = b.concat(format!("{p}.out"), vec![b1, b2, b3]); // 1088

    // block17 x20 (scale 0.10).
    for i in 0..20 {
        let p = format!("block17.{i}");
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, 1088, 192, (1, 1), (1, 1), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, 1088, 128, (1, 1), (1, 1), (0, 0), true);
        let b2b = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 128, 160, (1, 7), (1, 1), (0, 3), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2c"), b2b, 160, 192, (7, 1), (1, 1), (3, 0), true);
        let cat = b.concat(format!("{p}.cat"), vec![b1, b2]); // 384
        let up = b.conv(format!("{p}.up"), cat, 384, 1088, (1, 1), (1, 1), (0, 0), 1);
        let scaled = b.scale(format!("{p}.scale"), up, 0.10);
        let sum = b.add(format!("{p}.add"), cur, scaled);
        cur = b.relu(format!("{p}.relu"), sum);
    }

    // mixed_7a: 1088 -> 2080.
    let p = "mixed_7a";
    let b1a = conv_bn(&mut b, &format!("{p}.b1a"), cur, 1088, 256, (1, 1), (1, 1), (0, 0), true);
    let b1 = conv_bn(&mut b, &format!("{p}.b1b"), b1a, 256, 384, (3, 3), (2, 2), (0, 0), true);
    let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, 1088, 256, (1, 1), (1, 1), (0, 0), true);
    let b2 = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 256, 288, (3, 3), (2, 2), (0, 0), true);
    let b3a = conv_bn(&mut b, &format!("{p}.b3a"), cur, 1088, 256, (1, 1), (1, 1), (0, 0), true);
    let b3b = conv_bn(&mut b, &format!("{p}.b3b"), b3a, 256, 288, (3, 3), (1, 1), (1, 1), true);
    let b3 = conv_bn(&mut b, &format!("{p}.b3c"), b3b, 288, 320, (3, 3), (2, 2), (0, 0), true);
    let b4 = b.max_pool(format!("{p}.pool"), cur, (3, 3), (2, 2), (0, 0));
    let mut cur = b.concat(format!("{p}.out"), vec![b1, b2, b3, b4]); // 2080

    // block8 x10 (scale 0.20).
    for i in 0..10 {
        let p = format!("block8.{i}");
        let b1 = conv_bn(&mut b, &format!("{p}.b1"), cur, 2080, 192, (1, 1), (1, 1), (0, 0), true);
        let b2a = conv_bn(&mut b, &format!("{p}.b2a"), cur, 2080, 192, (1, 1), (1, 1), (0, 0), true);
        let b2b = conv_bn(&mut b, &format!("{p}.b2b"), b2a, 192, 224, (1, 3), (1, 1), (0, 1), true);
        let b2 = conv_bn(&mut b, &format!("{p}.b2c"), b2b, 224, 256, (3, 1), (1, 1), (1, 0), true);
        let cat = b.concat(format!("{p}.cat"), vec![b1, b2]); // 448
        let up = b.conv(format!("{p}.up"), cat, 448, 2080, (1, 1), (1, 1), (0, 0), 1);
        let scaled = b.scale(format!("{p}.scale"), up, 0.20);
        let sum = b.add(format!("{p}.add"), cur, scaled);
        cur = b.relu(format!("{p}.relu"), sum);
    }

    let top = conv_bn(&mut b, "conv_7b", cur, 2080, 1536, (1, 1), (1, 1), (0, 0), true);
    let out = head(&mut b, top, 1536, num_classes);
    b.build(out)
}
