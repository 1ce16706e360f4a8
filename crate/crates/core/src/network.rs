//! Multi-exit convolutional backbone.
//!
//! The backbone is a stack of blocks, each `conv3x3 -> relu -> conv3x3 ->
//! relu`, with the first conv of every block after the first using stride 2.
//! Exit heads hang off block outputs; head `k` is `conv3x3 -> relu ->
//! conv3x3 -> relu -> avg_pool -> dense(c)` with the conv width equal to the
//! channels of the block it is attached to. The last head sits on the last
//! block and doubles as the main classifier.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::codec::{self, OffsetReader};
use crate::error::{Error, Result};
use crate::layers::{self, conv_output_size, Conv2d, Dense, Layer, LayerParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"ELFC";
const VERSION: u32 = 1;
const KERNEL: usize = 3;
const PAD: usize = 1;

/// Everything needed to rebuild a network bit-for-bit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub classes: usize,
    pub input_dims: [usize; 3],
    /// Output channels of each backbone block.
    pub widths: Vec<usize>,
    /// 1-based index of the block each exit is attached to, strictly increasing,
    /// ending at the last block.
    pub exit_after: Vec<usize>,
    pub seed: u64,
}

impl Architecture {
    /// Places `exits` heads over `widths.len()` blocks: exit `k` follows block
    /// `ceil(k * B / K)`, so the last exit always follows the last block.
    pub fn new(
        classes: usize,
        input_dims: [usize; 3],
        exits: usize,
        widths: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let blocks = widths.len();
        if exits == 0 {
            return Err(Error::config("a network needs at least one exit"));
        }
        if exits > blocks {
            return Err(Error::config(format!(
                "{exits} exits but only {blocks} backbone blocks"
            )));
        }
        let exit_after = (1..=exits).map(|k| (k * blocks).div_ceil(exits)).collect();
        let arch = Self {
            classes,
            input_dims,
            widths: widths.to_vec(),
            exit_after,
            seed,
        };
        arch.validate()?;
        Ok(arch)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        if self.input_dims.contains(&0) || self.widths.contains(&0) || self.widths.is_empty() {
            return Err(Error::config("input dims and widths must be positive"));
        }
        let ok = !self.exit_after.is_empty()
            && self.exit_after.windows(2).all(|w| w[0] < w[1])
            && self.exit_after[0] >= 1
            && *self.exit_after.last().unwrap() == self.widths.len();
        if !ok {
            return Err(Error::config(format!(
                "invalid exit placement {:?} for {} blocks",
                self.exit_after,
                self.widths.len()
            )));
        }
        self.block_dims().map(|_| ())
    }

    fn stride(block: usize) -> usize {
        if block == 0 {
            1
        } else {
            2
        }
    }

    /// Output `[C, H, W]` of every block; errors if a stride does not tile.
    pub fn block_dims(&self) -> Result<Vec<[usize; 3]>> {
        let [_, mut h, mut w] = self.input_dims;
        let mut dims = Vec::with_capacity(self.widths.len());
        for (b, &width) in self.widths.iter().enumerate() {
            let s = Self::stride(b);
            let ctx = |e: Error| match e {
                Error::Config(msg) => Error::config(format!(
                    "input {:?} incompatible with the stride plan at block {}: {msg}",
                    self.input_dims,
                    b + 1
                )),
                other => other,
            };
            h = conv_output_size(h, KERNEL, s, PAD).map_err(ctx)?;
            w = conv_output_size(w, KERNEL, s, PAD).map_err(ctx)?;
            dims.push([width, h, w]);
        }
        Ok(dims)
    }

    pub fn exits(&self) -> usize {
        self.exit_after.len()
    }
}

/// FLOPs per example: blocks, heads, and the cumulative cost of reaching and
/// evaluating each exit.
#[derive(Debug, Clone, PartialEq)]
pub struct FlopTable {
    /// `(layer name, flops)` in evaluation order, blocks first then heads.
    pub layers: Vec<(String, u64)>,
    pub blocks: Vec<u64>,
    pub heads: Vec<u64>,
    pub cumulative: Vec<u64>,
}

impl FlopTable {
    /// Cost of the network with no early exit: every block plus the last head.
    pub fn baseline(&self) -> u64 {
        self.blocks.iter().sum::<u64>() + self.heads.last().copied().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiExitNetwork {
    arch: Architecture,
    blocks: Vec<Vec<Layer>>,
    heads: Vec<Vec<Layer>>,
    flops: FlopTable,
}

fn he_params(rng: &mut ChaCha8Rng, shape: Vec<usize>, fan_in: usize, bias_len: usize) -> LayerParams {
    let std = (2.0 / fan_in as f64).sqrt();
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    LayerParams::new(
        Tensor::from_parts(shape, data),
        Tensor::zeros(&[bias_len]),
    )
}

fn conv(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize, stride: usize) -> Layer {
    let params = he_params(
        rng,
        vec![c_out, c_in, KERNEL, KERNEL],
        c_in * KERNEL * KERNEL,
        c_out,
    );
    Layer::Conv(Conv2d::new(params, stride, PAD))
}

fn conv_flops(c_in: usize, c_out: usize, out: [usize; 3]) -> u64 {
    layers::conv_flops(KERNEL, c_in, c_out, out[1], out[2])
}

/// Builds a network with He-initialized weights and zero biases.
pub fn build_network(
    classes: usize,
    input_dims: [usize; 3],
    exits: usize,
    widths: &[usize],
    seed: u64,
) -> Result<MultiExitNetwork> {
    MultiExitNetwork::from_architecture(Architecture::new(classes, input_dims, exits, widths, seed)?)
}

impl MultiExitNetwork {
    pub fn from_architecture(arch: Architecture) -> Result<Self> {
        arch.validate()?;
        let dims = arch.block_dims()?;
        let mut rng = ChaCha8Rng::seed_from_u64(arch.seed);
        let mut layers = Vec::new();
        let mut blocks = Vec::with_capacity(arch.widths.len());
        let mut block_flops = Vec::with_capacity(arch.widths.len());
        let mut c_in = arch.input_dims[0];
        for (b, &width) in arch.widths.iter().enumerate() {
            blocks.push(vec![
                conv(&mut rng, c_in, width, Architecture::stride(b)),
                Layer::relu(),
                conv(&mut rng, width, width, 1),
                Layer::relu(),
            ]);
            let f1 = conv_flops(c_in, width, dims[b]);
            let f2 = conv_flops(width, width, dims[b]);
            layers.push((format!("block{}.conv1", b + 1), f1));
            layers.push((format!("block{}.conv2", b + 1), f2));
            block_flops.push(f1 + f2);
            c_in = width;
        }
        let mut heads = Vec::with_capacity(arch.exits());
        let mut head_flops = Vec::with_capacity(arch.exits());
        for (k, &after) in arch.exit_after.iter().enumerate() {
            let width = arch.widths[after - 1];
            let d = he_params(&mut rng, vec![width, arch.classes], width, arch.classes);
            heads.push(vec![
                conv(&mut rng, width, width, 1),
                Layer::relu(),
                conv(&mut rng, width, width, 1),
                Layer::relu(),
                Layer::avg_pool(),
                Layer::Dense(Dense::new(d)),
            ]);
            let f = conv_flops(width, width, dims[after - 1]);
            let fd = layers::dense_flops(width, arch.classes);
            layers.push((format!("head{}.conv1", k + 1), f));
            layers.push((format!("head{}.conv2", k + 1), f));
            layers.push((format!("head{}.dense", k + 1), fd));
            head_flops.push(2 * f + fd);
        }
        let cumulative = arch
            .exit_after
            .iter()
            .zip(&head_flops)
            .map(|(&after, &h)| block_flops[..after].iter().sum::<u64>() + h)
            .collect();
        Ok(Self {
            arch,
            blocks,
            heads,
            flops: FlopTable {
                layers,
                blocks: block_flops,
                heads: head_flops,
                cumulative,
            },
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn exits(&self) -> usize {
        self.heads.len()
    }

    /// 0-based block index each exit follows.
    pub fn exit_blocks(&self) -> Vec<usize> {
        self.arch.exit_after.iter().map(|a| a - 1).collect()
    }

    pub fn flop_table(&self) -> &FlopTable {
        &self.flops
    }

    /// Conv output widths of every head.
    pub fn head_widths(&self) -> Vec<usize> {
        self.heads
            .iter()
            .map(|h| match &h[0] {
                Layer::Conv(c) => c.out_channels(),
                _ => unreachable!("heads start with a conv"),
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let d = self.arch.input_dims;
        if x.rank() != 4 || x.shape()[1..] != d {
            return Err(Error::Dimension {
                op: "network input",
                left: x.shape().to_vec(),
                right: vec![x.batch(), d[0], d[1], d[2]],
            });
        }
        Ok(())
    }

    pub fn infer_block(&self, block: usize, x: &Tensor) -> Result<Tensor> {
        if block == 0 {
            self.check_input(x)?;
        }
        run(&self.blocks[block], x)
    }

    pub fn infer_head(&self, exit: usize, x: &Tensor) -> Result<Tensor> {
        run(&self.heads[exit], x)
    }

    /// Logits of every exit without caching.
    pub fn infer_all(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.exits());
        let mut h = x.clone();
        let mut next = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            h = run(block, &h)?;
            if next < self.exits() && self.arch.exit_after[next] == b + 1 {
                out.push(run(&self.heads[next], &h)?);
                next += 1;
            }
        }
        Ok(out)
    }

    /// Training forward pass: logits of every exit, caching activations.
    pub fn forward(&mut self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(self.heads.len());
        let mut h = x.clone();
        let mut next = 0;
        for (b, block) in self.blocks.iter_mut().enumerate() {
            for layer in block.iter_mut() {
                h = layer.forward(&h)?;
            }
            if next < self.heads.len() && self.arch.exit_after[next] == b + 1 {
                let mut z = h.clone();
                for layer in self.heads[next].iter_mut() {
                    z = layer.forward(&z)?;
                }
                out.push(z);
                next += 1;
            }
        }
        Ok(out)
    }

    /// Backpropagates per-exit logit gradients. `None` means the exit got no
    /// gradient; blocks past the deepest exit with a gradient are skipped.
    ///
    /// Batch items whose gradient row is exactly zero contribute nothing, so
    /// each head and block only backpropagates the items that reach it with
    /// a nonzero gradient. Under early exiting most items stop at the
    /// shallow exits, which makes the deep part of the backward pass cheap.
    pub fn backward(&mut self, exit_grads: &[Option<Tensor>]) -> Result<()> {
        if exit_grads.len() != self.heads.len() {
            return Err(Error::config(format!(
                "{} exit gradients for {} exits",
                exit_grads.len(),
                self.heads.len()
            )));
        }
        // (items, gradient for those items), items sorted.
        let mut carry: Option<(Vec<usize>, Tensor)> = None;
        let mut next = self.heads.len();
        for b in (0..self.blocks.len()).rev() {
            if next > 0 && self.arch.exit_after[next - 1] == b + 1 {
                next -= 1;
                if let Some(g) = &exit_grads[next] {
                    let items = nonzero_items(g);
                    if !items.is_empty() {
                        let mut g = restrict(&mut self.heads[next], g, &items);
                        for layer in self.heads[next].iter_mut().rev() {
                            g = layer.backward(&g)?;
                        }
                        carry = Some(match carry.take() {
                            None => (items, g),
                            Some((prev, mut acc)) if prev == items => {
                                acc.add_assign(&g)?;
                                (prev, acc)
                            }
                            Some((prev, acc)) => merge((&prev, &acc), (&items, &g)),
                        });
                    }
                }
            }
            if let Some((items, g)) = carry.take() {
                let mut g = restrict(&mut self.blocks[b], &g, &items);
                for layer in self.blocks[b].iter_mut().rev() {
                    g = layer.backward(&g)?;
                }
                carry = Some((items, g));
            }
        }
        Ok(())
    }

    /// Smallest `|z|` over every relu input for this batch.
    pub(crate) fn relu_margin(&self, x: &Tensor) -> Result<f64> {
        fn scan(layers: &[Layer], h: &mut Tensor, margin: &mut f64) -> Result<()> {
            for layer in layers {
                if matches!(layer, Layer::Relu { .. }) {
                    *margin = h.data().iter().fold(*margin, |m, v| m.min(v.abs()));
                }
                *h = layer.infer(h)?;
            }
            Ok(())
        }
        self.check_input(x)?;
        let mut margin = f64::INFINITY;
        let mut h = x.clone();
        let mut next = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            scan(block, &mut h, &mut margin)?;
            if next < self.heads.len() && self.arch.exit_after[next] == b + 1 {
                scan(&self.heads[next], &mut h.clone(), &mut margin)?;
                next += 1;
            }
        }
        Ok(margin)
    }

    fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.blocks.iter().chain(&self.heads).flatten()
    }

    fn layers_mut(&mut self) -> impl Iterator<Item = &mut Layer> {
        self.blocks.iter_mut().chain(self.heads.iter_mut()).flatten()
    }

    pub fn params(&self) -> impl Iterator<Item = &LayerParams> {
        self.layers().filter_map(Layer::params)
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut LayerParams> {
        self.layers_mut().filter_map(Layer::params_mut)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().for_each(LayerParams::zero_grad);
    }

    pub fn clear_caches(&mut self) {
        self.layers_mut().for_each(Layer::clear_cache);
    }

    pub fn param_count(&self) -> usize {
        self.params().map(LayerParams::param_count).sum()
    }

    /// `(name, weights, bias)` for every parameterized layer in declaration order.
    pub fn named_params(&self) -> Vec<(String, &LayerParams)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let convs = block.iter().filter_map(Layer::params);
            for (i, p) in convs.enumerate() {
                out.push((format!("block{}.conv{}", b + 1, i + 1), p));
            }
        }
        for (k, head) in self.heads.iter().enumerate() {
            let n = head.iter().filter(|l| l.params().is_some()).count();
            for (i, p) in head.iter().filter_map(Layer::params).enumerate() {
                let name = if i + 1 == n {
                    format!("head{}.dense", k + 1)
                } else {
                    format!("head{}.conv{}", k + 1, i + 1)
                };
                out.push((name, p));
            }
        }
        out
    }

    /// Writes the `ELFC` checkpoint: magic, version, architecture descriptor
    /// (classes, input C/H/W, block count, widths, exit count, exit blocks as
    /// u32, seed as u64), then weights and bias of every layer as `ELFT`
    /// tensors in declaration order.
    pub fn write_checkpoint<W: Write>(&self, out: &mut W) -> Result<()> {
        let a = &self.arch;
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        codec::put_u32(&mut buf, VERSION);
        codec::put_u32(&mut buf, codec::to_u32(a.classes, "classes")?);
        for &d in &a.input_dims {
            codec::put_u32(&mut buf, codec::to_u32(d, "input dim")?);
        }
        codec::put_u32(&mut buf, codec::to_u32(a.widths.len(), "blocks")?);
        for &w in &a.widths {
            codec::put_u32(&mut buf, codec::to_u32(w, "width")?);
        }
        codec::put_u32(&mut buf, codec::to_u32(a.exit_after.len(), "exits")?);
        for &e in &a.exit_after {
            codec::put_u32(&mut buf, codec::to_u32(e, "exit block")?);
        }
        codec::put_u64(&mut buf, a.seed);
        for (_, p) in self.named_params() {
            p.weights.encode(&mut buf)?;
            p.bias.encode(&mut buf)?;
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self> {
        let mut r = OffsetReader::new(input);
        r.magic(MAGIC)?;
        r.version(VERSION)?;
        let classes = r.u32("classes")? as usize;
        let mut input_dims = [0; 3];
        for d in input_dims.iter_mut() {
            *d = r.u32("input dim")? as usize;
        }
        let at = r.offset();
        let blocks = r.u32("block count")? as usize;
        if blocks > 1 << 16 {
            return Err(Error::format(at, format!("implausible block count {blocks}")));
        }
        let widths = (0..blocks)
            .map(|_| r.u32("width").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let at = r.offset();
        let exits = r.u32("exit count")? as usize;
        if exits > blocks {
            return Err(Error::format(at, format!("{exits} exits for {blocks} blocks")));
        }
        let exit_after = (0..exits)
            .map(|_| r.u32("exit block").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let seed = r.u64("seed")?;
        let arch = Architecture {
            classes,
            input_dims,
            widths,
            exit_after,
            seed,
        };
        let mut net = Self::from_architecture(arch).map_err(|e| match e {
            Error::Config(msg) => Error::format(at, format!("bad architecture: {msg}")),
            other => other,
        })?;
        net.read_params(&mut r)?;
        r.expect_eof()?;
        Ok(net)
    }

    /// Overwrites this network's parameters from a checkpoint, failing if its
    /// architecture or any tensor shape differs.
    pub fn load_params(&mut self, path: &Path) -> Result<()> {
        let other = load_checkpoint(path)?;
        for ((name, mine), (_, theirs)) in self.named_params().iter().zip(other.named_params()) {
            for (what, a, b) in [
                ("weights", &mine.weights, &theirs.weights),
                ("bias", &mine.bias, &theirs.bias),
            ] {
                if a.shape() != b.shape() {
                    return Err(Error::config(format!(
                        "checkpoint tensor {name}.{what} has shape {:?}, this network expects {:?}",
                        b.shape(),
                        a.shape()
                    )));
                }
            }
        }
        if self.arch != other.arch {
            return Err(Error::config(format!(
                "checkpoint architecture {:?} differs from {:?}",
                other.arch, self.arch
            )));
        }
        *self = other;
        Ok(())
    }

    fn read_params<R: Read>(&mut self, r: &mut OffsetReader<R>) -> Result<()> {
        let names: Vec<String> = self.named_params().into_iter().map(|(n, _)| n).collect();
        let params: Vec<&mut LayerParams> = self.params_mut().collect();
        for (name, p) in names.iter().zip(params) {
            for (what, slot) in [("weights", &mut p.weights), ("bias", &mut p.bias)] {
                let at = r.offset();
                let t = Tensor::decode(r)?;
                if t.shape() != slot.shape() {
                    return Err(Error::format(
                        at,
                        format!(
                            "tensor {name}.{what}: expected shape {:?}, found {:?}",
                            slot.shape(),
                            t.shape()
                        ),
                    ));
                }
                *slot = t;
            }
        }
        Ok(())
    }
}

fn nonzero_items(g: &Tensor) -> Vec<usize> {
    (0..g.batch()).filter(|&b| g.item(b).iter().any(|&v| v != 0.0)).collect()
}

/// Narrows the layer caches to `items` and returns the matching gradient
/// rows. `g` holds either the whole cached batch or exactly `items`.
fn restrict(layers: &mut [Layer], g: &Tensor, items: &[usize]) -> Tensor {
    let whole = items.len() == items.last().map_or(0, |&i| i + 1) && cached_batch(layers) == Some(items.len());
    if whole {
        return g.clone();
    }
    for layer in layers.iter_mut() {
        layer.restrict_cache(items);
    }
    if g.batch() == items.len() {
        g.clone()
    } else {
        g.select(items)
    }
}

fn cached_batch(layers: &[Layer]) -> Option<usize> {
    layers.first().and_then(Layer::cached_batch)
}

/// Sum of two sparse gradients over the union of their items.
fn merge(a: (&[usize], &Tensor), b: (&[usize], &Tensor)) -> (Vec<usize>, Tensor) {
    let mut items: Vec<usize> = a.0.iter().chain(b.0).copied().collect();
    items.sort_unstable();
    items.dedup();
    let mut shape = a.1.shape().to_vec();
    shape[0] = items.len();
    let mut out = Tensor::zeros(&shape);
    let n = a.1.item_len();
    for (src, tensor) in [a, b] {
        for (row, item) in src.iter().enumerate() {
            let at = items.binary_search(item).unwrap();
            let dst = &mut out.data_mut()[at * n..(at + 1) * n];
            dst.iter_mut().zip(tensor.item(row)).for_each(|(d, v)| *d += v);
        }
    }
    (items, out)
}

fn run(layers: &[Layer], x: &Tensor) -> Result<Tensor> {
    let mut h = x.clone();
    for layer in layers {
        h = layer.infer(&h)?;
    }
    Ok(h)
}

pub fn save_checkpoint(net: &MultiExitNetwork, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    net.write_checkpoint(&mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MultiExitNetwork> {
    MultiExitNetwork::read_checkpoint(BufReader::new(File::open(path)?))
}
