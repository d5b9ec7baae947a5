//! Fused-network equivalence: embed N independent convolutional edge
//! networks into one network over the stacked channel space.
//!
//! Construction: layer 0 of the fused net sees the union of all source
//! modalities; each edge's kernel occupies the rows of that edge's output
//! block and the columns of its own sources, all other entries are zero.
//! Deeper layers are strictly block-diagonal because hidden features are
//! private to their edge. With zero-preserving elementwise nonlinearities
//! (ReLU) and masked inputs, every edge is recovered exactly — equality of
//! behaviour costs quadratically many (mostly zero) parameters.

use crate::error::{PhgError, Result};
use crate::tape::conv2d_plain;
use crate::tensor::Tensor;

/// One convolutional layer: kernel `[Co, Ci, kh, kw]`, bias `[Co]`,
/// symmetric zero padding, optional ReLU.
///
/// ReLU is the only nonlinearity offered on purpose: the fusion construction
/// needs f(0) = 0 so that a masked edge's hidden channels stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Vec<f32>,
    pub pad: usize,
    pub relu: bool,
}

impl ConvLayer {
    pub fn shape(&self) -> Result<(usize, usize, usize, usize)> {
        match self.kernel.dims()[..] {
            [co, ci, kh, kw] => Ok((co, ci, kh, kw)),
            ref d => Err(PhgError::Shape(format!("conv layer kernel has dims {d:?}"))),
        }
    }

    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (ci, h, w) = input.chw();
        let (co, kci, kh, kw) = self.shape()?;
        if kci != ci {
            return Err(PhgError::Shape(format!(
                "layer expects {kci} input channels, got {ci}"
            )));
        }
        if self.bias.len() != co {
            return Err(PhgError::Shape(format!(
                "layer bias has {} entries for {co} output channels",
                self.bias.len()
            )));
        }
        if h + 2 * self.pad < kh || w + 2 * self.pad < kw {
            return Err(PhgError::Shape(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * self.pad,
                w + 2 * self.pad
            )));
        }
        let oh = h + 2 * self.pad - kh + 1;
        let ow = w + 2 * self.pad - kw + 1;
        let mut out = conv2d_plain(
            input.data(),
            ci,
            h,
            w,
            self.kernel.data(),
            co,
            kh,
            kw,
            Some(&self.bias),
            self.pad,
        );
        if self.relu {
            for v in &mut out {
                *v = v.max(0.0);
            }
        }
        Tensor::new(vec![co, oh, ow], out)
    }
}

/// A standalone network for one hyper-edge: `sources -> target`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeNet {
    /// Source modalities as (name, channels), concatenated in this order.
    pub sources: Vec<(String, usize)>,
    pub target: String,
    pub layers: Vec<ConvLayer>,
}

impl EdgeNet {
    /// Validates the channel chain: layer 0 consumes the concatenated
    /// sources, each later layer consumes its predecessor's output.
    pub fn new(sources: Vec<(String, usize)>, target: String, layers: Vec<ConvLayer>) -> Result<Self> {
        if sources.is_empty() {
            return Err(PhgError::Config("edge net has no sources".into()));
        }
        if layers.is_empty() {
            return Err(PhgError::Config("edge net has no layers".into()));
        }
        for (i, (name, ch)) in sources.iter().enumerate() {
            if *ch == 0 {
                return Err(PhgError::Config(format!("source '{name}' has zero channels")));
            }
            if sources[..i].iter().any(|(n, _)| n == name) {
                return Err(PhgError::Config(format!("duplicate source '{name}'")));
            }
        }
        let mut expect: usize = sources.iter().map(|(_, c)| c).sum();
        for (li, layer) in layers.iter().enumerate() {
            let (co, ci, _, _) = layer.shape()?;
            if ci != expect {
                return Err(PhgError::Shape(format!(
                    "layer {li} expects {ci} input channels, chain provides {expect}"
                )));
            }
            if layer.bias.len() != co {
                return Err(PhgError::Shape(format!(
                    "layer {li}: bias length {} != {co} output channels",
                    layer.bias.len()
                )));
            }
            expect = co;
        }
        Ok(EdgeNet { sources, target, layers })
    }

    pub fn in_channels(&self) -> usize {
        self.sources.iter().map(|(_, c)| c).sum()
    }

    pub fn out_channels(&self) -> usize {
        self.layers.last().map(|l| l.kernel.dims()[0]).unwrap_or(0)
    }

    /// Forward over sources concatenated in declaration order.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (ci, _, _) = input.chw();
        if ci != self.in_channels() {
            return Err(PhgError::Shape(format!(
                "edge expects {} input channels, got {ci}",
                self.in_channels()
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }
}

/// Where one edge lives inside the fused network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSelector {
    /// Union-layout channel indices of this edge's sources, in the edge's
    /// own source order (layer-0 kernel column j maps to union column
    /// `source_channels[j]`).
    pub source_channels: Vec<usize>,
    /// Per layer: (row offset, row count) of this edge's output block.
    pub layer_rows: Vec<(usize, usize)>,
    pub target: String,
}

/// N edge networks embedded in one stacked network.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedNet {
    /// Union input layout as (modality, channels); first mention wins the
    /// position.
    pub modalities: Vec<(String, usize)>,
    pub layers: Vec<ConvLayer>,
    pub edges: Vec<EdgeSelector>,
}

/// Parameter accounting for a fusion. Counts kernel elements only — biases
/// stack linearly and carry no zero blocks, so they are excluded from the
/// quadratic-growth statement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionCost {
    pub params_separate: usize,
    pub params_fused: usize,
    /// 1 - params_separate / params_fused.
    pub zero_fraction: f64,
}

/// Offsets of each modality in the union layout, building it on the fly.
fn union_layout(edges: &[EdgeNet]) -> Result<Vec<(String, usize)>> {
    let mut layout: Vec<(String, usize)> = Vec::new();
    for e in edges {
        for (name, ch) in &e.sources {
            match layout.iter().find(|(n, _)| n == name) {
                None => layout.push((name.clone(), *ch)),
                Some((_, existing)) if existing != ch => {
                    return Err(PhgError::Config(format!(
                        "modality '{name}' declared with {existing} and {ch} channels"
                    )));
                }
                _ => {}
            }
        }
    }
    Ok(layout)
}

/// Embed the given edges into one fused network.
///
/// Constraints: at least one edge; all edges share layer count, and per
/// layer the kernel size, padding and ReLU flag (block placement needs a
/// single stacked kernel per layer). Shared source modalities are allowed
/// and occupy one copy of their columns in layer 0.
pub fn fuse_conv_edges(edges: &[EdgeNet]) -> Result<FusedNet> {
    if edges.is_empty() {
        return Err(PhgError::Config("fuse_conv_edges: no edges".into()));
    }
    let depth = edges[0].layers.len();
    for (i, e) in edges.iter().enumerate() {
        if e.layers.len() != depth {
            return Err(PhgError::Config(format!(
                "edge {i} has {} layers, edge 0 has {depth}",
                e.layers.len()
            )));
        }
        for (li, layer) in e.layers.iter().enumerate() {
            let (_, _, kh, kw) = layer.shape()?;
            let (_, _, kh0, kw0) = edges[0].layers[li].shape()?;
            if (kh, kw) != (kh0, kw0)
                || layer.pad != edges[0].layers[li].pad
                || layer.relu != edges[0].layers[li].relu
            {
                return Err(PhgError::Config(format!(
                    "edge {i} layer {li}: kernel size/pad/relu differs from edge 0"
                )));
            }
        }
    }

    let layout = union_layout(edges)?;
    let union_channels: usize = layout.iter().map(|(_, c)| c).sum();

    // Column index of each modality's first channel in the union layout.
    let col_of = |name: &str| -> usize {
        let mut off = 0;
        for (n, c) in &layout {
            if n == name {
                return off;
            }
            off += c;
        }
        unreachable!("modality known to be in layout")
    };

    let mut selectors: Vec<EdgeSelector> = edges
        .iter()
        .map(|e| {
            let mut cols = Vec::with_capacity(e.in_channels());
            for (name, ch) in &e.sources {
                let base = col_of(name);
                cols.extend(base..base + ch);
            }
            EdgeSelector { source_channels: cols, layer_rows: Vec::new(), target: e.target.clone() }
        })
        .collect();

    let mut fused_layers = Vec::with_capacity(depth);
    // Column offsets for layers >= 1: each edge's private hidden block.
    let mut prev_out: Vec<usize> = vec![0; edges.len()];
    for li in 0..depth {
        let (_, _, kh, kw) = edges[0].layers[li].shape()?;
        let pad = edges[0].layers[li].pad;
        let relu = edges[0].layers[li].relu;
        let ci_tot = if li == 0 { union_channels } else { prev_out.iter().sum() };
        let co_tot: usize = edges.iter().map(|e| e.layers[li].kernel.dims()[0]).sum();

        let mut kernel = Tensor::zeros(&[co_tot, ci_tot, kh, kw]);
        let mut bias = vec![0.0f32; co_tot];
        let mut row_off = 0usize;
        let mut hidden_col_off = 0usize;
        for (ei, e) in edges.iter().enumerate() {
            let (co, ci, _, _) = e.layers[li].shape()?;
            // Column mapping: union columns for layer 0, the edge's private
            // hidden block for deeper layers.
            let col_map: Vec<usize> = if li == 0 {
                selectors[ei].source_channels.clone()
            } else {
                (hidden_col_off..hidden_col_off + ci).collect()
            };
            debug_assert_eq!(col_map.len(), ci);
            let src = e.layers[li].kernel.data();
            for o in 0..co {
                for (j, &uc) in col_map.iter().enumerate() {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let v = src[((o * ci + j) * kh + ky) * kw + kx];
                            kernel.data_mut()
                                [(((row_off + o) * ci_tot + uc) * kh + ky) * kw + kx] = v;
                        }
                    }
                }
                bias[row_off + o] = e.layers[li].bias[o];
            }
            selectors[ei].layer_rows.push((row_off, co));
            row_off += co;
            if li >= 1 {
                hidden_col_off += ci;
            }
        }
        for (ei, e) in edges.iter().enumerate() {
            prev_out[ei] = e.layers[li].kernel.dims()[0];
        }
        fused_layers.push(ConvLayer { kernel, bias, pad, relu });
    }

    Ok(FusedNet { modalities: layout, layers: fused_layers, edges: selectors })
}

impl FusedNet {
    pub fn union_channels(&self) -> usize {
        self.modalities.iter().map(|(_, c)| c).sum()
    }

    /// Forward over the union-stacked input, producing the stacked outputs
    /// of all edges.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (ci, _, _) = input.chw();
        if ci != self.union_channels() {
            return Err(PhgError::Shape(format!(
                "fused net expects {} union channels, got {ci}",
                self.union_channels()
            )));
        }
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.forward(&x)?;
        }
        Ok(x)
    }
}

/// Run one edge of the fused network: channels outside the edge's source
/// set are zero-masked, the fused net runs, and the edge's output rows are
/// sliced out. Equals the standalone edge on the same sources (exactly when
/// source order matches the union layout; within f32 summation-order noise
/// otherwise).
pub fn recover_edge(fused: &FusedNet, edge: usize, union_input: &Tensor) -> Result<Tensor> {
    let sel = fused
        .edges
        .get(edge)
        .ok_or_else(|| PhgError::Config(format!("no edge {edge} in fused net")))?;
    let (ci, _, _) = union_input.chw();
    if ci != fused.union_channels() {
        return Err(PhgError::Shape(format!(
            "recover_edge expects {} union channels, got {ci}",
            fused.union_channels()
        )));
    }
    let mut masked = union_input.clone();
    for c in 0..ci {
        if !sel.source_channels.contains(&c) {
            masked.channel_mut(c).fill(0.0);
        }
    }
    let full = fused.forward(&masked)?;
    let (_, oh, ow) = full.chw();
    let (row0, rows) = *sel.layer_rows.last().expect("fused net has layers");
    let mut out = Tensor::zeros(&[rows, oh, ow]);
    for r in 0..rows {
        out.channel_mut(r).copy_from_slice(full.channel(row0 + r));
    }
    Ok(out)
}

/// Gather an edge's standalone input (its sources, edge order) from the
/// union-stacked input.
pub fn gather_edge_input(fused: &FusedNet, edge: usize, union_input: &Tensor) -> Result<Tensor> {
    let sel = fused
        .edges
        .get(edge)
        .ok_or_else(|| PhgError::Config(format!("no edge {edge} in fused net")))?;
    let (_, h, w) = union_input.chw();
    let mut out = Tensor::zeros(&[sel.source_channels.len(), h, w]);
    for (j, &uc) in sel.source_channels.iter().enumerate() {
        out.channel_mut(j).copy_from_slice(union_input.channel(uc));
    }
    Ok(out)
}

/// Kernel-parameter accounting for fusing the given edges.
pub fn fusion_cost(edges: &[EdgeNet]) -> Result<FusionCost> {
    let fused = fuse_conv_edges(edges)?;
    let count = |layers: &[ConvLayer]| -> usize {
        layers.iter().map(|l| l.kernel.len()).sum()
    };
    let params_separate: usize = edges.iter().map(|e| count(&e.layers)).sum();
    let params_fused = count(&fused.layers);
    Ok(FusionCost {
        params_separate,
        params_fused,
        zero_fraction: 1.0 - params_separate as f64 / params_fused as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn rand_layer(rng: &mut ChaCha8Rng, ci: usize, co: usize, k: usize, relu: bool) -> ConvLayer {
        ConvLayer {
            kernel: rng_tensor(rng, &[co, ci, k, k]),
            bias: (0..co).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            pad: k / 2,
            relu,
        }
    }

    /// Random multi-layer edge over the given sources.
    fn rand_edge(
        rng: &mut ChaCha8Rng,
        sources: Vec<(String, usize)>,
        target: &str,
        hidden: &[usize],
        k: usize,
    ) -> EdgeNet {
        let mut layers = Vec::new();
        let mut ci: usize = sources.iter().map(|(_, c)| c).sum();
        for (i, &co) in hidden.iter().enumerate() {
            let relu = i + 1 < hidden.len(); // final layer linear
            layers.push(rand_layer(rng, ci, co, k, relu));
            ci = co;
        }
        EdgeNet::new(sources, target.into(), layers).unwrap()
    }

    /// Union-stacked random input for a fused net.
    fn union_input(rng: &mut ChaCha8Rng, fused: &FusedNet, h: usize, w: usize) -> Tensor {
        rng_tensor(rng, &[fused.union_channels(), h, w])
    }

    #[test]
    fn edge_net_validates_channel_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let l1 = rand_layer(&mut rng, 3, 4, 3, true);
        let l2_bad = rand_layer(&mut rng, 5, 2, 3, false);
        assert!(EdgeNet::new(
            vec![("a".into(), 3)],
            "out".into(),
            vec![l1.clone(), l2_bad]
        )
        .is_err());
        let l2_ok = rand_layer(&mut rng, 4, 2, 3, false);
        assert!(EdgeNet::new(vec![("a".into(), 3)], "out".into(), vec![l1, l2_ok]).is_ok());
        assert!(EdgeNet::new(vec![], "out".into(), vec![]).is_err());
        // Duplicate source names are rejected.
        let l = rand_layer(&mut rng, 2, 1, 1, false);
        assert!(EdgeNet::new(
            vec![("a".into(), 1), ("a".into(), 1)],
            "out".into(),
            vec![l]
        )
        .is_err());
    }

    #[test]
    fn two_layer_edges_recover_exactly() {
        // Two 2-layer edges over distinct modalities: 2 -> 4 -> 2 and
        // 3 -> 5 -> 2 channels.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let e0 = rand_edge(&mut rng, vec![("i1".into(), 2)], "o1", &[4, 2], 3);
        let e1 = rand_edge(&mut rng, vec![("i2".into(), 3)], "o2", &[5, 2], 3);
        let fused = fuse_conv_edges(&[e0.clone(), e1.clone()]).unwrap();
        assert_eq!(fused.union_channels(), 5);
        assert_eq!(fused.layers[0].kernel.dims(), &[9, 5, 3, 3]);
        assert_eq!(fused.layers[1].kernel.dims(), &[4, 9, 3, 3]);

        let x = union_input(&mut rng, &fused, 6, 7);
        for (ei, edge) in [&e0, &e1].into_iter().enumerate() {
            let recovered = recover_edge(&fused, ei, &x).unwrap();
            let standalone = edge.forward(&gather_edge_input(&fused, ei, &x).unwrap()).unwrap();
            let diff = recovered.max_abs_diff(&standalone).unwrap();
            assert_eq!(diff, 0.0, "edge {ei}: fused and standalone paths diverge by {diff}");
        }
    }

    #[test]
    fn hyper_edge_sharing_a_modality_with_a_plain_edge() {
        // [i1, i2] -> o fused with [i1] -> o: one copy of i1's columns.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let hyper = rand_edge(&mut rng, vec![("i1".into(), 2), ("i2".into(), 2)], "o", &[3, 2], 3);
        let plain = rand_edge(&mut rng, vec![("i1".into(), 2)], "o", &[3, 2], 3);
        let fused = fuse_conv_edges(&[hyper.clone(), plain.clone()]).unwrap();
        assert_eq!(fused.union_channels(), 4, "shared modality occupies one column block");

        let x = union_input(&mut rng, &fused, 5, 5);
        for (ei, edge) in [&hyper, &plain].into_iter().enumerate() {
            let recovered = recover_edge(&fused, ei, &x).unwrap();
            let standalone = edge.forward(&gather_edge_input(&fused, ei, &x).unwrap()).unwrap();
            let diff = recovered.max_abs_diff(&standalone).unwrap();
            assert!(diff <= 1e-6, "edge {ei}: diverges by {diff}");
        }
    }

    #[test]
    fn random_fusions_recover_over_many_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let n_edges = rng.gen_range(2..5);
            let depth = rng.gen_range(1..4);
            let k = [1usize, 3][rng.gen_range(0..2)];
            let edges: Vec<EdgeNet> = (0..n_edges)
                .map(|i| {
                    let src_ch = rng.gen_range(1..4);
                    let hidden: Vec<usize> =
                        (0..depth).map(|_| rng.gen_range(1..5)).collect();
                    rand_edge(
                        &mut rng,
                        vec![(format!("m{i}"), src_ch)],
                        &format!("t{i}"),
                        &hidden,
                        k,
                    )
                })
                .collect();
            let fused = fuse_conv_edges(&edges).unwrap();
            let x = union_input(&mut rng, &fused, 4, 6);
            for (ei, edge) in edges.iter().enumerate() {
                let recovered = recover_edge(&fused, ei, &x).unwrap();
                let standalone =
                    edge.forward(&gather_edge_input(&fused, ei, &x).unwrap()).unwrap();
                let diff = recovered.max_abs_diff(&standalone).unwrap();
                assert!(diff <= 1e-6, "seed {seed} edge {ei}: diverges by {diff}");
            }
        }
    }

    #[test]
    fn fused_forward_stacks_all_edge_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let e0 = rand_edge(&mut rng, vec![("a".into(), 1)], "x", &[2], 3);
        let e1 = rand_edge(&mut rng, vec![("b".into(), 2)], "y", &[3], 3);
        let fused = fuse_conv_edges(&[e0, e1]).unwrap();
        let x = union_input(&mut rng, &fused, 4, 4);
        let full = fused.forward(&x).unwrap();
        assert_eq!(full.dims(), &[5, 4, 4]);
        // Row blocks line up with the selectors.
        assert_eq!(fused.edges[0].layer_rows, vec![(0, 2)]);
        assert_eq!(fused.edges[1].layer_rows, vec![(2, 3)]);
    }

    #[test]
    fn cross_edge_blocks_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let e0 = rand_edge(&mut rng, vec![("a".into(), 2)], "x", &[3, 2], 3);
        let e1 = rand_edge(&mut rng, vec![("b".into(), 1)], "y", &[2, 2], 3);
        let fused = fuse_conv_edges(&[e0, e1]).unwrap();

        // Layer 0: edge 0 owns rows 0..3 and columns 0..2; edge 1 rows 3..5,
        // column 2. Everything outside those blocks must be exactly zero.
        let k0 = &fused.layers[0].kernel;
        let [co, ci, kh, kw] = k0.dims()[..] else { panic!() };
        for o in 0..co {
            for c in 0..ci {
                let in_block = (o < 3 && c < 2) || (o >= 3 && c == 2);
                if in_block {
                    continue;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        assert_eq!(
                            k0.data()[((o * ci + c) * kh + ky) * kw + kx],
                            0.0,
                            "nonzero cross block at out {o}, in {c}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fusion_cost_homogeneous_edges_quadratic() {
        // N identical-shape edges over distinct modalities: fused kernel
        // count is N^2 per-edge count and zero_fraction = 1 - 1/N.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let base_cost = {
            let e = rand_edge(&mut rng, vec![("m0".into(), 2)], "t", &[3, 2], 3);
            e.layers.iter().map(|l| l.kernel.len()).sum::<usize>()
        };
        let mut fused_counts = Vec::new();
        for n in 1..=5usize {
            let edges: Vec<EdgeNet> = (0..n)
                .map(|i| rand_edge(&mut rng, vec![(format!("m{i}"), 2)], "t", &[3, 2], 3))
                .collect();
            let cost = fusion_cost(&edges).unwrap();
            assert_eq!(cost.params_separate, n * base_cost);
            assert_eq!(cost.params_fused, n * n * base_cost, "quadratic growth at N={n}");
            let want = 1.0 - 1.0 / n as f64;
            assert!(
                (cost.zero_fraction - want).abs() < 1e-12,
                "N={n}: zero fraction {} != {want}",
                cost.zero_fraction
            );
            fused_counts.push(cost.params_fused);
        }
        assert_eq!(fused_counts, vec![base_cost, 4 * base_cost, 9 * base_cost,
                                      16 * base_cost, 25 * base_cost]);
    }

    #[test]
    fn fusion_cost_unequal_edges_matches_hand_count() {
        // Edge A: 2 -> 3 (k=3), edge B: 1 -> 2 (k=3), single layer.
        // Separate: 3*2*9 + 2*1*9 = 54 + 18 = 72.
        // Fused: rows 5, cols 3 -> 5*3*9 = 135. zero_fraction = 1 - 72/135.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let a = rand_edge(&mut rng, vec![("a".into(), 2)], "x", &[3], 3);
        let b = rand_edge(&mut rng, vec![("b".into(), 1)], "y", &[2], 3);
        let cost = fusion_cost(&[a, b]).unwrap();
        assert_eq!(cost.params_separate, 72);
        assert_eq!(cost.params_fused, 135);
        assert!((cost.zero_fraction - (1.0 - 72.0 / 135.0)).abs() < 1e-12);
    }

    #[test]
    fn fuse_rejects_mismatched_structures() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        assert!(fuse_conv_edges(&[]).is_err());

        let one = rand_edge(&mut rng, vec![("a".into(), 1)], "x", &[2], 3);
        let two = rand_edge(&mut rng, vec![("b".into(), 1)], "y", &[2, 2], 3);
        assert!(fuse_conv_edges(&[one.clone(), two]).is_err(), "layer count mismatch");

        let k1 = rand_edge(&mut rng, vec![("b".into(), 1)], "y", &[2], 1);
        assert!(fuse_conv_edges(&[one.clone(), k1]).is_err(), "kernel size mismatch");

        // Same modality declared with conflicting widths.
        let c1 = rand_edge(&mut rng, vec![("a".into(), 2)], "y", &[2], 3);
        assert!(fuse_conv_edges(&[one, c1]).is_err(), "channel conflict");
    }

    #[test]
    fn masked_inputs_keep_cross_blocks_gradient_free() {
        // Train-ability of the zero structure: put the fused layer-0 kernel
        // on a tape, zero-mask edge 1's input columns, take a loss on edge
        // 0's output rows. Gradients on every cross-edge block (and on the
        // blocks reading the masked columns) must be identically zero.
        use crate::tape::Tape;

        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let e0 = rand_edge(&mut rng, vec![("a".into(), 2)], "x", &[2, 2], 3);
        let e1 = rand_edge(&mut rng, vec![("b".into(), 2)], "y", &[2, 2], 3);
        let mut fused = fuse_conv_edges(&[e0, e1]).unwrap();
        // Zero edge 1's layer-0 bias rows: with a nonzero bias a masked edge
        // still emits relu(bias) on its hidden rows, which would feed the
        // layer-1 cross block a constant activation. The recovery path never
        // cares (it only slices edge 0's rows), but the gradient claim below
        // needs those hidden channels to be exactly zero.
        for b in &mut fused.layers[0].bias[2..4] {
            *b = 0.0;
        }

        let mut x = union_input(&mut rng, &fused, 4, 4);
        for c in 2..4 {
            x.channel_mut(c).fill(0.0); // mask edge 1's sources
        }

        let mut tape = Tape::new();
        let xi = tape.constant(x);
        let k0 = tape.parameter(fused.layers[0].kernel.clone());
        let b0 = tape.parameter(Tensor::new(vec![4], fused.layers[0].bias.clone()).unwrap());
        let k1 = tape.parameter(fused.layers[1].kernel.clone());
        let b1 = tape.parameter(Tensor::new(vec![4], fused.layers[1].bias.clone()).unwrap());
        let h = tape.conv2d(xi, k0, Some(b0), 1).unwrap();
        let hr = tape.relu(h);
        let out = tape.conv2d(hr, k1, Some(b1), 1).unwrap();

        // Keep only edge 0's output rows (0..2) in the loss.
        let mut row_mask = Tensor::zeros(&[4, 4, 4]);
        for c in 0..2 {
            row_mask.channel_mut(c).fill(1.0);
        }
        let mi = tape.constant(row_mask);
        let masked_out = tape.mul(out, mi).unwrap();
        let target = Tensor::zeros(&[4, 4, 4]);
        let loss = tape.l2_loss(masked_out, &target).unwrap();
        let grads = tape.backward(loss).unwrap();

        // Layer 0 gradient: columns 2..4 (masked inputs) must be zero for
        // every output row.
        let gk0 = grads.get(k0).unwrap();
        for o in 0..4 {
            for c in 2..4 {
                for t in 0..9 {
                    let g = gk0[(o * 4 + c) * 9 + t];
                    assert_eq!(g, 0.0, "layer0 grad at out {o}, masked col {c} is {g}");
                }
            }
        }
        // Layer 1 gradient: the cross block (rows 0..2, cols 2..4) sees
        // zero hidden activations — zero inputs, zero bias, zero-preserving
        // ReLU — so its gradient vanishes identically.
        let gk1 = grads.get(k1).unwrap();
        for o in 0..2 {
            for c in 2..4 {
                for t in 0..9 {
                    let g = gk1[(o * 4 + c) * 9 + t];
                    assert_eq!(g, 0.0, "layer1 cross grad at out {o}, col {c} is {g}");
                }
            }
        }
    }
}
