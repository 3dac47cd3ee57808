use std::collections::{HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    LayerDef, NetworkDef, NetworkGraph, Phase, Producer, Trace, TraceBuilder, WorkloadError,
};
use crate::dram::AccessOp;
use crate::mgx::{Counter, VnGenerator, VnSource};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RnnMode {
    Inference,
    Training,
}

struct Layout {
    inputs: Vec<u32>,
    outputs: Vec<u32>,
    weights: HashMap<String, u32>,
}

impl Layout {
    fn dense(b: &mut TraceBuilder, g: &NetworkGraph) -> Self {
        let inputs = g
            .inputs
            .iter()
            .map(|i| b.object(&i.name, i.elems()))
            .collect();
        let mut weights = HashMap::new();
        for l in g.layers.iter().filter(|l| l.weight_bytes > 0) {
            if !weights.contains_key(&l.weight_key) {
                let id = b.object(format!("weights:{}", l.weight_key), l.weight_bytes);
                weights.insert(l.weight_key.clone(), id);
            }
        }
        let outputs = g
            .layers
            .iter()
            .map(|l| b.object(&l.name, l.out_elems()))
            .collect();
        Layout {
            inputs,
            outputs,
            weights,
        }
    }

    fn feature(&self, p: Producer) -> u32 {
        match p {
            Producer::Input(i) => self.inputs[i],
            Producer::Layer(l) => self.outputs[l],
        }
    }

    /// Weight objects in a stable order.
    fn weight_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.weights.values().copied().collect();
        ids.sort_unstable();
        ids
    }
}

fn feature(vid: u8) -> VnSource {
    VnSource::Feature(vid)
}

fn load_model(b: &mut TraceBuilder, lay: &Layout) {
    let g = b.group("model:load", 0, Phase::Host);
    b.advance(Counter::Model, g);
    for w in lay.weight_ids() {
        b.write(w, VnSource::Weights, g);
    }
}

fn load_inputs(b: &mut TraceBuilder, g: &NetworkGraph, lay: &Layout, label: &str) {
    let grp = b.group(label, 0, Phase::Host);
    b.advance(Counter::Input, grp);
    for (i, input) in g.inputs.iter().enumerate() {
        b.write(lay.inputs[i], feature(input.vid), grp);
    }
}

fn forward(b: &mut TraceBuilder, g: &NetworkGraph, lay: &Layout, prefix: &str) {
    for (idx, l) in g.layers.iter().enumerate() {
        let grp = b.group(format!("{prefix}:{}", l.name), l.mac_ops, Phase::Measured);
        if let Some(&w) = lay.weights.get(&l.weight_key) {
            b.read(w, VnSource::Weights, grp);
        }
        for p in l.producers() {
            b.read(lay.feature(p), feature(g.producer_vid(p)), grp);
        }
        let out = lay.outputs[idx];
        for j in 0..l.partial_writes {
            let vid = l.first_vid + j as u8;
            if j > 0 {
                b.read(out, feature(vid - 1), grp);
            }
            b.write(out, feature(vid), grp);
        }
    }
}

/// Inference: per input, bump the input counter and run every layer once.
pub fn cnn_inference(g: &NetworkGraph, inputs: u32, k: u64) -> Result<Trace, WorkloadError> {
    let mut b = TraceBuilder::new(format!("{}:inference", g.name), VnGenerator::Dnn, k)?;
    let lay = Layout::dense(&mut b, g);
    if inputs == 0 {
        return Ok(b.finish());
    }
    load_model(&mut b, &lay);
    for n in 0..inputs {
        load_inputs(&mut b, g, &lay, &format!("in{n}:load"));
        forward(&mut b, g, &lay, &format!("in{n}"));
    }
    Ok(b.finish())
}

/// Training: forward pass, per-output losses, then back-propagation in
/// reverse layer order. Each gradient edge has its own object and shares the
/// version number of the matching feature edge. Every weight object is
/// rewritten once per iteration under the next model version.
pub fn cnn_training(g: &NetworkGraph, iterations: u32, k: u64) -> Result<Trace, WorkloadError> {
    let mut b = TraceBuilder::new(format!("{}:training", g.name), VnGenerator::Dnn, k)?;
    let lay = Layout::dense(&mut b, g);
    let n = g.layers.len();

    // A layer back-propagates when a loss reaches it.
    let outputs: HashSet<usize> = g.outputs.iter().copied().collect();
    let mut live = vec![false; n];
    for l in (0..n).rev() {
        live[l] = outputs.contains(&l) || g.consumers(l).iter().any(|&c| live[c]);
    }
    let mut loss_grad = HashMap::new();
    for &o in &g.outputs {
        let id = b.object(
            format!("grad:{}:loss", g.layers[o].name),
            g.layers[o].out_elems(),
        );
        loss_grad.insert(o, id);
    }
    let mut edge_grad: HashMap<(usize, usize), u32> = HashMap::new();
    for (c, l) in g.layers.iter().enumerate().filter(|(c, _)| live[*c]) {
        for p in l.producers() {
            if let Producer::Layer(p) = p {
                edge_grad.entry((p, c)).or_insert_with(|| {
                    let size = g.layers[p].out_elems();
                    b.object(format!("grad:{}:{}", g.layers[p].name, l.name), size)
                });
            }
        }
    }
    // The final backward use of each weight object publishes its update.
    let mut last_use: HashMap<&str, usize> = HashMap::new();
    for l in (0..n).filter(|&l| live[l]) {
        last_use.entry(&g.layers[l].weight_key).or_insert(l);
    }

    if iterations == 0 {
        return Ok(b.finish());
    }
    load_model(&mut b, &lay);
    for it in 0..iterations {
        let prefix = format!("it{it}");
        load_inputs(&mut b, g, &lay, &format!("{prefix}:load"));
        forward(&mut b, g, &lay, &format!("{prefix}:fwd"));

        let loss_work = g.outputs.iter().map(|&o| g.layers[o].out_elems()).sum();
        let grp = b.group(format!("{prefix}:loss"), loss_work, Phase::Measured);
        for &o in &g.outputs {
            let vid = g.layers[o].vid();
            b.read(lay.outputs[o], feature(vid), grp);
            b.write(loss_grad[&o], feature(vid), grp);
        }

        let mut written = HashSet::new();
        let mut last_grp = grp;
        for l in (0..n).rev().filter(|&l| live[l]) {
            let layer = &g.layers[l];
            let has_w = lay.weights.contains_key(&layer.weight_key);
            let work = if has_w {
                2 * layer.mac_ops
            } else {
                layer.mac_ops
            };
            let grp = b.group(
                format!("{prefix}:bwd:{}", layer.name),
                work,
                Phase::Measured,
            );
            last_grp = grp;
            let vid = layer.vid();
            if let Some(&lg) = loss_grad.get(&l) {
                b.read(lg, feature(vid), grp);
            }
            for c in g.consumers(l).into_iter().filter(|&c| live[c]) {
                b.read(edge_grad[&(l, c)], feature(vid), grp);
            }
            if let Some(&w) = lay.weights.get(&layer.weight_key) {
                b.read(w, VnSource::Weights, grp);
            }
            let mut seen = HashSet::new();
            for p in layer.producers().filter(|p| seen.insert(*p)) {
                b.read(lay.feature(p), feature(g.producer_vid(p)), grp);
            }
            for p in layer.producers().filter(|p| seen.remove(p)) {
                if let Producer::Layer(p) = p {
                    b.write(edge_grad[&(p, l)], feature(g.layers[p].vid()), grp);
                }
            }
            if has_w && last_use.get(layer.weight_key.as_str()) == Some(&l) {
                let w = lay.weights[&layer.weight_key];
                b.write(w, VnSource::WeightsNext, grp);
                written.insert(w);
            }
        }
        let unreached: Vec<u32> = lay
            .weight_ids()
            .into_iter()
            .filter(|w| !written.contains(w))
            .collect();
        if !unreached.is_empty() {
            last_grp = b.group(format!("{prefix}:update"), 0, Phase::Measured);
            for w in unreached {
                b.write(w, VnSource::WeightsNext, last_grp);
            }
        }
        b.advance(Counter::Model, last_grp);
    }
    Ok(b.finish())
}

/// Unrolls a recurrent cell and runs it as a feed-forward network. `count`
/// is the number of inputs (inference) or iterations (training).
pub fn rnn(
    cell: &NetworkDef,
    timesteps: u32,
    mode: RnnMode,
    count: u32,
    k: u64,
) -> Result<Trace, WorkloadError> {
    let graph = NetworkGraph::from_def(&cell.unroll(timesteps)?)?;
    match mode {
        RnnMode::Inference => cnn_inference(&graph, count, k),
        RnnMode::Training => cnn_training(&graph, count, k),
    }
}

/// Per-channel compressed-sparse-row layout of one feature edge. Each
/// channel owns a chunk-aligned slot sized for the dense worst case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CsrShape {
    pub channels: u64,
    pub rows: u64,
    pub cols: u64,
}

impl CsrShape {
    pub fn from_dims(dims: &[u64]) -> Self {
        match *dims {
            [n] => CsrShape {
                channels: 1,
                rows: 1,
                cols: n,
            },
            [c, n] => CsrShape {
                channels: c,
                rows: 1,
                cols: n,
            },
            [c, h, ref rest @ ..] => CsrShape {
                channels: c,
                rows: h,
                cols: rest.iter().product(),
            },
            [] => CsrShape {
                channels: 1,
                rows: 1,
                cols: 1,
            },
        }
    }

    pub fn per_channel(&self) -> u64 {
        self.rows * self.cols
    }

    pub fn value_bytes(nnz: u64) -> u64 {
        nnz
    }

    pub fn col_bytes(nnz: u64) -> u64 {
        2 * nnz
    }

    pub fn row_ptr_bytes(&self) -> u64 {
        4 * (self.rows + 1)
    }
}

struct CsrObjects {
    shape: CsrShape,
    v: u32,
    r: u32,
    c: u32,
    v_stride: u64,
    r_stride: u64,
    c_stride: u64,
}

impl CsrObjects {
    fn new(b: &mut TraceBuilder, name: &str, dims: &[u64]) -> Self {
        let k = b.k();
        let shape = CsrShape::from_dims(dims);
        let up = |x: u64| x.div_ceil(k) * k;
        let v_stride = up(shape.per_channel());
        let r_stride = up(shape.row_ptr_bytes());
        let c_stride = up(CsrShape::col_bytes(shape.per_channel()));
        CsrObjects {
            v: b.object(format!("{name}:v"), shape.channels * v_stride),
            r: b.object(format!("{name}:r"), shape.channels * r_stride),
            c: b.object(format!("{name}:c"), shape.channels * c_stride),
            shape,
            v_stride,
            r_stride,
            c_stride,
        }
    }

    fn emit(&self, b: &mut TraceBuilder, op: AccessOp, nnz: &[u64], src: VnSource, grp: u32) {
        for (j, &n) in nnz.iter().enumerate() {
            let j = j as u64;
            b.access(
                op,
                self.r,
                src,
                j * self.r_stride,
                self.shape.row_ptr_bytes(),
                grp,
            );
            if n > 0 {
                b.access(
                    op,
                    self.v,
                    src,
                    j * self.v_stride,
                    CsrShape::value_bytes(n),
                    grp,
                );
                b.access(
                    op,
                    self.c,
                    src,
                    j * self.c_stride,
                    CsrShape::col_bytes(n),
                    grp,
                );
            }
        }
    }

    /// Nonzeros per channel, one Bernoulli draw per element.
    fn sample(&self, rng: &mut ChaCha8Rng, sparsity: f64) -> Vec<u64> {
        (0..self.shape.channels)
            .map(|_| {
                (0..self.shape.per_channel())
                    .filter(|_| !rng.random_bool(sparsity))
                    .count() as u64
            })
            .collect()
    }
}

/// Dynamic pixel-level pruning over a chain network: every feature edge is
/// stored in CSR form and only its nonzeros are written and read back.
pub fn pruned(
    g: &NetworkGraph,
    inputs: u32,
    sparsity: f64,
    seed: u64,
    k: u64,
) -> Result<Trace, WorkloadError> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(WorkloadError::Config(format!(
            "sparsity {sparsity} outside [0, 1]"
        )));
    }
    if !g.is_chain() {
        return Err(WorkloadError::Config(format!(
            "`{}` is not a chain network",
            g.name
        )));
    }
    let mut b = TraceBuilder::new(format!("{}:pruned", g.name), VnGenerator::Dnn, k)?;
    let mut weights = HashMap::new();
    for l in g.layers.iter().filter(|l| l.weight_bytes > 0) {
        if !weights.contains_key(&l.weight_key) {
            let id = b.object(format!("weights:{}", l.weight_key), l.weight_bytes);
            weights.insert(l.weight_key.clone(), id);
        }
    }
    let mut edges = vec![CsrObjects::new(
        &mut b,
        &g.inputs[0].name,
        &g.inputs[0].dims,
    )];
    for l in &g.layers {
        edges.push(CsrObjects::new(&mut b, &l.name, &l.out_dims));
    }
    if inputs == 0 {
        return Ok(b.finish());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grp = b.group("model:load", 0, Phase::Host);
    b.advance(Counter::Model, grp);
    let mut ids: Vec<u32> = weights.values().copied().collect();
    ids.sort_unstable();
    for w in ids {
        b.write(w, VnSource::Weights, grp);
    }
    for n in 0..inputs {
        let grp = b.group(format!("in{n}:load"), 0, Phase::Host);
        b.advance(Counter::Input, grp);
        let mut nnz = edges[0].sample(&mut rng, sparsity);
        let mut vid = g.inputs[0].vid;
        edges[0].emit(&mut b, AccessOp::Write, &nnz, feature(vid), grp);
        for (i, l) in g.layers.iter().enumerate() {
            let grp = b.group(format!("in{n}:{}", l.name), l.mac_ops, Phase::Measured);
            if let Some(&w) = weights.get(&l.weight_key) {
                b.read(w, VnSource::Weights, grp);
            }
            edges[i].emit(&mut b, AccessOp::Read, &nnz, feature(vid), grp);
            nnz = edges[i + 1].sample(&mut rng, sparsity);
            vid = l.vid();
            if l.partial_writes != 1 {
                return Err(WorkloadError::Config(format!(
                    "`{}`: pruned layers write once",
                    l.name
                )));
            }
            edges[i + 1].emit(&mut b, AccessOp::Write, &nnz, feature(vid), grp);
        }
    }
    Ok(b.finish())
}

/// A single pruned layer fed by a sparse input.
pub fn pruned_layer(
    layer: &LayerDef,
    sparsity: f64,
    seed: u64,
    k: u64,
) -> Result<Trace, WorkloadError> {
    let def = NetworkDef {
        name: layer.name.clone(),
        inputs: Vec::new(),
        outputs: Vec::new(),
        state: None,
        layers: vec![LayerDef {
            input_from: None,
            bypass_from: Vec::new(),
            ..layer.clone()
        }],
    };
    pruned(&NetworkGraph::from_def(&def)?, 1, sparsity, seed, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workloads::TraceEvent;

    fn three_layer() -> NetworkGraph {
        let text = r#"
            name = "three"
            [[layers]]
            name = "a"
            type = "fc"
            in_dims = [64]
            out_dims = [64]
            weight_bytes = 4096
            [[layers]]
            name = "b"
            type = "fc"
            in_dims = [64]
            out_dims = [64]
            weight_bytes = 4096
            [[layers]]
            name = "c"
            type = "fc"
            in_dims = [64]
            out_dims = [16]
            weight_bytes = 1024
        "#;
        NetworkGraph::from_def(&NetworkDef::from_toml(text).unwrap()).unwrap()
    }

    fn feature_ops(t: &Trace, op: AccessOp) -> Vec<(String, u8)> {
        t.accesses()
            .filter(|a| a.0 == op && t.groups[a.5 as usize].phase == Phase::Measured)
            .filter_map(|a| match a.2 {
                VnSource::Feature(v) => Some((t.objects[a.1 as usize].name.clone(), v)),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn plain_inference_schedule() {
        let t = cnn_inference(&three_layer(), 1, 1024).unwrap();
        assert_eq!(
            feature_ops(&t, AccessOp::Write),
            [("a".into(), 2), ("b".into(), 3), ("c".into(), 4)]
        );
        assert_eq!(
            feature_ops(&t, AccessOp::Read),
            [("input".into(), 1), ("a".into(), 2), ("b".into(), 3)]
        );
    }

    #[test]
    fn zero_inputs_is_empty() {
        assert!(cnn_inference(&three_layer(), 0, 1024)
            .unwrap()
            .events
            .is_empty());
    }

    #[test]
    fn bypass_edge_read_twice_with_same_vn() {
        let t = cnn_inference(&NetworkGraph::preset("tiny").unwrap(), 1, 1024).unwrap();
        let reads: Vec<_> = feature_ops(&t, AccessOp::Read)
            .into_iter()
            .filter(|r| r.0 == "conv1")
            .collect();
        assert_eq!(reads, [("conv1".into(), 2), ("conv1".into(), 2)]);
    }

    #[test]
    fn one_layer_training_gradient_shares_feature_vn() {
        let text = r#"
            name = "one"
            [[layers]]
            name = "fc"
            type = "fc"
            in_dims = [64]
            out_dims = [16]
            weight_bytes = 1024
        "#;
        let g = NetworkGraph::from_def(&NetworkDef::from_toml(text).unwrap()).unwrap();
        let t = cnn_training(&g, 1, 1024).unwrap();
        let writes = feature_ops(&t, AccessOp::Write);
        assert_eq!(writes, [("fc".into(), 2), ("grad:fc:loss".into(), 2)]);
    }

    #[test]
    fn weights_written_once_per_iteration() {
        for g in [three_layer(), NetworkGraph::preset("tiny").unwrap()] {
            let t = cnn_training(&g, 3, 1024).unwrap();
            let mut counts: HashMap<u32, u32> = HashMap::new();
            for a in t
                .accesses()
                .filter(|a| a.0 == AccessOp::Write && a.2 == VnSource::WeightsNext)
            {
                *counts.entry(a.1).or_default() += 1;
            }
            let weights = t
                .objects
                .iter()
                .filter(|o| o.name.starts_with("weights:"))
                .count();
            assert_eq!(counts.len(), weights);
            assert!(counts.values().all(|&c| c == 3));
        }
    }

    #[test]
    fn rnn_unrolled_writes_scale_with_timesteps() {
        let cell = NetworkDef::preset("rnn_cell").unwrap();
        let one = rnn(&cell, 1, RnnMode::Inference, 1, 1024).unwrap();
        let three = rnn(&cell, 3, RnnMode::Inference, 1, 1024).unwrap();
        let w1 = feature_ops(&one, AccessOp::Write);
        let w3 = feature_ops(&three, AccessOp::Write);
        assert_eq!(w3.len(), 3 * w1.len());
        let vids: HashSet<u8> = w3.iter().map(|w| w.1).collect();
        assert_eq!(vids.len(), w3.len());
    }

    #[test]
    fn rnn_training_reaches_both_steps() {
        let cell = NetworkDef::preset("rnn_cell").unwrap();
        let t = rnn(&cell, 2, RnnMode::Training, 1, 1024).unwrap();
        let bwd: Vec<&str> = t
            .groups
            .iter()
            .filter_map(|g| g.label.strip_prefix("it0:bwd:"))
            .collect();
        for name in [
            "ih@0", "hh@0", "hidden@0", "out@0", "ih@1", "hh@1", "hidden@1", "out@1",
        ] {
            assert!(bwd.contains(&name), "{name}");
        }
        // The state gradient flows from step 1 back into step 0.
        assert!(t.objects.iter().any(|o| o.name == "grad:hidden@0:hh@1"));
    }

    #[test]
    fn pruned_extremes() {
        let g = NetworkGraph::preset("lenet").unwrap();
        let dense = pruned(&g, 1, 0.0, 7, 1024).unwrap();
        let empty = pruned(&g, 1, 1.0, 7, 1024).unwrap();
        let value_writes = |t: &Trace| {
            t.accesses()
                .filter(|a| a.0 == AccessOp::Write && t.objects[a.1 as usize].name.ends_with(":v"))
                .map(|a| a.4)
                .sum::<u64>()
        };
        let elems: u64 = g.inputs[0].elems() + g.layers.iter().map(|l| l.out_elems()).sum::<u64>();
        assert_eq!(value_writes(&dense), elems);
        assert_eq!(value_writes(&empty), 0);
        assert!(pruned(&NetworkGraph::preset("tiny").unwrap(), 1, 0.5, 1, 1024).is_err());
        assert!(pruned(&g, 1, 1.5, 1, 1024).is_err());
    }

    #[test]
    fn pruned_is_seed_deterministic() {
        let g = NetworkGraph::preset("lenet").unwrap();
        assert_eq!(
            pruned(&g, 2, 0.9, 3, 1024).unwrap(),
            pruned(&g, 2, 0.9, 3, 1024).unwrap()
        );
        assert_ne!(
            pruned(&g, 2, 0.9, 3, 1024).unwrap(),
            pruned(&g, 2, 0.9, 4, 1024).unwrap()
        );
    }

    #[test]
    fn pruned_single_layer() {
        let def = NetworkDef::preset("lenet").unwrap();
        let t = pruned_layer(&def.layers[0], 0.5, 1, 1024).unwrap();
        assert!(t.events.iter().any(|e| matches!(
            e,
            TraceEvent::Access {
                op: AccessOp::Write,
                ..
            }
        )));
    }
}
