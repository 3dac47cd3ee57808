use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::WorkloadError;
use crate::mgx::MAX_VID;

const PRESETS: &[(&str, &str)] = &[
    ("lenet", include_str!("../../presets/lenet.toml")),
    ("alexnet", include_str!("../../presets/alexnet.toml")),
    ("googlenet", include_str!("../../presets/googlenet.toml")),
    ("resnet50", include_str!("../../presets/resnet50.toml")),
    ("tiny", include_str!("../../presets/tiny.toml")),
    ("rnn_cell", include_str!("../../presets/rnn_cell.toml")),
];

/// Presets that describe feed-forward networks.
pub const DNN_PRESETS: &[&str] = &["lenet", "alexnet", "googlenet", "resnet50"];

pub fn preset_names() -> impl Iterator<Item = &'static str> {
    PRESETS.iter().map(|p| p.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Conv,
    Fc,
    Pool,
    Concat,
    Eltwise,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDef {
    pub name: String,
    pub dims: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDef {
    pub name: String,
    #[serde(rename = "type")]
    pub kind: LayerKind,
    pub in_dims: Vec<u64>,
    pub out_dims: Vec<u64>,
    #[serde(default)]
    pub weight_bytes: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub bypass_from: Vec<String>,
    /// Producers concatenated into the main input; defaults to the previous layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_from: Option<Vec<String>>,
    #[serde(default = "one", skip_serializing_if = "is_one")]
    pub partial_writes: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mac_ops: Option<u64>,
    /// Layers with the same key share one weight object.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_key: Option<String>,
}

fn one() -> u32 {
    1
}

fn is_one(v: &u32) -> bool {
    *v == 1
}

/// Network description as read from a config file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkDef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<InputDef>,
    /// Layers whose outputs carry a loss; defaults to layers nobody consumes.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outputs: Vec<String>,
    /// For recurrent cells: the layer fed back as the `state` input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<String>,
    pub layers: Vec<LayerDef>,
}

impl NetworkDef {
    pub fn from_toml(text: &str) -> Result<Self, WorkloadError> {
        toml::from_str(text).map_err(|e| WorkloadError::Parse(e.to_string()))
    }

    pub fn preset(name: &str) -> Result<Self, WorkloadError> {
        let (_, text) = PRESETS
            .iter()
            .find(|p| p.0 == name)
            .ok_or_else(|| WorkloadError::Config(format!("unknown preset `{name}`")))?;
        Self::from_toml(text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("network definitions serialize")
    }

    /// Unfolds a recurrent cell over `timesteps` steps into a feed-forward
    /// network. Weights are shared across steps; the initial state is an
    /// external input.
    pub fn unroll(&self, timesteps: u32) -> Result<NetworkDef, WorkloadError> {
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| WorkloadError::Config(format!("`{}` has no state layer", self.name)))?;
        if !self.layers.iter().any(|l| &l.name == state) {
            return Err(WorkloadError::Config(format!(
                "state layer `{state}` not defined"
            )));
        }
        let state_in = self
            .inputs
            .iter()
            .find(|i| i.name == "state")
            .ok_or_else(|| {
                WorkloadError::Config("recurrent cell needs an input named `state`".into())
            })?;
        if timesteps == 0 {
            return Err(WorkloadError::Config("timesteps must be positive".into()));
        }
        let layer_names: Vec<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
        let rename = |r: &str, t: u32| -> String {
            if r == "state" {
                if t == 0 {
                    "state@0".to_string()
                } else {
                    format!("{state}@{}", t - 1)
                }
            } else {
                format!("{r}@{t}")
            }
        };
        let mut inputs = vec![InputDef {
            name: "state@0".into(),
            dims: state_in.dims.clone(),
        }];
        let mut layers = Vec::new();
        for t in 0..timesteps {
            for i in self.inputs.iter().filter(|i| i.name != "state") {
                inputs.push(InputDef {
                    name: format!("{}@{t}", i.name),
                    dims: i.dims.clone(),
                });
            }
            for (idx, l) in self.layers.iter().enumerate() {
                let main = match &l.input_from {
                    Some(v) => v.clone(),
                    None if idx == 0 => vec![self.default_input()],
                    None => vec![layer_names[idx - 1].to_string()],
                };
                layers.push(LayerDef {
                    name: format!("{}@{t}", l.name),
                    input_from: Some(main.iter().map(|r| rename(r, t)).collect()),
                    bypass_from: l.bypass_from.iter().map(|r| rename(r, t)).collect(),
                    weight_key: Some(l.weight_key.clone().unwrap_or_else(|| l.name.clone())),
                    ..l.clone()
                });
            }
        }
        let cell_outputs = if self.outputs.is_empty() {
            vec![state.clone()]
        } else {
            self.outputs.clone()
        };
        let outputs = (0..timesteps)
            .flat_map(|t| cell_outputs.iter().map(move |o| format!("{o}@{t}")))
            .collect();
        Ok(NetworkDef {
            name: format!("{}x{timesteps}", self.name),
            inputs,
            outputs,
            state: None,
            layers,
        })
    }

    fn default_input(&self) -> String {
        self.inputs
            .first()
            .map_or_else(|| "input".to_string(), |i| i.name.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Producer {
    Input(usize),
    Layer(usize),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetInput {
    pub name: String,
    pub dims: Vec<u64>,
    pub vid: u8,
}

impl NetInput {
    pub fn elems(&self) -> u64 {
        self.dims.iter().product()
    }
}

/// A resolved layer: producers by index, vertex ids assigned.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_dims: Vec<u64>,
    pub out_dims: Vec<u64>,
    pub weight_bytes: u64,
    pub weight_key: String,
    pub inputs: Vec<Producer>,
    pub bypass: Vec<Producer>,
    pub first_vid: u8,
    pub partial_writes: u32,
    pub mac_ops: u64,
}

impl LayerSpec {
    pub fn in_elems(&self) -> u64 {
        self.in_dims.iter().product()
    }

    pub fn out_elems(&self) -> u64 {
        self.out_dims.iter().product()
    }

    /// The vertex id of the final write, which consumers read.
    pub fn vid(&self) -> u8 {
        self.first_vid + (self.partial_writes - 1) as u8
    }

    pub fn producers(&self) -> impl Iterator<Item = Producer> + '_ {
        self.inputs.iter().chain(self.bypass.iter()).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkGraph {
    pub name: String,
    pub inputs: Vec<NetInput>,
    pub layers: Vec<LayerSpec>,
    pub outputs: Vec<usize>,
}

impl NetworkGraph {
    pub fn preset(name: &str) -> Result<Self, WorkloadError> {
        Self::from_def(&NetworkDef::preset(name)?)
    }

    pub fn from_def(def: &NetworkDef) -> Result<Self, WorkloadError> {
        let cfg = |m: String| WorkloadError::Config(format!("{}: {m}", def.name));
        if def.layers.is_empty() {
            return Err(cfg("no layers".into()));
        }
        let input_defs = if def.inputs.is_empty() {
            vec![InputDef {
                name: "input".into(),
                dims: def.layers[0].in_dims.clone(),
            }]
        } else {
            def.inputs.clone()
        };
        let mut vid: u32 = 1;
        let mut names: HashMap<String, Producer> = HashMap::new();
        let mut inputs = Vec::new();
        for (i, d) in input_defs.iter().enumerate() {
            check_dims(&d.name, &d.dims).map_err(cfg)?;
            if vid > MAX_VID {
                return Err(WorkloadError::InvalidVid(vid));
            }
            if names.insert(d.name.clone(), Producer::Input(i)).is_some() {
                return Err(cfg(format!("duplicate name `{}`", d.name)));
            }
            inputs.push(NetInput {
                name: d.name.clone(),
                dims: d.dims.clone(),
                vid: vid as u8,
            });
            vid += 1;
        }
        let mut layers: Vec<LayerSpec> = Vec::new();
        let mut weight_sizes: HashMap<String, u64> = HashMap::new();
        for (idx, l) in def.layers.iter().enumerate() {
            check_dims(&l.name, &l.in_dims).map_err(cfg)?;
            check_dims(&l.name, &l.out_dims).map_err(cfg)?;
            if l.partial_writes == 0 {
                return Err(cfg(format!("`{}` has zero partial writes", l.name)));
            }
            let resolve = |r: &String| {
                names.get(r).copied().ok_or_else(|| {
                    cfg(format!(
                        "`{}` reads unknown or later producer `{r}`",
                        l.name
                    ))
                })
            };
            let main: Vec<Producer> = match &l.input_from {
                Some(v) => v.iter().map(resolve).collect::<Result<_, _>>()?,
                None if idx == 0 => vec![Producer::Input(0)],
                None => vec![Producer::Layer(idx - 1)],
            };
            let bypass: Vec<Producer> = l
                .bypass_from
                .iter()
                .map(resolve)
                .collect::<Result<_, _>>()?;
            let elems = |p: &Producer| match *p {
                Producer::Input(i) => inputs[i].elems(),
                Producer::Layer(j) => layers[j].out_elems(),
            };
            let in_elems: u64 = l.in_dims.iter().product();
            let out_elems: u64 = l.out_dims.iter().product();
            let fed: u64 = main.iter().map(elems).sum();
            if fed != in_elems {
                return Err(cfg(format!(
                    "`{}` expects {in_elems} input elements, producers supply {fed}",
                    l.name
                )));
            }
            if let Some(b) = bypass.iter().find(|b| elems(b) != out_elems) {
                return Err(cfg(format!(
                    "`{}` bypass input of {} elements does not match its output of {out_elems}",
                    l.name,
                    elems(b)
                )));
            }
            let weight_key = l.weight_key.clone().unwrap_or_else(|| l.name.clone());
            if let Some(&w) = weight_sizes.get(&weight_key) {
                if w != l.weight_bytes {
                    return Err(cfg(format!(
                        "weight key `{weight_key}` shared with different sizes"
                    )));
                }
            }
            weight_sizes.insert(weight_key.clone(), l.weight_bytes);
            let first_vid = vid;
            vid += l.partial_writes;
            if vid - 1 > MAX_VID {
                return Err(WorkloadError::InvalidVid(vid - 1));
            }
            let out_c = l.out_dims[0];
            let mac_ops = l
                .mac_ops
                .unwrap_or_else(|| (out_elems * l.weight_bytes / out_c).max(in_elems));
            if names.insert(l.name.clone(), Producer::Layer(idx)).is_some() {
                return Err(cfg(format!("duplicate name `{}`", l.name)));
            }
            layers.push(LayerSpec {
                name: l.name.clone(),
                kind: l.kind,
                in_dims: l.in_dims.clone(),
                out_dims: l.out_dims.clone(),
                weight_bytes: l.weight_bytes,
                weight_key,
                inputs: main,
                bypass,
                first_vid: first_vid as u8,
                partial_writes: l.partial_writes,
                mac_ops,
            });
        }
        let mut graph = NetworkGraph {
            name: def.name.clone(),
            inputs,
            layers,
            outputs: Vec::new(),
        };
        graph.outputs = if def.outputs.is_empty() {
            (0..graph.layers.len())
                .filter(|&l| graph.consumers(l).is_empty())
                .collect()
        } else {
            def.outputs
                .iter()
                .map(|o| match names.get(o) {
                    Some(Producer::Layer(l)) => Ok(*l),
                    _ => Err(cfg(format!("output `{o}` is not a layer"))),
                })
                .collect::<Result<_, _>>()?
        };
        Ok(graph)
    }

    /// Layers reading the output of `layer`, in order, without repeats.
    pub fn consumers(&self, layer: usize) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, c)| c.producers().any(|p| p == Producer::Layer(layer)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn producer_elems(&self, p: Producer) -> u64 {
        match p {
            Producer::Input(i) => self.inputs[i].elems(),
            Producer::Layer(l) => self.layers[l].out_elems(),
        }
    }

    pub fn producer_vid(&self, p: Producer) -> u8 {
        match p {
            Producer::Input(i) => self.inputs[i].vid,
            Producer::Layer(l) => self.layers[l].vid(),
        }
    }

    /// True when every layer reads exactly its predecessor and nothing else.
    pub fn is_chain(&self) -> bool {
        self.layers.iter().enumerate().all(|(i, l)| {
            l.bypass.is_empty()
                && l.inputs
                    == [if i == 0 {
                        Producer::Input(0)
                    } else {
                        Producer::Layer(i - 1)
                    }]
        }) && self.inputs.len() == 1
    }

    pub fn weight_bytes(&self) -> u64 {
        let mut seen = HashMap::new();
        for l in &self.layers {
            seen.insert(&l.weight_key, l.weight_bytes);
        }
        seen.values().sum()
    }
}

fn check_dims(name: &str, dims: &[u64]) -> Result<(), String> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(format!("`{name}` has empty dimensions {dims:?}"));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_parse_and_validate() {
        for name in preset_names().filter(|n| *n != "rnn_cell") {
            let g = NetworkGraph::preset(name).unwrap();
            assert!(!g.layers.is_empty(), "{name}");
        }
        let r50 = NetworkGraph::preset("resnet50").unwrap();
        assert_eq!(r50.layers.len(), 55);
        // Published parameter count is about 25.5M.
        assert!((25_000_000..26_000_000).contains(&r50.weight_bytes()));
        let alex = NetworkGraph::preset("alexnet").unwrap();
        assert_eq!(alex.weight_bytes(), 60_954_656);
        let goog = NetworkGraph::preset("googlenet").unwrap();
        assert!((6_000_000..7_100_000).contains(&goog.weight_bytes()));
    }

    #[test]
    fn vids_follow_layer_order() {
        let g = NetworkGraph::preset("lenet").unwrap();
        assert_eq!(g.inputs[0].vid, 1);
        let vids: Vec<u8> = g.layers.iter().map(|l| l.vid()).collect();
        assert_eq!(vids, [2, 3, 4, 5]);
        assert_eq!(g.outputs, [3]);
        assert!(g.is_chain());
    }

    #[test]
    fn partial_writes_take_consecutive_vids() {
        let mut def = NetworkDef::preset("lenet").unwrap();
        def.layers[1].partial_writes = 3;
        let g = NetworkGraph::from_def(&def).unwrap();
        assert_eq!(g.layers[1].first_vid, 3);
        assert_eq!(g.layers[1].vid(), 5);
        assert_eq!(g.layers[2].first_vid, 6);
    }

    #[test]
    fn residual_bypass_resolves() {
        let g = NetworkGraph::preset("tiny").unwrap();
        assert_eq!(g.layers[2].bypass, [Producer::Layer(0)]);
        assert_eq!(g.consumers(0), [1, 2]);
        assert!(!g.is_chain());
    }

    #[test]
    fn validation_errors() {
        let mut def = NetworkDef::preset("lenet").unwrap();
        def.layers[2].in_dims = vec![801];
        assert!(matches!(
            NetworkGraph::from_def(&def),
            Err(WorkloadError::Config(_))
        ));
        let mut def = NetworkDef::preset("tiny").unwrap();
        def.layers[2].bypass_from = vec!["fc".into()];
        assert!(NetworkGraph::from_def(&def).is_err());
        let mut def = NetworkDef::preset("lenet").unwrap();
        def.layers[0].partial_writes = 300;
        assert!(matches!(
            NetworkGraph::from_def(&def),
            Err(WorkloadError::InvalidVid(_))
        ));
    }

    #[test]
    fn toml_round_trip() {
        let def = NetworkDef::preset("tiny").unwrap();
        assert_eq!(NetworkDef::from_toml(&def.to_toml()).unwrap(), def);
    }

    #[test]
    fn rnn_unroll_shapes() {
        let cell = NetworkDef::preset("rnn_cell").unwrap();
        let one = NetworkGraph::from_def(&cell.unroll(1).unwrap()).unwrap();
        assert_eq!(one.layers.len(), cell.layers.len());
        let three = NetworkGraph::from_def(&cell.unroll(3).unwrap()).unwrap();
        assert_eq!(three.layers.len(), 3 * cell.layers.len());
        assert_eq!(three.inputs.len(), 4);
        assert_eq!(three.inputs[0].name, "state@0");
        assert_eq!(three.outputs.len(), 3);
        // hh@1 reads hidden@0.
        let hh1 = three.layers.iter().position(|l| l.name == "hh@1").unwrap();
        let hidden0 = three
            .layers
            .iter()
            .position(|l| l.name == "hidden@0")
            .unwrap();
        assert_eq!(three.layers[hh1].inputs, [Producer::Layer(hidden0)]);
        assert_eq!(three.layers[hh1].weight_key, "hh");
        assert!(matches!(
            NetworkGraph::from_def(&cell.unroll(200).unwrap()),
            Err(WorkloadError::InvalidVid(_))
        ));
    }
}
