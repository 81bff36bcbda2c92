//! U-Net and U-Net++ segmentation models at configurable toy scale.
//!
//! Both architectures share the same convolutional vocabulary: per level
//! two 3x3 conv + relu blocks, 2x2 max pooling down, nearest-neighbor
//! upsampling followed by a 3x3 conv up, and a sigmoid 1x1 head. Channel
//! widths start at `base_channels` and double per level, so the defaults
//! (depth 5, base 16) run 16 through 256 at the bottleneck.
//!
//! U-Net++ replaces the plain skip connections with a dense grid of nodes
//! `x{i}_{j}`: node `(i, j)` consumes every earlier node on its level plus
//! the upsampled node below, for `i + j <= depth - 1`. Deep supervision is
//! not used; only the final `x0_{depth-1}` output feeds the head.

use crate::autodiff::{NodeId, Tape};
use crate::tensor::{Tensor, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &str = "segattack-checkpoint v1";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error(
        "input {dim} size {size} is not divisible by {required} (required by depth {depth})"
    )]
    IndivisibleInput {
        dim: &'static str,
        size: usize,
        required: usize,
        depth: usize,
    },
    #[error("input has {got} channels, model expects {expected}")]
    ChannelMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    Unet,
    Unetpp,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Unet => "unet",
            Arch::Unetpp => "unetpp",
        }
    }

    pub fn from_name(s: &str) -> Result<Self, ModelError> {
        match s {
            "unet" => Ok(Arch::Unet),
            "unetpp" => Ok(Arch::Unetpp),
            other => Err(ModelError::InvalidConfig(format!(
                "unknown architecture {other:?} (expected unet | unetpp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Number of resolution levels, bottleneck included.
    pub depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub out_classes: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Unet,
            depth: 5,
            base_channels: 16,
            in_channels: 1,
            out_classes: 3,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.depth < 2 {
            return Err(ModelError::InvalidConfig(format!(
                "depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 || self.out_classes == 0 {
            return Err(ModelError::InvalidConfig(
                "channel counts must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Channel width at resolution level `i`.
    pub fn width(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Spatial sizes must divide this.
    pub fn required_divisor(&self) -> usize {
        1 << (self.depth - 1)
    }
}

/// A built network: config plus named parameter tensors.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    parameters: BTreeMap<String, Tensor>,
}

/// Output of wiring a model onto a tape.
pub struct ForwardPass {
    pub output: NodeId,
    /// Tape leaf for each parameter, keyed by parameter name.
    pub param_nodes: BTreeMap<String, NodeId>,
}

struct ParamInit<'a> {
    rng: ChaCha8Rng,
    params: &'a mut BTreeMap<String, Tensor>,
}

impl ParamInit<'_> {
    /// He-uniform weight plus zero bias for one conv layer.
    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        let fan_in = (cin * k * k) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let weight: Vec<f64> = (0..cout * cin * k * k)
            .map(|_| self.rng.random_range(-limit..limit))
            .collect();
        self.params.insert(
            format!("{name}.weight"),
            Tensor::new(vec![cout, cin, k, k], weight).expect("conv weight shape"),
        );
        self.params
            .insert(format!("{name}.bias"), Tensor::zeros(vec![cout]));
    }
}

/// Names of the U-Net++ grid nodes `x{i}_{j}`, `i + j <= depth - 1`,
/// in build order (backbone column first, then per skip column).
fn unetpp_nodes(depth: usize) -> Vec<(usize, usize)> {
    let mut nodes: Vec<(usize, usize)> = (0..depth).map(|i| (i, 0)).collect();
    for j in 1..depth {
        for i in 0..depth - j {
            nodes.push((i, j));
        }
    }
    nodes
}

pub fn build_model(config: &ModelConfig) -> Result<Model, ModelError> {
    config.validate()?;
    let mut parameters = BTreeMap::new();
    let mut init = ParamInit {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        params: &mut parameters,
    };
    let d = config.depth;
    match config.arch {
        Arch::Unet => {
            for i in 0..d {
                let cin = if i == 0 { config.in_channels } else { config.width(i - 1) };
                let w = config.width(i);
                init.conv(&format!("enc{i}.conv1"), cin, w, 3);
                init.conv(&format!("enc{i}.conv2"), w, w, 3);
            }
            for i in (0..d - 1).rev() {
                let w = config.width(i);
                init.conv(&format!("dec{i}.up"), config.width(i + 1), w, 3);
                init.conv(&format!("dec{i}.conv1"), 2 * w, w, 3);
                init.conv(&format!("dec{i}.conv2"), w, w, 3);
            }
        }
        Arch::Unetpp => {
            for (i, j) in unetpp_nodes(d) {
                let w = config.width(i);
                let name = format!("x{i}_{j}");
                if j == 0 {
                    let cin = if i == 0 { config.in_channels } else { config.width(i - 1) };
                    init.conv(&format!("{name}.conv1"), cin, w, 3);
                } else {
                    init.conv(&format!("{name}.up"), config.width(i + 1), w, 3);
                    init.conv(&format!("{name}.conv1"), (j + 1) * w, w, 3);
                }
                init.conv(&format!("{name}.conv2"), w, w, 3);
            }
        }
    }
    init.conv("head", config.width(0), config.out_classes, 1);
    Ok(Model { config: config.clone(), parameters })
}

impl Model {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &BTreeMap<String, Tensor> {
        &self.parameters
    }

    /// Replace parameter values wholesale (shapes must match).
    pub fn set_parameters(&mut self, params: BTreeMap<String, Tensor>) -> Result<(), ModelError> {
        if params.len() != self.parameters.len() {
            return Err(ModelError::InvalidConfig(format!(
                "expected {} parameter tensors, got {}",
                self.parameters.len(),
                params.len()
            )));
        }
        for (name, tensor) in &params {
            match self.parameters.get(name) {
                Some(existing) if existing.shape() == tensor.shape() => {}
                Some(existing) => {
                    return Err(ModelError::InvalidConfig(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        tensor.shape(),
                        existing.shape()
                    )))
                }
                None => {
                    return Err(ModelError::InvalidConfig(format!(
                        "unexpected parameter {name}"
                    )))
                }
            }
        }
        self.parameters = params;
        Ok(())
    }

    /// Total number of scalar parameters.
    pub fn parameter_count(&self) -> usize {
        self.parameters.values().map(Tensor::numel).sum()
    }

    /// U-Net++ grid size; 1 + decoder levels for plain U-Net.
    pub fn topology_node_count(&self) -> usize {
        match self.config.arch {
            Arch::Unet => 2 * self.config.depth - 1,
            Arch::Unetpp => self.config.depth * (self.config.depth + 1) / 2,
        }
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), ModelError> {
        let (_, c, h, w) = batch.dims4("forward")?;
        if c != self.config.in_channels {
            return Err(ModelError::ChannelMismatch { got: c, expected: self.config.in_channels });
        }
        let req = self.config.required_divisor();
        for (dim, size) in [("height", h), ("width", w)] {
            if size == 0 || !size.is_multiple_of(req) {
                return Err(ModelError::IndivisibleInput {
                    dim,
                    size,
                    required: req,
                    depth: self.config.depth,
                });
            }
        }
        Ok(())
    }

    /// Wire the network onto `tape` from an already-registered input node.
    /// Parameters become tape leaves; set `params_require_grad` for training,
    /// leave it off to attack the input of a frozen model.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        input: NodeId,
        params_require_grad: bool,
    ) -> Result<ForwardPass, ModelError> {
        self.check_input(tape.value(input))?;
        let mut param_nodes = BTreeMap::new();
        for (name, tensor) in &self.parameters {
            param_nodes.insert(name.clone(), tape.leaf(tensor.clone(), params_require_grad));
        }
        let conv_relu = |tape: &mut Tape, layer: &str, x: NodeId, padding: usize, nodes: &BTreeMap<String, NodeId>| -> Result<NodeId, ModelError> {
            let w = nodes[&format!("{layer}.weight")];
            let b = nodes[&format!("{layer}.bias")];
            let c = tape.conv2d(x, w, b, 1, padding)?;
            Ok(tape.relu(c)?)
        };

        let d = self.config.depth;
        let output = match self.config.arch {
            Arch::Unet => {
                let mut skips = Vec::with_capacity(d - 1);
                let mut cur = input;
                for i in 0..d {
                    cur = conv_relu(tape, &format!("enc{i}.conv1"), cur, 1, &param_nodes)?;
                    cur = conv_relu(tape, &format!("enc{i}.conv2"), cur, 1, &param_nodes)?;
                    if i < d - 1 {
                        skips.push(cur);
                        cur = tape.max_pool2(cur)?;
                    }
                }
                for i in (0..d - 1).rev() {
                    let up = tape.upsample_nearest2(cur)?;
                    let up = conv_relu(tape, &format!("dec{i}.up"), up, 1, &param_nodes)?;
                    cur = tape.concat_channels(skips[i], up)?;
                    cur = conv_relu(tape, &format!("dec{i}.conv1"), cur, 1, &param_nodes)?;
                    cur = conv_relu(tape, &format!("dec{i}.conv2"), cur, 1, &param_nodes)?;
                }
                cur
            }
            Arch::Unetpp => {
                // grid[i][j] = node output for x{i}_{j}
                let mut grid: Vec<Vec<Option<NodeId>>> = vec![vec![None; d]; d];
                let mut cur = input;
                for i in 0..d {
                    if i > 0 {
                        cur = tape.max_pool2(grid[i - 1][0].unwrap())?;
                    }
                    let name = format!("x{i}_0");
                    let a = conv_relu(tape, &format!("{name}.conv1"), cur, 1, &param_nodes)?;
                    grid[i][0] = Some(conv_relu(tape, &format!("{name}.conv2"), a, 1, &param_nodes)?);
                }
                for j in 1..d {
                    for i in 0..d - j {
                        let name = format!("x{i}_{j}");
                        let below = grid[i + 1][j - 1].unwrap();
                        let up = tape.upsample_nearest2(below)?;
                        let up = conv_relu(tape, &format!("{name}.up"), up, 1, &param_nodes)?;
                        let mut cat = grid[i][0].unwrap();
                        for earlier in grid[i][1..j].iter() {
                            cat = tape.concat_channels(cat, earlier.unwrap())?;
                        }
                        cat = tape.concat_channels(cat, up)?;
                        let a = conv_relu(tape, &format!("{name}.conv1"), cat, 1, &param_nodes)?;
                        grid[i][j] =
                            Some(conv_relu(tape, &format!("{name}.conv2"), a, 1, &param_nodes)?);
                    }
                }
                grid[0][d - 1].unwrap()
            }
        };
        let hw = param_nodes["head.weight"];
        let hb = param_nodes["head.bias"];
        let logits = tape.conv2d(output, hw, hb, 1, 0)?;
        let probs = tape.sigmoid(logits)?;
        Ok(ForwardPass { output: probs, param_nodes })
    }

    /// Plain inference: per-pixel, per-class probabilities in (0, 1).
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let input = tape.constant(batch.clone());
        let pass = self.forward_on(&mut tape, input, false)?;
        Ok(tape.value(pass.output).clone())
    }

    // ── Checkpoint format ───────────────────────────────────────────
    //
    // Text header, then name-sorted binary entries:
    //   segattack-checkpoint v1
    //   arch=<a> depth=<d> base_channels=<b> in_channels=<i> out_classes=<o> seed=<s>
    //   tensors=<count>
    //   <name> <ndim> <dim0> <dim1> ...\n  followed by numel little-endian f64
    //   ... repeated per tensor ...

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), ModelError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut out = BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "{CHECKPOINT_MAGIC}")?;
        let c = &self.config;
        writeln!(
            out,
            "arch={} depth={} base_channels={} in_channels={} out_classes={} seed={}",
            c.arch.name(),
            c.depth,
            c.base_channels,
            c.in_channels,
            c.out_classes,
            c.seed
        )?;
        writeln!(out, "tensors={}", self.parameters.len())?;
        for (name, tensor) in &self.parameters {
            write!(out, "{name} {}", tensor.shape().len())?;
            for dim in tensor.shape() {
                write!(out, " {dim}")?;
            }
            writeln!(out)?;
            for v in tensor.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Model, ModelError> {
        let mut reader = BufReader::new(std::fs::File::open(path)?);
        let mut line = String::new();

        reader.read_line(&mut line)?;
        if line.trim_end() != CHECKPOINT_MAGIC {
            return Err(ModelError::MalformedCheckpoint(format!(
                "bad magic line {:?}",
                line.trim_end()
            )));
        }

        line.clear();
        reader.read_line(&mut line)?;
        let mut fields = BTreeMap::new();
        for kv in line.trim_end().split(' ') {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                ModelError::MalformedCheckpoint(format!("bad header field {kv:?}"))
            })?;
            fields.insert(k.to_string(), v.to_string());
        }
        let get = |k: &str| -> Result<&String, ModelError> {
            fields
                .get(k)
                .ok_or_else(|| ModelError::MalformedCheckpoint(format!("missing header field {k}")))
        };
        let parse = |k: &str| -> Result<usize, ModelError> {
            get(k)?.parse().map_err(|_| {
                ModelError::MalformedCheckpoint(format!("non-numeric header field {k}"))
            })
        };
        let config = ModelConfig {
            arch: Arch::from_name(get("arch")?)?,
            depth: parse("depth")?,
            base_channels: parse("base_channels")?,
            in_channels: parse("in_channels")?,
            out_classes: parse("out_classes")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| ModelError::MalformedCheckpoint("bad seed".into()))?,
        };

        line.clear();
        reader.read_line(&mut line)?;
        let count: usize = line
            .trim_end()
            .strip_prefix("tensors=")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| ModelError::MalformedCheckpoint("bad tensor count line".into()))?;

        let mut parameters = BTreeMap::new();
        for _ in 0..count {
            line.clear();
            if reader.read_line(&mut line)? == 0 {
                return Err(ModelError::MalformedCheckpoint("truncated entry header".into()));
            }
            let mut parts = line.trim_end().split(' ');
            let name = parts
                .next()
                .filter(|s| !s.is_empty())
                .ok_or_else(|| ModelError::MalformedCheckpoint("empty tensor name".into()))?
                .to_string();
            let ndim: usize = parts
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| ModelError::MalformedCheckpoint(format!("bad rank for {name}")))?;
            let shape: Vec<usize> = parts
                .map(|v| v.parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| ModelError::MalformedCheckpoint(format!("bad dims for {name}")))?;
            if shape.len() != ndim {
                return Err(ModelError::MalformedCheckpoint(format!(
                    "rank {ndim} does not match {} dims for {name}",
                    shape.len()
                )));
            }
            let numel: usize = shape.iter().product();
            let mut bytes = vec![0u8; numel * 8];
            reader.read_exact(&mut bytes)?;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            parameters.insert(name, Tensor::new(shape, data)?);
        }

        let mut model = build_model(&config)?;
        model.set_parameters(parameters)?;
        Ok(model)
    }
}
