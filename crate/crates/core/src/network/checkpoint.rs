//! Binary checkpoints: `RTPC` magic, version, a length-prefixed `key=value`
//! metadata block, then `(name, dims, f32 payload)` records until end of file.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::{parse_groups, Group, NetworkConfig};
use super::Network;
use crate::error::{Error, Result};
use crate::layers::Parameterized;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 4] = b"RTPC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Named tensors plus metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, String>,
    pub entries: Vec<(String, Tensor<f32>)>,
}

/// What a load touched.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadSummary {
    pub loaded: Vec<String>,
    /// Checkpoint entries with no counterpart in the network (non-strict only).
    pub skipped: Vec<String>,
    /// Network tensors the checkpoint did not provide (non-strict only).
    pub missing: Vec<String>,
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: std::io::Error) -> Error {
    Error::Format(format!("truncated checkpoint: {e}"))
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    /// Keeps only the tensors belonging to `groups`.
    pub fn retain_groups(&mut self, groups: &[Group]) {
        self.entries.retain(|(n, _)| Group::of_param(n).is_some_and(|g| groups.contains(&g)));
    }

    /// Network configuration recorded in the metadata.
    pub fn config(&self) -> Result<NetworkConfig> {
        let get = |k: &str| {
            self.metadata
                .get(k)
                .map(String::as_str)
                .ok_or_else(|| Error::Format(format!("checkpoint metadata lacks '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Format(format!("checkpoint metadata '{k}' is not a count")))
        };
        Ok(NetworkConfig {
            depth: get("depth")?.parse()?,
            num_classes: num("classes")?,
            input_size: (num("input_h")?, num("input_w")?),
            width_multiplier: get("width")?
                .parse()
                .map_err(|_| Error::Format("checkpoint metadata 'width' is not a number".into()))?,
            pathways: get("pathways")?.parse()?,
        })
    }

    pub fn seed(&self) -> Result<u64> {
        self.metadata
            .get("seed")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("checkpoint metadata lacks a valid 'seed'".into()))
    }

    pub fn frozen(&self) -> Result<Vec<Group>> {
        parse_groups(self.metadata.get("frozen").map_or("", String::as_str))
    }

    pub fn write_to<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta: String = self.metadata.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.write_all(&(meta.len() as u32).to_le_bytes())?;
        out.write_all(meta.as_bytes())?;
        for (name, t) in &self.entries {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            for d in t.shape().dims() {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in t.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        out.flush()
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(&mut input).map_err(truncated)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let meta_len = read_u32(&mut input).map_err(truncated)? as usize;
        let mut meta = vec![0u8; meta_len];
        input.read_exact(&mut meta).map_err(truncated)?;
        let meta = String::from_utf8(meta).map_err(|_| Error::Format("checkpoint metadata is not UTF-8".into()))?;
        let mut metadata = BTreeMap::new();
        for line in meta.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("metadata line without '=': {line}")))?;
            metadata.insert(k.to_string(), v.to_string());
        }

        let mut entries = Vec::new();
        loop {
            let mut len = [0u8; 4];
            match input.read(&mut len[..1]) {
                Ok(0) => break,
                Ok(_) => input.read_exact(&mut len[1..]).map_err(truncated)?,
                Err(e) => return Err(truncated(e)),
            }
            let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
            input.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = read_u32(&mut input).map_err(truncated)? as usize;
            }
            let shape = Shape::new(dims[0], dims[1], dims[2], dims[3]);
            let mut bytes = vec![0u8; shape.numel() * 4];
            input.read_exact(&mut bytes).map_err(truncated)?;
            let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
            entries.push((name, Tensor::from_vec(shape, data)?));
        }
        Ok(Checkpoint { metadata, entries })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::read_from(BufReader::new(f))
    }
}

impl Network<f32> {
    /// Snapshot of every parameter and buffer with configuration metadata.
    pub fn to_checkpoint(&self, epoch: usize) -> Checkpoint {
        let c = self.config();
        let frozen: Vec<String> = self.frozen_groups().iter().map(|g| g.prefix().to_string()).collect();
        let metadata = [
            ("depth", c.depth.to_string()),
            ("width", c.width_multiplier.to_string()),
            ("classes", c.num_classes.to_string()),
            ("input_h", c.input_size.0.to_string()),
            ("input_w", c.input_size.1.to_string()),
            ("pathways", c.pathways.to_string()),
            ("seed", self.seed().to_string()),
            ("epoch", epoch.to_string()),
            ("config_hash", format!("{:016x}", c.hash())),
            ("frozen", frozen.join(",")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        let mut entries = Vec::new();
        self.visit(&mut |p| {
            let mut t = p.tensor.clone();
            t.clear_grad();
            entries.push((p.name.to_string(), t));
        });
        Checkpoint { metadata, entries }
    }

    /// Copies checkpoint tensors into the network by name.
    ///
    /// Strict loading requires the two name sets to be equal. Non-strict
    /// loading copies the intersection. A shape disagreement is always an error,
    /// and nothing is modified unless the whole load succeeds.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint, strict: bool) -> Result<LoadSummary> {
        let source: HashMap<&str, &Tensor<f32>> = ckpt.entries.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let names = self.param_names();
        let mut shapes = HashMap::new();
        self.visit(&mut |p| {
            shapes.insert(p.name.to_string(), p.tensor.shape());
        });

        let mut summary = LoadSummary::default();
        for (name, _) in &ckpt.entries {
            if !shapes.contains_key(name) {
                summary.skipped.push(name.clone());
            }
        }
        for name in &names {
            match source.get(name.as_str()) {
                Some(t) if t.shape() != shapes[name] => {
                    return Err(Error::Load(format!(
                        "shape clash for {name}: network {} vs checkpoint {}",
                        shapes[name],
                        t.shape()
                    )));
                }
                Some(_) => summary.loaded.push(name.clone()),
                None => summary.missing.push(name.clone()),
            }
        }
        if strict && !summary.skipped.is_empty() {
            return Err(Error::Load(format!("unknown parameters in checkpoint: {}", summary.skipped.join(", "))));
        }
        if strict && !summary.missing.is_empty() {
            return Err(Error::Load(format!("checkpoint lacks parameters: {}", summary.missing.join(", "))));
        }

        self.visit_mut(&mut |p| {
            if let Some(t) = source.get(p.name) {
                p.tensor.data_mut().copy_from_slice(t.data());
            }
        });
        Ok(summary)
    }

    /// Rebuilds the network described by a checkpoint, with its weights and freeze set.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut net = Network::build(ckpt.config()?, ckpt.seed()?)?;
        net.load_checkpoint(ckpt, true)?;
        net.set_freeze(&ckpt.frozen()?)?;
        Ok(net)
    }

    pub fn save_checkpoint(&self, path: &Path, epoch: usize) -> Result<()> {
        self.to_checkpoint(epoch).save(path)
    }

    pub fn load_checkpoint_file(&mut self, path: &Path, strict: bool) -> Result<LoadSummary> {
        self.load_checkpoint(&Checkpoint::load(path)?, strict)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{Depth, Pathways};
    use crate::ops::Mode;
    use rand::Rng;

    fn config(p: Pathways) -> NetworkConfig {
        NetworkConfig::new(Depth::D18, 4).with_input(64).with_width(0.125).with_pathways(p)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut net = Network::<f32>::build(config(Pathways::Both), 3).unwrap();
        net.set_freeze(&[Group::Conv1, Group::Conv2]).unwrap();
        let mut rng = crate::seed::rng(1);
        let x = Tensor::from_fn(net.input_shape(2), |_, _, _, _| rng.gen_range(-1.0f32..1.0));
        // move the running statistics away from their initial values
        net.forward(&x, Mode::Train).unwrap();
        let before = net.forward(&x, Mode::Eval).unwrap();

        let mut bytes = Vec::new();
        net.to_checkpoint(7).write_to(&mut bytes).unwrap();
        let ckpt = Checkpoint::read_from(bytes.as_slice()).unwrap();
        assert_eq!(ckpt.metadata["epoch"], "7");
        let mut restored = Network::from_checkpoint(&ckpt).unwrap();
        assert_eq!(restored.frozen_groups(), vec![Group::Conv1, Group::Conv2]);
        let after = restored.forward(&x, Mode::Eval).unwrap();
        assert_eq!(before.data(), after.data());
        assert_eq!(restored.to_checkpoint(7), net.to_checkpoint(7));
    }

    #[test]
    fn corrupt_magic_is_format_error() {
        let net = Network::<f32>::build(config(Pathways::Conv51Only), 3).unwrap();
        let mut bytes = Vec::new();
        net.to_checkpoint(0).write_to(&mut bytes).unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::read_from(bytes.as_slice()), Err(Error::Format(_))));
        assert!(matches!(Checkpoint::read_from(&bytes[..3]), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_record_is_format_error() {
        let net = Network::<f32>::build(config(Pathways::Conv51Only), 3).unwrap();
        let mut bytes = Vec::new();
        net.to_checkpoint(0).write_to(&mut bytes).unwrap();
        bytes.truncate(bytes.len() - 2);
        assert!(matches!(Checkpoint::read_from(bytes.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn single_pathway_checkpoint_into_two_pathway_net() {
        let source = Network::<f32>::build(config(Pathways::Conv51Only), 11).unwrap();
        let fresh = Network::<f32>::build(config(Pathways::Both), 22).unwrap();
        let mut target = fresh.clone();
        let ckpt = source.to_checkpoint(0);
        assert!(matches!(target.load_checkpoint(&ckpt, true), Err(Error::Load(_))));
        let summary = target.load_checkpoint(&ckpt, false).unwrap();
        assert_eq!(summary.skipped, vec!["fc.weight".to_string(), "fc.bias".to_string()]);

        let after = target.to_checkpoint(0);
        let fresh = fresh.to_checkpoint(0);
        for (name, t) in &after.entries {
            match Group::of_param(name).unwrap() {
                Group::Conv5_2 | Group::Fc => assert_eq!(t, fresh.get(name).unwrap(), "{name}"),
                _ => assert_eq!(t, ckpt.get(name).unwrap(), "{name}"),
            }
        }
    }

    #[test]
    fn shape_clash_is_always_an_error() {
        let source = Network::<f32>::build(config(Pathways::Conv51Only), 1).unwrap();
        let mut wide = Network::<f32>::build(config(Pathways::Conv51Only).with_width(0.25), 1).unwrap();
        let untouched = wide.to_checkpoint(0);
        assert!(matches!(wide.load_checkpoint(&source.to_checkpoint(0), false), Err(Error::Load(_))));
        assert_eq!(wide.to_checkpoint(0), untouched);
    }

    #[test]
    fn config_survives_metadata() {
        let c = config(Pathways::Conv52Only).with_width(0.3);
        let net = Network::<f32>::build(c.clone(), 5).unwrap();
        let ckpt = net.to_checkpoint(0);
        assert_eq!(ckpt.config().unwrap(), c);
        assert_eq!(ckpt.seed().unwrap(), 5);
    }
}
