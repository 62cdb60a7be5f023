//! Named parameter storage, graph binding and the VPRC checkpoint format.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Gradients, Graph, Tensor, Var};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VPRC";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Which optimizer owns a parameter. The two groups are disjoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    /// Encoder, attention module, pooling exponents and segmentation decoder.
    Main,
    Discriminator,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    XavierUniform,
    Normal {
        std: f64,
    },
    /// Normal with std `sqrt(2 / fan_in)`.
    HeNormal,
    Constant(f64),
}

impl Init {
    /// Samples a tensor; `fan_in`/`fan_out` feed the Xavier bound.
    pub fn sample<R: Rng>(self, shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match self {
            Init::XavierUniform => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::HeNormal => {
                let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                (0..n).map(|_| dist.sample(rng)).collect()
            }
            Init::Constant(v) => vec![v; n],
        };
        Tensor::new(shape.to_vec(), data).expect("shape matches sample count")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
    /// Whether the L2 weight-decay term applies (false for biases).
    pub decay: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("parameter {name} registered twice")));
        }
        self.params.insert(name, param);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.get_mut(name)
    }

    /// Parameters in name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names_in(&self, group: ParamGroup) -> Vec<String> {
        self.iter()
            .filter(|(_, p)| p.group == group)
            .map(|(n, _)| n.to_owned())
            .collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn bind<'a>(&'a self, graph: &'a Graph, trainable: Option<ParamGroup>) -> Binding<'a> {
        Binding {
            store: self,
            graph,
            trainable,
            vars: RefCell::new(HashMap::new()),
        }
    }

    /// Writes every parameter, ordered by name.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (name, p) in &self.params {
            let len = u32::try_from(name.len()).map_err(|_| Error::format("VPRC", "parameter name too long"))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(&mut w, &p.value)?;
        }
        Ok(())
    }

    /// Replaces parameter values from a checkpoint. The checkpoint must name
    /// exactly the registered parameters, with identical shapes.
    pub fn load_checkpoint<R: Read>(&mut self, r: R) -> Result<()> {
        let tensors = read_checkpoint(r)?;
        if tensors.len() != self.params.len() || tensors.keys().any(|k| !self.params.contains_key(k)) {
            let have: Vec<&String> = tensors.keys().collect();
            return Err(Error::format(
                "VPRC",
                format!("checkpoint parameters {have:?} do not match the model"),
            ));
        }
        for (name, t) in tensors {
            let p = self.params.get_mut(&name).expect("checked above");
            if p.value.shape() != t.shape() {
                return Err(Error::format(
                    "VPRC",
                    format!("{name}: shape {:?}, model expects {:?}", t.shape(), p.value.shape()),
                ));
            }
            p.value = t;
        }
        Ok(())
    }
}

/// Reads a VPRC stream into (name → tensor), in file order.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<BTreeMap<String, Tensor>> {
    let mut header = [0u8; 6];
    r.read_exact(&mut header)?;
    if &header[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("VPRC", "bad magic"));
    }
    let version = u16::from_le_bytes([header[4], header[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format("VPRC", format!("unsupported version {version}")));
    }
    let mut out = BTreeMap::new();
    let mut prev: Option<String> = None;
    loop {
        let mut len = [0u8; 4];
        match r.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::format("VPRC", "name is not UTF-8"))?;
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(Error::format("VPRC", format!("record {name} out of order")));
        }
        let t = read_tensor(&mut r)?;
        prev = Some(name.clone());
        out.insert(name, t);
    }
    Ok(out)
}

/// Lazily registers parameters of a [`ParamStore`] as leaves of one graph.
///
/// Parameters of the `trainable` group become `requires_grad` leaves; all
/// others enter as constants.
pub struct Binding<'a> {
    store: &'a ParamStore,
    graph: &'a Graph,
    trainable: Option<ParamGroup>,
    vars: RefCell<HashMap<String, Var>>,
}

impl<'a> Binding<'a> {
    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.borrow().get(name) {
            return Ok(v);
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        let v = self.graph.leaf(p.value.clone(), Some(p.group) == self.trainable);
        self.vars.borrow_mut().insert(name.to_owned(), v);
        Ok(v)
    }

    /// Gradients of the bound trainable parameters that the loss reached.
    pub fn collect(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .borrow()
            .iter()
            .filter_map(|(name, &v)| grads.get(v).map(|t| (name.clone(), t.clone())))
            .collect()
    }
}
