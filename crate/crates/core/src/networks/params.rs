use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::autograd::{Graph, Tensor, Var};

/// Named parameter arrays of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params(pub BTreeMap<String, Tensor>);

impl Params {
    pub fn get(&self, name: &str) -> &Tensor {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.0.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.0.values().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and raw bits, in name order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.0 {
            h.update(name.as_bytes());
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn bit_eq(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((na, a), (nb, b))| na == nb && a.bit_eq(b))
    }

    pub fn same_shapes(&self, other: &Params) -> bool {
        self.0.len() == other.0.len()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }
}

/// Shape and fan-in of one parameter; weights are He-initialized, biases zero.
#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// `Some(fan_in)` for weights, `None` for biases.
    pub fan_in: Option<usize>,
}

#[derive(Default)]
pub(crate) struct SpecBuilder {
    pub specs: Vec<ParamSpec>,
}

impl SpecBuilder {
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![cout, cin, k, k],
            fan_in: Some(cin * k * k),
        });
        self.bias(name, cout);
    }

    pub fn linear(&mut self, name: &str, fin: usize, fout: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.w"),
            shape: vec![fout, fin],
            fan_in: Some(fin),
        });
        self.bias(name, fout);
    }

    fn bias(&mut self, name: &str, n: usize) {
        self.specs.push(ParamSpec {
            name: format!("{name}.b"),
            shape: vec![n],
            fan_in: None,
        });
    }
}

/// He-normal weights (std `sqrt(2 / fan_in)`) and zero biases, drawn in
/// spec order from a ChaCha stream keyed by `seed`.
pub fn he_init(specs: &[ParamSpec], seed: u64) -> Params {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = BTreeMap::new();
    for spec in specs {
        let t = match spec.fan_in {
            Some(fan_in) => {
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt())
                    .expect("positive std");
                Tensor::from_fn(&spec.shape, |_| normal.sample(&mut rng))
            }
            None => Tensor::zeros(&spec.shape),
        };
        out.insert(spec.name.clone(), t);
    }
    Params(out)
}

/// Parameters bound into a graph, either trainable or frozen.
pub struct Binding<'a> {
    pub params: &'a Params,
    pub trainable: bool,
}

impl<'a> Binding<'a> {
    pub fn trainable(params: &'a Params) -> Self {
        Self {
            params,
            trainable: true,
        }
    }

    pub fn frozen(params: &'a Params) -> Self {
        Self {
            params,
            trainable: false,
        }
    }

    pub fn var(&self, g: &mut Graph, name: &str) -> Var {
        g.param(name, self.params.get(name), self.trainable)
    }

    pub fn wb(&self, g: &mut Graph, layer: &str) -> (Var, Var) {
        (
            self.var(g, &format!("{layer}.w")),
            self.var(g, &format!("{layer}.b")),
        )
    }
}
