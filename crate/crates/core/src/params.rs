//! Named parameter storage, initialization, and binding onto a [`Graph`].

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::{ConvKind, Graph, Var};
use crate::tensor::{numel, Float, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, resampled outside ±2 std.
    TruncNormal(f64),
    /// Normal with std `1/√fan_in`, fan-in taken from dims 1.. of the shape.
    FanIn,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Ordered list of parameter declarations, with a name prefix stack.
#[derive(Clone, Debug, Default)]
pub struct Specs {
    prefix: Vec<String>,
    pub(crate) items: Vec<ParamSpec>,
}

impl Specs {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn items(&self) -> &[ParamSpec] {
        &self.items
    }

    /// Runs `f` with `name` pushed onto the prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let r = f(self);
        self.prefix.pop();
        r
    }

    pub fn add(&mut self, name: &str, shape: Vec<usize>, init: Init) {
        let mut full = self.prefix.join(".");
        if !full.is_empty() {
            full.push('.');
        }
        full.push_str(name);
        self.items.push(ParamSpec {
            name: full,
            shape,
            init,
        });
    }

    /// `weight` + `bias` of a convolution layer.
    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, kind: ConvKind, weight_init: Init) {
        let shape = match kind {
            ConvKind::Pointwise => vec![cout, cin, 1, 1],
            ConvKind::Depthwise3x3 => vec![cout, 1, 3, 3],
            ConvKind::Full3x3 => vec![cout, cin, 3, 3],
        };
        self.scope(name, |s| {
            s.add("weight", shape, weight_init);
            s.add("bias", vec![cout], Init::Zeros);
        });
    }

    pub fn norm(&mut self, name: &str, channels: usize) {
        self.scope(name, |s| {
            s.add("gamma", vec![channels], Init::Ones);
            s.add("beta", vec![channels], Init::Zeros);
        });
    }

    pub fn total_elements(&self) -> usize {
        self.items.iter().map(|p| numel(&p.shape)).sum()
    }
}

/// Ordered name → tensor map.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Float = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Float> Default for ParameterSet<T> {
    fn default() -> Self {
        ParameterSet {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl<T: Float> ParameterSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materializes `specs` with a seeded generator; the same seed always
    /// yields bit-identical tensors.
    pub fn initialize(specs: &Specs, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut set = Self::new();
        for spec in specs.items() {
            let n = numel(&spec.shape);
            let data: Vec<T> = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::TruncNormal(std) => (0..n).map(|_| T::lit(trunc_normal(&mut rng, std))).collect(),
                Init::FanIn => {
                    let fan_in = numel(&spec.shape[1..]).max(1);
                    let std = (1.0 / fan_in as f64).sqrt();
                    (0..n)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(&mut rng);
                            T::lit(z * std)
                        })
                        .collect()
                }
            };
            set.insert(&spec.name, Tensor::new(spec.shape.clone(), data).expect("spec shape"))
                .expect("unique parameter names");
        }
        set
    }

    pub fn insert(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.to_string(), self.names.len());
        self.names.push(name.to_string());
        self.tensors.push(t);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(&self.tensors)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.position(name).map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Float>(&self) -> ParameterSet<U> {
        ParameterSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
            index: self.index.clone(),
        }
    }

    /// Checks names and shapes against `specs`, reporting the first offender.
    pub fn conforms_to(&self, specs: &Specs) -> Result<()> {
        for spec in specs.items() {
            match self.get(&spec.name) {
                None => {
                    return Err(Error::CheckpointShape {
                        name: spec.name.clone(),
                        expected: spec.shape.clone(),
                        found: vec![],
                    })
                }
                Some(t) if t.shape() != spec.shape.as_slice() => {
                    return Err(Error::CheckpointShape {
                        name: spec.name.clone(),
                        expected: spec.shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                _ => {}
            }
        }
        if let Some(extra) = self.names.iter().find(|n| !specs.items().iter().any(|s| &s.name == *n)) {
            return Err(Error::CheckpointShape {
                name: extra.clone(),
                expected: vec![],
                found: self.get(extra).map(|t| t.shape().to_vec()).unwrap_or_default(),
            });
        }
        Ok(())
    }

    /// Records every parameter on `g` as a trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph<T>) -> Bound<'a> {
        Bound {
            index: &self.index,
            vars: self.tensors.iter().map(|t| g.param(t.clone())).collect(),
        }
    }

    /// Wraps graph handles created elsewhere, one per parameter in set order.
    pub fn attach<'a>(&'a self, vars: Vec<Var>) -> Result<Bound<'a>> {
        if vars.len() != self.len() {
            return Err(Error::InvalidArgument(format!(
                "{} handles for {} parameters",
                vars.len(),
                self.len()
            )));
        }
        Ok(Bound {
            index: &self.index,
            vars,
        })
    }

    /// Records every parameter as a constant (inference, no gradients).
    pub fn bind_frozen<'a>(&'a self, g: &mut Graph<T>) -> Bound<'a> {
        Bound {
            index: &self.index,
            vars: self.tensors.iter().map(|t| g.constant(t.clone())).collect(),
        }
    }
}

/// Parameters recorded on a graph, addressable by name.
pub struct Bound<'a> {
    index: &'a HashMap<String, usize>,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    /// Graph handles in parameter-set order.
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::InvalidConfig(format!("missing parameter `{name}`")))
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            bound: self,
            prefix: String::new(),
        }
    }
}

/// A name prefix into a [`Bound`] set.
#[derive(Clone)]
pub struct Scope<'a> {
    bound: &'a Bound<'a>,
    prefix: String,
}

impl<'a> Scope<'a> {
    fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn sub(&self, name: &str) -> Scope<'a> {
        Scope {
            bound: self.bound,
            prefix: self.full(name),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.bound.get(&self.full(name))
    }

    pub fn conv(&self, name: &str, kind: ConvKind) -> Result<Conv> {
        let s = self.sub(name);
        Ok(Conv {
            weight: s.var("weight")?,
            bias: s.var("bias")?,
            kind,
        })
    }

    pub fn norm(&self, name: &str) -> Result<Norm> {
        let s = self.sub(name);
        Ok(Norm {
            gamma: s.var("gamma")?,
            beta: s.var("beta")?,
        })
    }
}

/// A bound convolution layer.
#[derive(Clone, Copy, Debug)]
pub struct Conv {
    pub weight: Var,
    pub bias: Var,
    pub kind: ConvKind,
}

impl Conv {
    pub fn apply<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, self.weight, self.bias, self.kind)
    }
}

/// A bound channel layer norm.
#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: Var,
    pub beta: Var,
}

impl Norm {
    pub fn apply<T: Float>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        g.layer_norm(x, self.gamma, self.beta, T::lit(crate::ops::LAYER_NORM_EPS))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> Specs {
        let mut s = Specs::new();
        s.scope("enc1", |s| {
            s.conv("conv", 4, 8, ConvKind::Full3x3, Init::FanIn);
            s.norm("norm", 8);
            s.add("table", vec![2, 9], Init::TruncNormal(0.02));
        });
        s
    }

    #[test]
    fn names_are_prefixed_and_ordered() {
        let names: Vec<String> = specs().items().iter().map(|p| p.name.clone()).collect();
        assert_eq!(
            names,
            [
                "enc1.conv.weight",
                "enc1.conv.bias",
                "enc1.norm.gamma",
                "enc1.norm.beta",
                "enc1.table"
            ]
        );
    }

    #[test]
    fn initialization_is_seeded() {
        let a = ParameterSet::<f32>::initialize(&specs(), 3);
        let b = ParameterSet::<f32>::initialize(&specs(), 3);
        let c = ParameterSet::<f32>::initialize(&specs(), 4);
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.get("enc1.table").unwrap().data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.get("enc1.norm.gamma").unwrap().data().iter().all(|&v| v == 1.0));
        assert!(a.get("enc1.conv.bias").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conformance_names_first_offender() {
        let set = ParameterSet::<f32>::initialize(&specs(), 0);
        assert!(set.conforms_to(&specs()).is_ok());
        let mut other = Specs::new();
        other.scope("enc1", |s| s.conv("conv", 4, 16, ConvKind::Full3x3, Init::FanIn));
        match set.conforms_to(&other) {
            Err(Error::CheckpointShape { name, .. }) => assert_eq!(name, "enc1.conv.weight"),
            r => panic!("unexpected {r:?}"),
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut set = ParameterSet::<f32>::new();
        set.insert("a", Tensor::zeros(vec![1])).unwrap();
        assert!(set.insert("a", Tensor::zeros(vec![1])).is_err());
    }
}
