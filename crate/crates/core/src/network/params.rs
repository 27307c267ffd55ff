use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::tensor::{RunningStats, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Batch-norm running mean/variance: persisted, never optimized.
    RunningStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Named parameter tensors in construction order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name `{name}`")));
        }
        self.entries.insert(name, Param { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.iter().filter(|(_, p)| p.kind == ParamKind::Trainable).map(|(k, p)| (k, &p.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn param_count(&self) -> usize {
        param_count(self)
    }

    /// Wraps every trainable tensor in a fresh leaf [`Var`].
    pub fn bind(&self, requires_grad: bool) -> BoundParams {
        let mut vars = IndexMap::new();
        let mut running = IndexMap::new();
        for (name, p) in &self.entries {
            match p.kind {
                ParamKind::Trainable => {
                    vars.insert(name.clone(), Var::leaf(p.tensor.clone(), requires_grad));
                }
                ParamKind::RunningStat => {
                    running.insert(name.clone(), p.tensor.clone());
                }
            }
        }
        BoundParams { vars, running }
    }

    /// Writes back running statistics collected by a training-mode forward pass.
    pub fn apply_bn_updates(&mut self, updates: Vec<BnUpdate>) -> Result<()> {
        for u in updates {
            for (suffix, values) in [("running_mean", u.stats.mean), ("running_var", u.stats.var)] {
                let name = format!("{}.{suffix}", u.prefix);
                let p = self
                    .entries
                    .get_mut(&name)
                    .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))?;
                p.tensor = Tensor::new(p.tensor.shape().to_vec(), values)?;
            }
        }
        Ok(())
    }
}

/// Number of trainable scalars; running statistics are excluded.
pub fn param_count(store: &ParamStore) -> usize {
    store.trainable().map(|(_, t)| t.numel()).sum()
}

/// Parameters bound as graph leaves for one forward pass.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
    running: IndexMap<String, Tensor>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars.get(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn running_stats(&self, prefix: &str) -> Result<RunningStats> {
        let get = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            self.running
                .get(&name)
                .map(|t| t.data().to_vec())
                .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter `{name}`")))
        };
        let mut stats = RunningStats::new(0);
        stats.mean = get("running_mean")?;
        stats.var = get("running_var")?;
        Ok(stats)
    }

    /// Gradient of every trainable parameter; zeros where backward never reached.
    pub fn grads(&self) -> IndexMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(v.shape().to_vec()))))
            .collect()
    }
}

/// New running statistics for the batch-norm whose parameters share `prefix`.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub prefix: String,
    pub stats: RunningStats,
}
