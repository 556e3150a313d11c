use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{invalid, Error, Result};

/// Handle to a tensor owned by a [`ParamStore`].
///
/// Two modules that hold the same `ParamId` read and update the same storage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

/// Named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(invalid(format!("duplicate parameter name `{name}`")));
        }
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "param",
                node: name,
            });
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value });
        Ok(id)
    }

    /// Adds a `rows x cols` tensor drawn from N(0, std^2).
    pub fn normal<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| invalid(format!("normal init: {e}")))?;
        let value = Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng));
        self.add(name, value)
    }

    pub fn filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fill: f64,
    ) -> Result<ParamId> {
        self.add(name, Array2::from_elem((rows, cols), fill))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all tensors.
    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Copies values from `other` for every name present in both stores.
    ///
    /// Every parameter of `self` must be present in `other` with the same shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for p in &mut self.params {
            let id = other
                .id(&p.name)
                .ok_or_else(|| invalid(format!("missing parameter `{}`", p.name)))?;
            let src = other.get(id);
            if src.dim() != p.value.dim() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    lhs: p.name.clone(),
                    lhs_shape: [p.value.nrows(), p.value.ncols()],
                    rhs: "checkpoint".into(),
                    rhs_shape: [src.nrows(), src.ncols()],
                });
            }
            p.value.assign(src);
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct SerializedParam {
    name: String,
    shape: [usize; 2],
    values: Vec<f64>,
}

impl Serialize for ParamStore {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let items: Vec<SerializedParam> = self
            .params
            .iter()
            .map(|p| SerializedParam {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                values: p.value.iter().copied().collect(),
            })
            .collect();
        items.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ParamStore {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let items = Vec::<SerializedParam>::deserialize(deserializer)?;
        let mut store = ParamStore::new();
        for item in items {
            let value = Array2::from_shape_vec((item.shape[0], item.shape[1]), item.values)
                .map_err(|e| D::Error::custom(format!("parameter `{}`: {e}", item.name)))?;
            store
                .add(item.name, value)
                .map_err(|e| D::Error::custom(e.to_string()))?;
        }
        Ok(store)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.filled("w", 1, 1, 0.0).unwrap();
        assert!(s.filled("w", 1, 1, 0.0).is_err());
    }

    #[test]
    fn json_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut s = ParamStore::new();
        s.normal("a", 3, 4, 0.01, &mut rng).unwrap();
        s.normal("b", 1, 5, 1.0, &mut rng).unwrap();
        let text = serde_json::to_string(&s).unwrap();
        let back: ParamStore = serde_json::from_str(&text).unwrap();
        assert_eq!(s, back);
    }
}
