//! JSON container for adapter stacks.
//!
//! ```text
//! { "format_version": 1,
//!   "weights": [ { "name": "block0.wq", "d1": 32, "d2": 32,
//!                  "frozen": [ AdapterRecord, ... ],
//!                  "active": AdapterRecord | null } ] }
//!
//! AdapterRecord = { "kind": "lora" | "ada_lora", "d1", "d2", "r",
//!                   "mask": [bool; r],            // all true for lora
//!                   "arrays": { "a": Matrix, "b": Matrix, "lambda"?: Matrix } }
//! Matrix = { "rows", "cols", "data": [f64; rows*cols] }   // row-major
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AdaLoraAdapter, Adapter, AdapterKind, AdapterStack, LoraAdapter};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Parameter};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdapterRecord {
    pub kind: AdapterKind,
    pub d1: usize,
    pub d2: usize,
    pub r: usize,
    pub mask: Vec<bool>,
    pub arrays: BTreeMap<String, Matrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StackRecord {
    pub name: String,
    pub d1: usize,
    pub d2: usize,
    pub frozen: Vec<AdapterRecord>,
    pub active: Option<AdapterRecord>,
}

impl From<&Adapter> for AdapterRecord {
    fn from(adapter: &Adapter) -> Self {
        let mut arrays = BTreeMap::new();
        arrays.insert("a".to_string(), adapter.a().value().clone());
        arrays.insert("b".to_string(), adapter.b().value().clone());
        let mask = match adapter {
            Adapter::Lora(l) => vec![true; l.rank()],
            Adapter::AdaLora(l) => {
                arrays.insert("lambda".to_string(), l.lambda.value().clone());
                l.mask.clone()
            }
        };
        AdapterRecord {
            kind: adapter.kind(),
            d1: adapter.d1(),
            d2: adapter.d2(),
            r: adapter.rank(),
            mask,
            arrays,
        }
    }
}

impl AdapterRecord {
    fn array(&self, key: &str, shape: (usize, usize)) -> Result<Matrix> {
        let m = self
            .arrays
            .get(key)
            .ok_or_else(|| Error::Config(format!("adapter record missing array `{key}`")))?;
        if m.shape() != shape || m.len() != shape.0 * shape.1 {
            return Err(Error::dim("adapter record", shape, m.shape()));
        }
        Ok(m.clone())
    }

    /// Rebuilds the adapter with the given trainability.
    pub fn to_adapter(&self, trainable: bool) -> Result<Adapter> {
        if self.mask.len() != self.r {
            return Err(Error::Config(format!(
                "mask length {} != rank {}",
                self.mask.len(),
                self.r
            )));
        }
        let a = self.array("a", (self.d1, self.r))?;
        let b = self.array("b", (self.r, self.d2))?;
        let adapter = match self.kind {
            AdapterKind::Lora => Adapter::Lora(LoraAdapter {
                a: Parameter::new(a, trainable),
                b: Parameter::new(b, trainable),
            }),
            AdapterKind::AdaLora => {
                let lambda = self.array("lambda", (1, self.r))?;
                Adapter::AdaLora(AdaLoraAdapter {
                    a: Parameter::new(a, trainable),
                    lambda: Parameter::new(lambda, trainable),
                    b: Parameter::new(b, trainable),
                    mask: self.mask.clone(),
                })
            }
        };
        Ok(adapter)
    }
}

impl StackRecord {
    pub fn from_stack(name: impl Into<String>, stack: &AdapterStack) -> Self {
        let (d1, d2) = stack.dims();
        StackRecord {
            name: name.into(),
            d1,
            d2,
            frozen: stack.frozen().iter().map(AdapterRecord::from).collect(),
            active: stack.active().map(AdapterRecord::from),
        }
    }

    pub fn to_stack(&self) -> Result<AdapterStack> {
        let frozen = self
            .frozen
            .iter()
            .map(|r| r.to_adapter(false))
            .collect::<Result<Vec<_>>>()?;
        let active = self
            .active
            .as_ref()
            .map(|r| r.to_adapter(true))
            .transpose()?;
        AdapterStack::from_parts(self.d1, self.d2, frozen, active)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adalora, init_lora};

    #[test]
    fn stack_roundtrip_through_json() {
        let mut stack = AdapterStack::new(5, 4);
        stack
            .freeze_and_extend(init_lora(5, 4, 2, 1).unwrap())
            .unwrap();
        let mut ada = init_adalora(5, 4, 3, 2).unwrap();
        if let Adapter::AdaLora(l) = &mut ada {
            l.lambda.value_mut().set(0, 1, 0.75);
            l.mask[2] = false;
        }
        stack.freeze_and_extend(ada).unwrap();

        let rec = StackRecord::from_stack("w", &stack);
        let json = serde_json::to_string(&rec).unwrap();
        let back: StackRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        let rebuilt = back.to_stack().unwrap();
        assert_eq!(rebuilt.frozen().len(), 1);
        assert!(!rebuilt.frozen()[0].is_trainable());
        assert_eq!(
            rebuilt.active().unwrap().checksum(),
            stack.active().unwrap().checksum()
        );
        assert_eq!(rebuilt.delta_sum(), stack.delta_sum());
    }

    #[test]
    fn missing_array_is_rejected() {
        let mut rec = AdapterRecord::from(&init_lora(3, 3, 1, 0).unwrap());
        rec.arrays.remove("b");
        assert!(rec.to_adapter(true).is_err());
    }
}
