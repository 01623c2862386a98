//! Flat parameter storage with a stable name -> slice index map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub trainable: bool,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All tensors of a model in one contiguous vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a tensor and returns its id. Names must be unique.
    pub fn add(&mut self, name: &str, rows: usize, cols: usize, values: Vec<f64>, trainable: bool) -> usize {
        assert_eq!(values.len(), rows * cols, "{name}: wrong value count");
        assert!(self.id(name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry {
            name: name.to_string(),
            rows,
            cols,
            offset: self.values.len(),
            trainable,
        });
        self.values.extend(values);
        self.entries.len() - 1
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entry(&self, id: usize) -> &ParamEntry {
        &self.entries[id]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn slice(&self, id: usize) -> &[f64] {
        let e = &self.entries[id];
        &self.values[e.offset..e.offset + e.len()]
    }

    pub fn slice_mut(&mut self, id: usize) -> &mut [f64] {
        let e = &self.entries[id];
        let (a, b) = (e.offset, e.offset + e.len());
        &mut self.values[a..b]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(ParamEntry::len).sum()
    }

    /// 1 for trainable coordinates, 0 for frozen ones.
    pub fn trainable_mask(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.len()];
        for e in self.entries.iter().filter(|e| e.trainable) {
            m[e.offset..e.offset + e.len()].iter_mut().for_each(|v| *v = 1.0);
        }
        m
    }

    /// Replaces all values, keeping the layout.
    pub fn set_values(&mut self, values: Vec<f64>) -> Result<()> {
        if values.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                expected: self.values.len().to_string(),
                got: values.len().to_string(),
            });
        }
        self.values = values;
        Ok(())
    }

    /// Rebuilds a store from a layout and a payload.
    pub fn from_parts(entries: Vec<ParamEntry>, values: Vec<f64>) -> Result<Self> {
        let mut expected = 0;
        for e in &entries {
            if e.offset != expected {
                return Err(Error::format(format!("parameter {} has offset {}, expected {expected}", e.name, e.offset)));
            }
            expected += e.len();
        }
        if expected != values.len() {
            return Err(Error::format(format!("payload holds {} values, layout needs {expected}", values.len())));
        }
        Ok(Self { entries, values })
    }

    pub fn into_parts(self) -> (Vec<ParamEntry>, Vec<f64>) {
        (self.entries, self.values)
    }
}
