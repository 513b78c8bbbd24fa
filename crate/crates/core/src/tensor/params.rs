use crate::error::{Error, Result};

use super::Tensor;

/// Named, ordered collection of tensors making up a model's weights.
///
/// Also used for model deltas and gradients, which share the layout of the
/// weights they relate to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    segments: Vec<(String, Tensor)>,
}

/// Gradients have the same layout as the parameters they differentiate.
pub type Gradient = ParamVector;

/// Segment names and shapes, without values.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub segments: Vec<(String, Vec<usize>)>,
}

impl Layout {
    pub fn len(&self) -> usize {
        self.segments
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ParamVector {
    pub fn new(segments: Vec<(String, Tensor)>) -> Result<Self> {
        for (i, (name, _)) in segments.iter().enumerate() {
            if segments[..i].iter().any(|(n, _)| n == name) {
                return Err(Error::Structural(format!("duplicate segment `{name}`")));
            }
        }
        Ok(ParamVector { segments })
    }

    pub fn empty() -> Self {
        ParamVector {
            segments: Vec::new(),
        }
    }

    pub fn zeros(layout: &Layout) -> Self {
        ParamVector {
            segments: layout
                .segments
                .iter()
                .map(|(n, s)| (n.clone(), Tensor::zeros(s)))
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        ParamVector::zeros(&self.layout())
    }

    pub fn segments(&self) -> &[(String, Tensor)] {
        &self.segments
    }

    pub fn segments_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.segments
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.segments.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.segments[index].1
    }

    pub fn num_segments(&self) -> usize {
        self.segments.len()
    }

    /// Flat length `d`.
    pub fn len(&self) -> usize {
        self.segments.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layout(&self) -> Layout {
        Layout {
            segments: self
                .segments
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        for (_, t) in &self.segments {
            out.extend_from_slice(t.data());
        }
        out
    }

    pub fn unflatten(layout: &Layout, flat: &[f64]) -> Result<Self> {
        if layout.len() != flat.len() {
            return Err(Error::Structural(format!(
                "layout holds {} values, flat vector has {}",
                layout.len(),
                flat.len()
            )));
        }
        let mut offset = 0;
        let mut segments = Vec::with_capacity(layout.segments.len());
        for (name, shape) in &layout.segments {
            let n: usize = shape.iter().product();
            let t = Tensor::new(shape.clone(), flat[offset..offset + n].to_vec())?;
            segments.push((name.clone(), t));
            offset += n;
        }
        Ok(ParamVector { segments })
    }

    /// Same segment names, shapes and order.
    pub fn is_congruent(&self, other: &ParamVector) -> bool {
        self.segments.len() == other.segments.len()
            && self
                .segments
                .iter()
                .zip(&other.segments)
                .all(|((na, ta), (nb, tb))| na == nb && ta.shape() == tb.shape())
    }

    pub fn ensure_congruent(&self, other: &ParamVector, what: &str) -> Result<()> {
        if self.is_congruent(other) {
            Ok(())
        } else {
            Err(Error::Structural(format!(
                "{what}: parameter layouts differ ({:?} vs {:?})",
                self.layout().segments,
                other.layout().segments
            )))
        }
    }

    /// Values of every coordinate, in flat order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.segments.iter().flat_map(|(_, t)| t.data().iter().copied())
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.segments
            .iter_mut()
            .flat_map(|(_, t)| t.data_mut().iter_mut())
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &ParamVector) {
        debug_assert!(self.is_congruent(other));
        for (a, b) in self.values_mut().zip(other.values()) {
            *a += scale * b;
        }
    }

    /// `self - other`, coordinatewise.
    pub fn sub(&self, other: &ParamVector) -> Result<ParamVector> {
        self.ensure_congruent(other, "subtract")?;
        let mut out = self.clone();
        for (a, b) in out.values_mut().zip(other.values()) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        let mut out = self.clone();
        out.values_mut().for_each(|v| *v *= factor);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.values().all(f64::is_finite)
    }

    /// Number of bytes needed to ship the values as 8-byte reals.
    pub fn wire_bytes(&self) -> u64 {
        self.len() as u64 * 8
    }
}
