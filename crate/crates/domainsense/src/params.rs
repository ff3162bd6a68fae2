//! Flat parameter storage with a named segment registry.
//!
//! Models keep all trainable parameters in one flat `Vec<f64>` so that
//! gradients, sensitivity indices, and regularization coefficients line up
//! index-for-index.  A registry of [`Segment`]s maps names such as
//! `layer0.weight` onto contiguous ranges of the flat vector, together with
//! the logical shape each range folds into.
//!
//! Each parameter also carries a variance.  The sensitivity machinery
//! multiplies squared Jacobian norms by these variances; by default they are
//! all 1.0, which reduces the indices to plain squared-gradient energies.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named contiguous range of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    /// Registry name, e.g. `layer0.weight`.
    pub name: String,
    /// Start offset in the flat vector.
    pub offset: usize,
    /// Number of parameters in the segment.
    pub len: usize,
    /// Logical shape the segment folds into (row-major).
    pub shape: Vec<usize>,
}

/// Flat parameter values plus per-parameter variances and the registry.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterVector {
    values: Vec<f64>,
    variances: Vec<f64>,
    registry: Vec<Segment>,
}

impl ParameterVector {
    /// Builds a parameter vector from `(name, shape)` segments laid out in
    /// order, taking values from `values` and setting every variance to 1.0.
    ///
    /// Fails if `values` does not exactly fill the declared segments.
    pub fn from_segments(segments: &[(String, Vec<usize>)], values: Vec<f64>) -> Result<Self> {
        let mut registry = Vec::with_capacity(segments.len());
        let mut offset = 0;
        for (name, shape) in segments {
            let len: usize = shape.iter().product();
            registry.push(Segment {
                name: name.clone(),
                offset,
                len,
                shape: shape.clone(),
            });
            offset += len;
        }
        if values.len() != offset {
            return Err(Error::dimension(
                "ParameterVector::from_segments",
                format!("registry covers {} parameters, got {} values", offset, values.len()),
            ));
        }
        let variances = vec![1.0; values.len()];
        Ok(ParameterVector { values, variances, registry })
    }

    /// Rebuilds a parameter vector from raw parts, checking that the
    /// registry covers the whole vector contiguously without overlap and
    /// that every variance is non-negative.
    pub fn from_parts(values: Vec<f64>, variances: Vec<f64>, registry: Vec<Segment>) -> Result<Self> {
        let mut offset = 0;
        for seg in &registry {
            if seg.offset != offset {
                return Err(Error::Contract(format!(
                    "segment {} starts at {} but previous segments end at {}",
                    seg.name, seg.offset, offset
                )));
            }
            let len: usize = seg.shape.iter().product();
            if len != seg.len {
                return Err(Error::Contract(format!(
                    "segment {} declares len {} but shape {:?} holds {}",
                    seg.name, seg.len, seg.shape, len
                )));
            }
            offset += seg.len;
        }
        if offset != values.len() {
            return Err(Error::Contract(format!(
                "registry covers {} parameters but vector holds {}",
                offset,
                values.len()
            )));
        }
        if variances.len() != values.len() {
            return Err(Error::dimension(
                "ParameterVector::from_parts",
                format!("{} variances for {} parameters", variances.len(), values.len()),
            ));
        }
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Data(format!("negative or non-finite parameter variance {}", v)));
        }
        Ok(ParameterVector { values, variances, registry })
    }

    /// Total number of parameters.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    /// True when the model has no parameters.
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Flat parameter values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable flat parameter values.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Per-parameter variances.
    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    /// Replaces the per-parameter variances, rejecting negative or
    /// non-finite entries.
    pub fn set_variances(&mut self, variances: Vec<f64>) -> Result<()> {
        if variances.len() != self.values.len() {
            return Err(Error::dimension(
                "set_variances",
                format!("{} variances for {} parameters", variances.len(), self.values.len()),
            ));
        }
        if let Some(v) = variances.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::Data(format!("negative or non-finite parameter variance {}", v)));
        }
        self.variances = variances;
        Ok(())
    }

    /// A copy with the same registry and variances but different values.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        if values.len() != self.values.len() {
            return Err(Error::dimension(
                "with_values",
                format!("{} values for {} parameters", values.len(), self.values.len()),
            ));
        }
        Ok(ParameterVector {
            values,
            variances: self.variances.clone(),
            registry: self.registry.clone(),
        })
    }

    /// The segment registry, in layout order.
    pub fn registry(&self) -> &[Segment] {
        &self.registry
    }

    /// The values of one segment folded into its logical shape.
    pub fn segment_tensor(&self, index: usize) -> Result<Tensor> {
        let seg = self
            .registry
            .get(index)
            .ok_or_else(|| Error::Contract(format!("no segment with index {}", index)))?;
        Tensor::new(
            seg.shape.clone(),
            self.values[seg.offset..seg.offset + seg.len].to_vec(),
        )
    }

    /// Maps a flat parameter index to its segment and the index within it.
    pub fn locate(&self, flat: usize) -> Result<(&Segment, usize)> {
        if flat >= self.values.len() {
            return Err(Error::Contract(format!(
                "parameter index {} out of range for {} parameters",
                flat,
                self.values.len()
            )));
        }
        let seg = self
            .registry
            .iter()
            .find(|s| flat >= s.offset && flat < s.offset + s.len)
            .expect("registry covers the whole vector");
        Ok((seg, flat - seg.offset))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_layer_registry() -> Vec<(String, Vec<usize>)> {
        vec![
            ("layer0.weight".to_string(), vec![2, 3]),
            ("layer0.bias".to_string(), vec![3]),
            ("layer1.weight".to_string(), vec![3, 1]),
            ("layer1.bias".to_string(), vec![1]),
        ]
    }

    #[test]
    fn segments_are_laid_out_contiguously() {
        let params =
            ParameterVector::from_segments(&two_layer_registry(), (0..13).map(|i| i as f64).collect())
                .unwrap();
        assert_eq!(params.len(), 13);
        let offsets: Vec<usize> = params.registry().iter().map(|s| s.offset).collect();
        assert_eq!(offsets, vec![0, 6, 9, 12]);
        let w1 = params.segment_tensor(2).unwrap();
        assert_eq!(w1.shape(), &[3, 1]);
        assert_eq!(w1.data(), &[9.0, 10.0, 11.0]);
    }

    #[test]
    fn from_segments_rejects_wrong_value_count() {
        let err = ParameterVector::from_segments(&two_layer_registry(), vec![0.0; 12]);
        assert!(matches!(err, Err(Error::Dimension { .. })));
    }

    #[test]
    fn from_parts_rejects_gappy_registry() {
        let registry = vec![
            Segment { name: "a".into(), offset: 0, len: 2, shape: vec![2] },
            Segment { name: "b".into(), offset: 3, len: 1, shape: vec![1] },
        ];
        let err = ParameterVector::from_parts(vec![0.0; 4], vec![1.0; 4], registry);
        assert!(matches!(err, Err(Error::Contract(_))));
    }

    #[test]
    fn variances_default_to_one_and_reject_negatives() {
        let mut params =
            ParameterVector::from_segments(&[("w".to_string(), vec![2])], vec![0.5, -0.5]).unwrap();
        assert_eq!(params.variances(), &[1.0, 1.0]);
        assert!(params.set_variances(vec![0.0, 2.0]).is_ok());
        assert!(matches!(
            params.set_variances(vec![1.0, -1.0]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn locate_maps_flat_indices_to_segments() {
        let params =
            ParameterVector::from_segments(&two_layer_registry(), vec![0.0; 13]).unwrap();
        let (seg, local) = params.locate(7).unwrap();
        assert_eq!(seg.name, "layer0.bias");
        assert_eq!(local, 1);
        let (seg, local) = params.locate(12).unwrap();
        assert_eq!(seg.name, "layer1.bias");
        assert_eq!(local, 0);
        assert!(params.locate(13).is_err());
    }
}
