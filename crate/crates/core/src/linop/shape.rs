use std::fmt;

use crate::error::{Error, Result};

/// Axis labels for tensor-valued operator domains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Axis {
    Batch,
    Time,
    Feature,
    Site,
    Flat,
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::Batch => "batch",
            Axis::Time => "time",
            Axis::Feature => "feature",
            Axis::Site => "site",
            Axis::Flat => "flat",
        };
        f.write_str(s)
    }
}

/// Ordered, labeled axes of a row-major tensor domain.
///
/// The flattened index of `(i_0, .., i_{r-1})` is the usual row-major index, so
/// for a global state `(batch, time, feature)` the batch-time index is
/// `batch * n_t + time`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DomainShape {
    axes: Vec<(Axis, usize)>,
}

impl DomainShape {
    pub fn new(axes: Vec<(Axis, usize)>) -> Result<Self> {
        if let Some((axis, _)) = axes.iter().find(|(_, e)| *e == 0) {
            return Err(Error::InvalidShape(format!("axis {axis} has zero extent")));
        }
        if axes.is_empty() {
            return Ok(Self::flat(1));
        }
        Ok(Self { axes })
    }

    pub fn flat(n: usize) -> Self {
        assert!(n > 0, "flat domain must be non-empty");
        Self {
            axes: vec![(Axis::Flat, n)],
        }
    }

    /// The global-state domain `batch x time x feature`.
    pub fn state(n_x: usize, n_t: usize, n: usize) -> Self {
        Self::new(vec![
            (Axis::Batch, n_x),
            (Axis::Time, n_t),
            (Axis::Feature, n),
        ])
        .expect("state extents must be positive")
    }

    /// The reduced batch-time domain of a temporal view.
    pub fn batch_time(n_x: usize, n_t: usize) -> Self {
        Self::new(vec![(Axis::Batch, n_x), (Axis::Time, n_t)])
            .expect("batch/time extents must be positive")
    }

    pub fn axes(&self) -> &[(Axis, usize)] {
        &self.axes
    }

    pub fn rank(&self) -> usize {
        self.axes.len()
    }

    pub fn extent(&self, axis: usize) -> usize {
        self.axes[axis].1
    }

    pub fn extents(&self) -> Vec<usize> {
        self.axes.iter().map(|(_, e)| *e).collect()
    }

    pub fn dim(&self) -> usize {
        self.axes.iter().map(|(_, e)| *e).product()
    }

    /// Index of the first axis carrying `label`.
    pub fn find(&self, label: Axis) -> Option<usize> {
        self.axes.iter().position(|(a, _)| *a == label)
    }

    /// Two shapes compose when they describe the same labeled layout, or when
    /// either side is an unlabeled flat vector of the same length.
    pub fn compatible(&self, other: &DomainShape) -> bool {
        if self.dim() != other.dim() {
            return false;
        }
        if self.is_flat() || other.is_flat() {
            return true;
        }
        self.axes == other.axes
    }

    pub fn is_flat(&self) -> bool {
        self.axes.len() == 1 && self.axes[0].0 == Axis::Flat
    }

    /// Concatenation of axes, the domain of a tensor product.
    pub fn product(&self, other: &DomainShape) -> DomainShape {
        let mut axes = self.axes.clone();
        axes.extend_from_slice(&other.axes);
        DomainShape { axes }
    }

    /// Shape left after removing the given axes.
    pub fn without(&self, drop: &[usize]) -> DomainShape {
        let axes: Vec<_> = self
            .axes
            .iter()
            .enumerate()
            .filter(|(i, _)| !drop.contains(i))
            .map(|(_, a)| *a)
            .collect();
        if axes.is_empty() {
            DomainShape::flat(1)
        } else {
            DomainShape { axes }
        }
    }
}

impl fmt::Display for DomainShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("[")?;
        for (i, (a, e)) in self.axes.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a} {e}")?;
        }
        f.write_str("]")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dim_is_product_of_extents() {
        let s = DomainShape::state(2, 3, 4);
        assert_eq!(s.dim(), 24);
        assert_eq!(s.without(&[2]), DomainShape::batch_time(2, 3));
        assert_eq!(s.without(&[0, 1, 2]), DomainShape::flat(1));
    }

    #[test]
    fn zero_extent_rejected() {
        assert!(DomainShape::new(vec![(Axis::Time, 0)]).is_err());
    }

    #[test]
    fn compatibility_rules() {
        let s = DomainShape::state(2, 3, 4);
        assert!(s.compatible(&DomainShape::flat(24)));
        assert!(!s.compatible(&DomainShape::state(3, 2, 4)));
        assert!(!s.compatible(&DomainShape::flat(23)));
    }
}
