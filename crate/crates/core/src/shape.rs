//! Convolution geometry under "same-ceil" padding.
//!
//! Every strided window operation in the network produces `ceil(in / stride)`
//! outputs per axis. The zero (or `-inf`) padding needed for that is split
//! evenly, with the odd element going to the bottom/right edge.

use std::collections::HashMap;
use std::fmt;

use crate::error::{Error, Result};

/// Spatial extent `(height, width)`.
pub type Hw = (usize, usize);

/// Geometry of one 2-D convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: Hw,
    pub stride: Hw,
}

impl ConvSpec {
    pub fn new(out_channels: usize, kernel: Hw, stride: Hw) -> Result<Self> {
        if out_channels == 0 {
            return Err(Error::invalid("conv_spec", "out_channels must be positive"));
        }
        if kernel.0 == 0 || kernel.1 == 0 {
            return Err(Error::invalid("conv_spec", format!("kernel extents must be >= 1, got {kernel:?}")));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::invalid("conv_spec", format!("strides must be >= 1, got {stride:?}")));
        }
        Ok(ConvSpec { out_channels, kernel, stride })
    }

    pub fn output_hw(&self, input: Hw) -> Hw {
        (ceil_div(input.0, self.stride.0), ceil_div(input.1, self.stride.1))
    }

    /// Leading (top, left) padding for a given input extent.
    pub fn pad_before(&self, input: Hw) -> Hw {
        (
            same_ceil_pad(input.0, self.kernel.0, self.stride.0).0,
            same_ceil_pad(input.1, self.kernel.1, self.stride.1).0,
        )
    }
}

impl fmt::Display for ConvSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}@{}x{}/{}x{}",
            self.out_channels, self.kernel.0, self.kernel.1, self.stride.0, self.stride.1
        )
    }
}

pub fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// `(before, after)` padding for one axis.
pub fn same_ceil_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = ceil_div(input, stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (total / 2, total - total / 2)
}

/// Records the forward extents of strided layers so that a transposed layer
/// can recover the exact input extent it must produce.
///
/// `ceil(in / stride)` is not injective, so the inverse only exists for traces
/// that were registered.
#[derive(Clone, Debug, Default)]
pub struct ShapeTable {
    entries: HashMap<(String, Hw), Hw>,
}

impl ShapeTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a forward pass of `layer` on `input` and returns its output extent.
    pub fn register(&mut self, layer: &str, spec: &ConvSpec, input: Hw) -> Hw {
        let out = spec.output_hw(input);
        self.entries.insert((layer.to_string(), out), input);
        out
    }

    /// Input extent that produced `output` when `layer` ran forward.
    pub fn invert(&self, layer: &str, output: Hw) -> Result<Hw> {
        self.entries
            .get(&(layer.to_string(), output))
            .copied()
            .ok_or_else(|| Error::UnregisteredTrace(format!("{layer} with output {output:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn padding_puts_extra_on_trailing_edge() {
        assert_eq!(same_ceil_pad(2, 2, 1), (0, 1));
        assert_eq!(same_ceil_pad(80, 5, 2), (1, 2));
        assert_eq!(same_ceil_pad(20, 4, 1), (1, 2));
        assert_eq!(same_ceil_pad(5, 2, 5), (0, 0));
        assert_eq!(same_ceil_pad(7, 1, 3), (0, 0));
    }

    #[test]
    fn rejects_degenerate_specs() {
        assert!(ConvSpec::new(4, (0, 1), (1, 1)).is_err());
        assert!(ConvSpec::new(4, (1, 1), (1, 0)).is_err());
        assert!(ConvSpec::new(0, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn shape_table_inverts_registered_only() {
        let spec = ConvSpec::new(64, (5, 5), (2, 2)).unwrap();
        let mut t = ShapeTable::new();
        assert_eq!(t.register("conv1", &spec, (80, 20)), (40, 10));
        assert_eq!(t.invert("conv1", (40, 10)).unwrap(), (80, 20));
        assert!(matches!(t.invert("conv1", (20, 5)), Err(Error::UnregisteredTrace(_))));
        assert!(t.invert("conv2", (40, 10)).is_err());
    }
}
