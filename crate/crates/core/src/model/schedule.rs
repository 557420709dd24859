//! Encoder layer schedule and the shape traces it implies.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::shape::{ConvSpec, Hw, ShapeTable};

pub const LAYERS: usize = 10;
pub const MEL_BINS: usize = 80;
pub const MEL_FRAMES: usize = 20;
pub const VIDEO_FRAMES: usize = 5;
pub const VIDEO_SIDE: usize = 80;

/// Filters per encoder layer at full width.
pub const FILTERS: [usize; LAYERS] = [64, 64, 128, 128, 256, 256, 512, 512, 1024, 1024];
pub const KERNELS: [Hw; LAYERS] = [(5, 5), (4, 4), (4, 4), (4, 4), (2, 2), (2, 2), (2, 2), (2, 2), (2, 2), (2, 2)];
pub const AUDIO_STRIDES: [Hw; LAYERS] = [(2, 2), (1, 1), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1), (1, 1), (1, 5), (1, 1)];
pub const VIDEO_POOLS: [Hw; LAYERS] = [(2, 4), (1, 2), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1), (1, 1), (1, 5), (1, 1)];

/// Where the two modalities meet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    /// Fuse once after the first encoder layer, then a single branch.
    EarlyFusion,
    /// Fuse once after the last encoder layer; no skip connections.
    LateFusion,
    /// Fuse at the bottleneck only; audio-only skip connections.
    IntermediateBottleneck,
    /// Inject video features into every decoder layer.
    IntermediateDecoder,
    /// Fuse after every encoder layer while both branches continue unfused.
    MultiLayer,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 5] = [
        FusionStrategy::EarlyFusion,
        FusionStrategy::LateFusion,
        FusionStrategy::IntermediateBottleneck,
        FusionStrategy::IntermediateDecoder,
        FusionStrategy::MultiLayer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionStrategy::EarlyFusion => "early",
            FusionStrategy::LateFusion => "late",
            FusionStrategy::IntermediateBottleneck => "mid-bottleneck",
            FusionStrategy::IntermediateDecoder => "mid-decoder",
            FusionStrategy::MultiLayer => "multilayer",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&s| s == self).unwrap()
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid("strategy", format!("unknown strategy `{s}` (expected early, late, mid-bottleneck, mid-decoder or multilayer)")))
    }
}

/// `(channels, height, width)` of one activation.
pub type Chw = (usize, usize, usize);

/// Which encoder branch a layer belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Audio,
    Video,
}

/// Network topology: fusion strategy plus channel width divisor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub strategy: FusionStrategy,
    pub width_divisor: usize,
}

impl Architecture {
    pub fn new(strategy: FusionStrategy, width_divisor: usize) -> Result<Self> {
        if width_divisor == 0 || FILTERS.iter().any(|f| f % width_divisor != 0) {
            return Err(Error::invalid(
                "architecture",
                format!("width divisor {width_divisor} must divide every filter count (1, 2, 4, ..., 64)"),
            ));
        }
        Ok(Architecture { strategy, width_divisor })
    }

    /// Full-width network with multi-layer fusion.
    pub fn paper() -> Self {
        Architecture { strategy: FusionStrategy::MultiLayer, width_divisor: 1 }
    }

    /// Channel width after encoder layer `layer` (1-based). Layer 0 is the
    /// branch input.
    pub fn channels(&self, branch: Branch, layer: usize) -> usize {
        match layer {
            0 => match branch {
                Branch::Audio => 1,
                Branch::Video => VIDEO_FRAMES,
            },
            l => FILTERS[l - 1] / self.width_divisor,
        }
    }

    /// Convolution of encoder layer `layer` (1-based). Video convolutions are
    /// stride 1; their downsampling happens in the max-pool.
    pub fn conv_spec(&self, branch: Branch, layer: usize) -> ConvSpec {
        let stride = match branch {
            Branch::Audio => AUDIO_STRIDES[layer - 1],
            Branch::Video => (1, 1),
        };
        ConvSpec { out_channels: self.channels(branch, layer), kernel: KERNELS[layer - 1], stride }
    }

    pub fn pool(&self, layer: usize) -> Hw {
        VIDEO_POOLS[layer - 1]
    }

    pub fn input_shape(branch: Branch) -> Chw {
        match branch {
            Branch::Audio => (1, MEL_BINS, MEL_FRAMES),
            Branch::Video => (VIDEO_FRAMES, VIDEO_SIDE, VIDEO_SIDE),
        }
    }

    /// Shape after every layer, index 0 being the branch input.
    pub fn trace(&self, branch: Branch) -> Vec<Chw> {
        let mut out = vec![Self::input_shape(branch)];
        for layer in 1..=LAYERS {
            let (_, h, w) = *out.last().unwrap();
            let hw = match branch {
                Branch::Audio => self.conv_spec(branch, layer).output_hw((h, w)),
                Branch::Video => {
                    let (ph, pw) = self.pool(layer);
                    (h.div_ceil(ph), w.div_ceil(pw))
                }
            };
            out.push((self.channels(branch, layer), hw.0, hw.1));
        }
        out
    }

    /// Forward extents of the audio encoder, used to size the decoder's
    /// transposed convolutions.
    pub fn shape_table(&self) -> ShapeTable {
        let mut table = ShapeTable::new();
        for (layer, &(_, h, w)) in self.trace(Branch::Audio).iter().enumerate().take(LAYERS) {
            table.register(&audio_layer_key(layer + 1), &self.conv_spec(Branch::Audio, layer + 1), (h, w));
        }
        table
    }

    /// Number of fusion blocks the strategy instantiates.
    pub fn fusion_block_count(&self) -> usize {
        match self.strategy {
            FusionStrategy::MultiLayer | FusionStrategy::IntermediateDecoder => LAYERS,
            _ => 1,
        }
    }

    /// Encoder layers whose video branch exists.
    pub fn video_layers(&self) -> usize {
        match self.strategy {
            FusionStrategy::EarlyFusion => 1,
            _ => LAYERS,
        }
    }

    /// Whether the decoder concatenates encoder features before each layer.
    pub fn has_skips(&self) -> bool {
        matches!(
            self.strategy,
            FusionStrategy::MultiLayer | FusionStrategy::EarlyFusion | FusionStrategy::IntermediateBottleneck
        )
    }
}

pub(crate) fn audio_layer_key(layer: usize) -> String {
    format!("audio_enc.{layer}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_trace_matches_table() {
        let t = Architecture::paper().trace(Branch::Audio);
        let expected = [
            (1, 80, 20),
            (64, 40, 10),
            (64, 40, 10),
            (128, 20, 5),
            (128, 20, 5),
            (256, 10, 5),
            (256, 10, 5),
            (512, 5, 5),
            (512, 5, 5),
            (1024, 5, 1),
            (1024, 5, 1),
        ];
        assert_eq!(t, expected);
    }

    #[test]
    fn video_trace_matches_table() {
        let t = Architecture::paper().trace(Branch::Video);
        let expected = [
            (5, 80, 80),
            (64, 40, 20),
            (64, 40, 10),
            (128, 20, 5),
            (128, 20, 5),
            (256, 10, 5),
            (256, 10, 5),
            (512, 5, 5),
            (512, 5, 5),
            (1024, 5, 1),
            (1024, 5, 1),
        ];
        assert_eq!(t, expected);
    }

    #[test]
    fn branches_agree_from_layer_two() {
        for d in [1, 2, 4, 8, 16] {
            let arch = Architecture::new(FusionStrategy::MultiLayer, d).unwrap();
            let (a, v) = (arch.trace(Branch::Audio), arch.trace(Branch::Video));
            assert_eq!(a[2..], v[2..]);
            assert_eq!(v[1].2, 2 * a[1].2);
        }
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(KERNELS[0], (5, 5));
        assert!(KERNELS[4..].iter().all(|&k| k == (2, 2)));
    }

    #[test]
    fn width_divisor_validation() {
        assert!(Architecture::new(FusionStrategy::LateFusion, 3).is_err());
        assert!(Architecture::new(FusionStrategy::LateFusion, 0).is_err());
        assert_eq!(Architecture::new(FusionStrategy::LateFusion, 16).unwrap().channels(Branch::Audio, 10), 64);
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.name().parse::<FusionStrategy>().unwrap(), s);
            assert_eq!(FusionStrategy::from_index(s.index()), Some(s));
        }
        assert!("bogus".parse::<FusionStrategy>().is_err());
    }
}
