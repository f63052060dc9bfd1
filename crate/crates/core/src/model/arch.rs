//! Desk-scale architectures.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{Conv2d, Linear};
use super::network::{Block, Layer, Network, Residual};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArchSpec {
    /// Stem convolution plus one residual unit per width; every block after
    /// the first halves the resolution.
    ResNet { widths: Vec<usize> },
    /// One conv+ReLU per width; every block after the first halves the resolution.
    Plain { widths: Vec<usize> },
}

impl ArchSpec {
    pub fn desk_resnet() -> Self {
        ArchSpec::ResNet { widths: vec![8, 16, 32, 32] }
    }

    pub fn desk_plain() -> Self {
        ArchSpec::Plain { widths: vec![8, 16, 32, 32] }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchSpec::ResNet { .. } => "resnet",
            ArchSpec::Plain { .. } => "plain",
        }
    }

    pub fn widths(&self) -> &[usize] {
        match self {
            ArchSpec::ResNet { widths } | ArchSpec::Plain { widths } => widths,
        }
    }

    /// Builds a freshly initialized network. The classifier head starts at
    /// zero so an untrained model emits equal logits.
    pub fn build(&self, in_channels: usize, classes: usize, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let widths = self.widths();
        let mut blocks = Vec::with_capacity(widths.len());
        let mut prev = in_channels;
        for (i, &w) in widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            let layers = match self {
                ArchSpec::Plain { .. } => {
                    vec![Layer::Conv(Conv2d::he(prev, w, 3, stride, 1, 1.0, &mut rng)), Layer::Relu]
                }
                ArchSpec::ResNet { .. } => {
                    let mut layers = Vec::new();
                    let mut unit_in = prev;
                    let mut unit_stride = stride;
                    if i == 0 {
                        layers.push(Layer::Conv(Conv2d::he(prev, w, 3, 1, 1, 1.0, &mut rng)));
                        layers.push(Layer::Relu);
                        unit_in = w;
                        unit_stride = 1;
                    }
                    let branch = vec![
                        Layer::Conv(Conv2d::he(unit_in, w, 3, unit_stride, 1, 1.0, &mut rng)),
                        Layer::Relu,
                        // damped so the un-normalized residual sum stays well scaled
                        Layer::Conv(Conv2d::he(w, w, 3, 1, 1, 0.5, &mut rng)),
                    ];
                    let shortcut = (unit_in != w || unit_stride != 1)
                        .then(|| Conv2d::he(unit_in, w, 1, unit_stride, 0, 1.0, &mut rng));
                    layers.push(Layer::Residual(Residual { branch, shortcut }));
                    layers.push(Layer::Relu);
                    layers
                }
            };
            blocks.push(Block { name: format!("block{}", i + 1), layers });
            prev = w;
        }
        Network { blocks, head: Linear::zeros(prev, classes) }
    }
}
