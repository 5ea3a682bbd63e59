//! Reference scale configurations.
//!
//! Window sizes are in feature cells with a 14-pixel patch, so 224 px gives
//! a 16×16 grid and 448 px a 32×32 grid.

use crate::assembly::CosConfig;

/// A named configuration together with its expected token total.
#[derive(Debug, Clone, Copy)]
pub struct Preset {
    pub name: &'static str,
    pub resolution: usize,
    pub scales: &'static [(usize, usize)],
    pub tokens: usize,
}

impl Preset {
    pub fn config(&self) -> CosConfig {
        CosConfig::new(self.resolution, self.scales)
    }
}

/// Token-scaling ablation rows: baselines, then window, resolution and
/// compound scaling.
#[rustfmt::skip]
pub const SCALING_TABLE: [Preset; 11] = [
    Preset { name: "baseline-224", resolution: 224, scales: &[(16, 16), (4, 4)], tokens: 80 },
    Preset { name: "baseline-448", resolution: 448, scales: &[(32, 16), (8, 4)], tokens: 80 },
    Preset { name: "win-global", resolution: 224, scales: &[(16, 16), (8, 16), (4, 4)], tokens: 144 },
    Preset { name: "win-local", resolution: 224, scales: &[(16, 16), (2, 4)], tokens: 272 },
    Preset { name: "win-both", resolution: 224, scales: &[(16, 16), (8, 16), (2, 4)], tokens: 336 },
    Preset { name: "res-global", resolution: 448, scales: &[(32, 16), (16, 16), (8, 4)], tokens: 144 },
    Preset { name: "res-local", resolution: 448, scales: &[(32, 16), (4, 4)], tokens: 272 },
    Preset { name: "res-both", resolution: 448, scales: &[(32, 16), (16, 16), (4, 4)], tokens: 336 },
    Preset { name: "com-global", resolution: 448, scales: &[(32, 16), (8, 16), (4, 4)], tokens: 528 },
    Preset { name: "com-local", resolution: 448, scales: &[(32, 16), (16, 16), (2, 4)], tokens: 1104 },
    Preset { name: "com-both", resolution: 448, scales: &[(32, 16), (8, 16), (2, 4)], tokens: 1296 },
];

pub const PRETRAIN_32: Preset = Preset {
    name: "pretrain-32",
    resolution: 224,
    scales: &[(16, 16), (8, 4)],
    tokens: 32,
};

/// The local scale uses two queries per 4×4 window.
pub const PRETRAIN_48: Preset = Preset {
    name: "pretrain-48",
    resolution: 224,
    scales: &[(16, 16), (4, 2)],
    tokens: 48,
};

pub const PRETRAIN_80: Preset = SCALING_TABLE[0];

pub const FINETUNE_528: Preset = SCALING_TABLE[8];

pub const FINETUNE_784: Preset = Preset {
    name: "finetune-784",
    resolution: 448,
    scales: &[(32, 16), (8, 16), (2, 2)],
    tokens: 784,
};

pub const FINETUNE_1296: Preset = SCALING_TABLE[10];

/// Pre-train → fine-tune pairs.
pub const SCALING_PLANS: [(Preset, Preset); 3] = [
    (PRETRAIN_32, FINETUNE_528),
    (PRETRAIN_48, FINETUNE_784),
    (PRETRAIN_80, FINETUNE_1296),
];

pub fn find(name: &str) -> Option<Preset> {
    SCALING_TABLE
        .iter()
        .chain([PRETRAIN_32, PRETRAIN_48, FINETUNE_784].iter())
        .find(|p| p.name == name)
        .copied()
}
