//! Published reference figures for the original DeepDefacer release and its
//! baseline 3D U-Net, reported alongside measured values for context. Desk
//! runs on synthetic data are not expected to reproduce them.

#[derive(Debug, Clone, Copy)]
pub struct ReferenceRow {
    pub name: &'static str,
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub parameters: u64,
}

pub const DEEPDEFACER: ReferenceRow = ReferenceRow {
    name: "deepdefacer",
    dice: 0.854,
    precision: 0.916,
    recall: 0.805,
    parameters: 1_412_197,
};

pub const BASELINE_UNET3D: ReferenceRow = ReferenceRow {
    name: "baseline 3D U-Net",
    dice: 0.413,
    precision: 0.132,
    recall: 0.882,
    parameters: 19_069_955,
};
