//! Confusion matrices published with the method (rows true, columns
//! predicted) and the headline numbers printed next to them.

pub const ISIC_CLASSES: [&str; 7] = ["MEL", "NV", "BCC", "AK", "BKL", "DF", "VASC"];

pub fn isic_rows() -> Vec<Vec<u64>> {
    vec![
        vec![258, 58, 3, 4, 11, 0, 1],
        vec![32, 1987, 7, 0, 11, 2, 0],
        vec![0, 2, 135, 2, 0, 0, 0],
        vec![1, 0, 9, 68, 9, 0, 0],
        vec![23, 27, 7, 6, 261, 0, 0],
        vec![1, 6, 2, 2, 3, 25, 0],
        vec![0, 4, 0, 0, 0, 1, 37],
    ]
}

pub const ISIC_ACCURACY: f64 = 0.9221;
pub const ISIC_MACRO_F1: f64 = 0.8530;

pub const APTOS_CLASSES: [&str; 5] = ["No DR", "Mild", "Moderate", "Severe", "Proliferative"];

pub fn aptos_rows() -> Vec<Vec<u64>> {
    vec![
        vec![516, 4, 0, 0, 0],
        vec![8, 82, 35, 0, 1],
        vec![1, 12, 274, 14, 5],
        vec![0, 0, 25, 30, 6],
        vec![0, 3, 26, 9, 48],
    ]
}

pub const APTOS_ACCURACY: f64 = 0.8644;
pub const APTOS_MACRO_F1: f64 = 0.7433;

/// Macro-F1 straight from the definitions, sharing no code with the crate.
pub fn reference_macro_f1(rows: &[Vec<u64>]) -> f64 {
    let k = rows.len();
    let mut total = 0.0;
    for c in 0..k {
        let tp = rows[c][c] as f64;
        let predicted: u64 = rows.iter().map(|r| r[c]).sum();
        let actual: u64 = rows[c].iter().sum();
        let p = if predicted == 0 {
            0.0
        } else {
            tp / predicted as f64
        };
        let r = if actual == 0 { 0.0 } else { tp / actual as f64 };
        total += if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        };
    }
    total / k as f64
}

pub fn reference_accuracy(rows: &[Vec<u64>]) -> f64 {
    let trace: u64 = (0..rows.len()).map(|i| rows[i][i]).sum();
    let total: u64 = rows.iter().flatten().sum();
    trace as f64 / total as f64
}
