use std::f64::consts::PI;

/// Cosine annealing with warm restarts every `cycle_epochs`:
/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·t/cycle))`, `t = epochs mod cycle`.
pub fn cosine_lr(epoch_fraction: f64, lr_max: f64, lr_min: f64, cycle_epochs: f64) -> f64 {
    let t = epoch_fraction.max(0.0).rem_euclid(cycle_epochs);
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (PI * t / cycle_epochs).cos())
}
