//! Linear warmup followed by cosine decay to zero.

use std::f64::consts::PI;

/// Learning rate after `step` updates out of `total`.
///
/// Rises linearly from 0 to `base` over `warmup` steps, then follows half a
/// cosine down to 0 at `total`. Steps past `total` stay at 0.
pub fn lr_schedule(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    if step >= total {
        return 0.0;
    }
    let progress = (step - warmup) as f64 / (total - warmup) as f64;
    0.5 * base * (1.0 + (PI * progress).cos())
}
