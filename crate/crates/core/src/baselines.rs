//! Non-learned axial interpolation between projections.

use crate::error::{Error, Result};
use crate::volume::{slice_depth, ProjectionStack, Volume};

fn check(stack: &ProjectionStack, depth_out: usize) -> Result<()> {
    if stack.len() < 2 {
        return Err(Error::InvalidArgument(format!("interpolation needs >= 2 projections, got {}", stack.len())));
    }
    if depth_out == 0 {
        return Err(Error::InvalidArgument("output depth must be >= 1".into()));
    }
    Ok(())
}

/// Index `i` with `c[i] <= z < c[i + 1]` and the local parameter `u`, or the
/// held endpoint when `z` lies outside the centres.
enum Bracket {
    Hold(usize),
    Between(usize, f64),
}

fn bracket(centers: &[f64], z: f64) -> Bracket {
    let last = centers.len() - 1;
    if z <= centers[0] {
        return Bracket::Hold(0);
    }
    if z >= centers[last] {
        return Bracket::Hold(last);
    }
    let i = centers.partition_point(|&c| c <= z) - 1;
    Bracket::Between(i, (z - centers[i]) / (centers[i + 1] - centers[i]))
}

fn assemble(stack: &ProjectionStack, depth_out: usize, name: &str, f: impl Fn(f64, usize) -> f32) -> Result<Volume> {
    let plane = stack.height() * stack.width();
    let mut data = Vec::with_capacity(depth_out * plane);
    for k in 0..depth_out {
        let z = slice_depth(k, depth_out).value();
        data.extend((0..plane).map(|p| f(z, p)));
    }
    Volume::new(name, [depth_out, stack.height(), stack.width()], data)
}

/// Distance-weighted average of the two bracketing projections.
pub fn interp_linear(stack: &ProjectionStack, depth_out: usize) -> Result<Volume> {
    check(stack, depth_out)?;
    let (c, p) = (stack.axial_centers(), stack.projections());
    assemble(stack, depth_out, "linear", |z, px| match bracket(c, z) {
        Bracket::Hold(i) => p[i].data[px],
        Bracket::Between(i, u) => ((1.0 - u) * p[i].data[px] as f64 + u * p[i + 1].data[px] as f64) as f32,
    })
}

/// Cubic Hermite interpolation with finite-difference slopes, clamped to `[0, 1]`.
pub fn interp_cubic(stack: &ProjectionStack, depth_out: usize) -> Result<Volume> {
    check(stack, depth_out)?;
    let (c, p) = (stack.axial_centers(), stack.projections());
    let last = c.len() - 1;
    let value = |i: usize, px: usize| p[i].data[px] as f64;
    let slope = |i: usize, px: usize| {
        let (a, b) = (i.saturating_sub(1), (i + 1).min(last));
        (value(b, px) - value(a, px)) / (c[b] - c[a])
    };
    assemble(stack, depth_out, "cubic", |z, px| match bracket(c, z) {
        Bracket::Hold(i) => p[i].data[px],
        Bracket::Between(i, t) => {
            let h = c[i + 1] - c[i];
            let (t2, t3) = (t * t, t * t * t);
            let v = (2.0 * t3 - 3.0 * t2 + 1.0) * value(i, px)
                + (t3 - 2.0 * t2 + t) * h * slope(i, px)
                + (-2.0 * t3 + 3.0 * t2) * value(i + 1, px)
                + (t3 - t2) * h * slope(i + 1, px);
            v.clamp(0.0, 1.0) as f32
        }
    })
}
