use ndarray::Array4;

use crate::error::{DclsError, Result};
use crate::grid::PositionTensor;

/// Pairwise repulsion between the elements of each kernel slice.
///
/// For every (out, in) slice the penalty is `sum_{k<l} max(0, 1 - |p_k - p_l| / radius)^2`,
/// averaged over slices. Returns the loss and its gradient with respect to the positions.
/// Coincident pairs contribute 1 and a zero gradient (the direction is undefined there).
pub fn repulsive_loss(positions: &PositionTensor, radius: f64) -> Result<(f64, PositionTensor)> {
    if radius.is_nan() || radius <= 0.0 {
        return Err(DclsError::Precondition(format!(
            "radius must be > 0, got {radius}"
        )));
    }
    let p = &positions.0;
    let [ndims, cout, cin, m] = [p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]];
    let slices = (cout * cin) as f64;
    let mut grad = Array4::zeros(p.raw_dim());
    let mut loss = 0.0;
    for o in 0..cout {
        for i in 0..cin {
            for k in 0..m {
                for l in k + 1..m {
                    let dist = (0..ndims)
                        .map(|d| (p[[d, o, i, k]] - p[[d, o, i, l]]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    if dist >= radius {
                        continue;
                    }
                    let hinge = 1.0 - dist / radius;
                    loss += hinge * hinge;
                    if dist == 0.0 {
                        continue;
                    }
                    // d/dp_k of hinge^2 = -2 hinge / radius * (p_k - p_l) / dist
                    let scale = -2.0 * hinge / (radius * dist * slices);
                    for d in 0..ndims {
                        let diff = p[[d, o, i, k]] - p[[d, o, i, l]];
                        grad[[d, o, i, k]] += scale * diff;
                        grad[[d, o, i, l]] -= scale * diff;
                    }
                }
            }
        }
    }
    Ok((loss / slices, PositionTensor(grad)))
}
