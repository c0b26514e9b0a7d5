//! Full-frame novel-view synthesis: plane-sweep features, disparity
//! estimation, backward warping of every input view, color prediction.

use crate::error::{Error, Result};
use crate::lfio::{LightField, ViewCoord};
use crate::nets::{assemble_color_features, color_forward, disparity_forward, Model};
use crate::sweep::{compute_features, Region};
use crate::tensor::{Real, Tensor};
use crate::warp::{backward_warp, DisparityMap};

pub struct Synthesis<T = f32> {
    /// RGB image at the novel view; smaller than the inputs by the networks'
    /// valid-convolution margin on each side.
    pub image: Tensor<T>,
    /// The intermediate disparity estimate (color-net margin larger than the
    /// image).
    pub disparity: DisparityMap<T>,
}

/// Estimate the image at an arbitrary (fractional, possibly out-of-hull)
/// angular position from the four corner views.
pub fn synthesize<T: Real>(model: &Model<T>, lf: &LightField<T>, q: ViewCoord) -> Result<Synthesis<T>> {
    if lf.grid_size != model.grid_size {
        return Err(Error::Config(format!(
            "model was trained for grid size {}, light field has {}",
            model.grid_size, lf.grid_size
        )));
    }
    let corners = lf.corner_views()?;
    let (h, w, _) = corners[0].shape();
    let features = compute_features(lf, q, Region::full(h, w), &model.sweep)?;
    let disparity = disparity_forward(&features, &model.disparity)?;

    let offsets: Vec<(f64, f64)> = lf.corners().iter().map(|&p| q.offset_from(p)).collect();
    let warped = corners
        .iter()
        .zip(&offsets)
        .map(|(src, &off)| backward_warp(src, &disparity, off))
        .collect::<Result<Vec<_>>>()?;
    let color_features = assemble_color_features(&warped, &disparity, q, model.grid_size)?;
    let image = color_forward(&color_features, &model.color)?;
    Ok(Synthesis { image, disparity })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lfio::GridCoord;
    use crate::nets::NetworkParams;
    use crate::sweep::SweepConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn synthesis_shapes_and_fractional_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sweep = SweepConfig::new(4, -1.0, 1.0).unwrap();
        let model: Model<f32> = Model {
            disparity: NetworkParams::disparity(4, &[5, 3, 1], &[4, 4], &mut rng).unwrap(),
            color: NetworkParams::color(4, &[5, 3, 1], &[4, 4], &mut rng).unwrap(),
            sweep,
            grid_size: 8,
        };
        let mut lf = LightField::new(8);
        for id in LightField::<f32>::corner_ids(8) {
            lf.views.insert(
                id,
                Tensor::from_fn(40, 44, 3, |y, x, c| ((y * 7 + x * 3 + c) % 13) as f32 / 13.0),
            );
        }
        // fractional position off the integer grid works
        let out = synthesize(&model, &lf, ViewCoord::new(3.5, 2.25)).unwrap();
        assert_eq!(out.disparity.values.shape(), (34, 38, 1));
        assert_eq!(out.image.shape(), (28, 32, 3));

        // grid-size mismatch is rejected
        let mut lf2 = lf.clone();
        lf2.grid_size = 4;
        lf2.views = LightField::<f32>::corner_ids(4)
            .into_iter()
            .map(|id| (id, lf.views[&GridCoord::new(0, 0)].clone()))
            .collect();
        assert!(synthesize(&model, &lf2, ViewCoord::new(1.0, 1.0)).is_err());
    }
}
