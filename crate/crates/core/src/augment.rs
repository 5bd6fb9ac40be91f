//! Weak and strong views of an input.
//!
//! Images: weak = random translation (zero-padded crop) + horizontal flip;
//! strong = weak + per-channel color jitter + cutout. Vector inputs get
//! additive Gaussian noise instead, with feature dropout for the strong view.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Batch, InputShape};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Max translation in pixels; `None` uses height / 8.
    pub crop_padding: Option<usize>,
    pub flip: bool,
    /// Multiplicative and additive jitter amplitude per channel.
    pub jitter: f32,
    /// Cutout square side as a fraction of the image side.
    pub cutout: f32,
    pub vector_weak_noise: f32,
    pub vector_strong_noise: f32,
    pub vector_dropout: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_padding: None,
            flip: true,
            jitter: 0.4,
            cutout: 0.25,
            vector_weak_noise: 0.05,
            vector_strong_noise: 0.25,
            vector_dropout: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum View {
    Weak,
    Strong,
}

/// Both views of the same batch; shapes match the input.
pub struct DualView {
    pub weak: Batch,
    pub strong: Batch,
}

impl AugmentConfig {
    pub fn apply(&self, batch: &mut Batch, view: View, rng: &mut Rng) {
        if batch.shape.is_vector() {
            self.vector_view(batch, view, rng);
            return;
        }
        for i in 0..batch.n {
            let shape = batch.shape;
            let item = batch.item_mut(i);
            self.translate_flip(item, shape, rng);
            if view == View::Strong {
                self.jitter(item, shape, rng);
                self.cutout(item, shape, rng);
            }
        }
    }

    pub fn dual(&self, batch: &Batch, rng: &mut Rng) -> DualView {
        let mut weak = batch.clone();
        self.apply(&mut weak, View::Weak, rng);
        let mut strong = batch.clone();
        self.apply(&mut strong, View::Strong, rng);
        DualView { weak, strong }
    }

    fn translate_flip(&self, item: &mut [f32], shape: InputShape, rng: &mut Rng) {
        let (h, w) = (shape.height, shape.width);
        let pad = self.crop_padding.unwrap_or((h / 8).max(1)) as i64;
        let dy = rng.random_range(-pad..=pad) as isize;
        let dx = rng.random_range(-pad..=pad) as isize;
        let flip = self.flip && rng.random_bool(0.5);
        if dy == 0 && dx == 0 && !flip {
            return;
        }
        let src = item.to_vec();
        for c in 0..shape.channels {
            let plane = &src[c * h * w..(c + 1) * h * w];
            let out = &mut item[c * h * w..(c + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let sx0 = if flip { w - 1 - x } else { x };
                    let sy = y as isize + dy;
                    let sx = sx0 as isize + dx;
                    out[y * w + x] = if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                        0.0
                    } else {
                        plane[sy as usize * w + sx as usize]
                    };
                }
            }
        }
    }

    fn jitter(&self, item: &mut [f32], shape: InputShape, rng: &mut Rng) {
        if self.jitter <= 0.0 {
            return;
        }
        let hw = shape.height * shape.width;
        for plane in item.chunks_mut(hw) {
            let scale = 1.0 + rng.random_range(-self.jitter..self.jitter);
            let shift = rng.random_range(-self.jitter..self.jitter);
            for v in plane {
                *v = *v * scale + shift;
            }
        }
    }

    fn cutout(&self, item: &mut [f32], shape: InputShape, rng: &mut Rng) {
        let side = ((shape.height as f32 * self.cutout).round() as usize).min(shape.height);
        if side == 0 {
            return;
        }
        let (h, w) = (shape.height, shape.width);
        let cy = rng.random_range(0..h);
        let cx = rng.random_range(0..w);
        let y0 = cy.saturating_sub(side / 2);
        let x0 = cx.saturating_sub(side / 2);
        for plane in item.chunks_mut(h * w) {
            for y in y0..(y0 + side).min(h) {
                for x in x0..(x0 + side).min(w) {
                    plane[y * w + x] = 0.0;
                }
            }
        }
    }

    fn vector_view(&self, batch: &mut Batch, view: View, rng: &mut Rng) {
        let sigma = match view {
            View::Weak => self.vector_weak_noise,
            View::Strong => self.vector_strong_noise,
        };
        let normal = Normal::new(0.0f32, sigma.max(0.0)).expect("finite sigma");
        for v in &mut batch.data {
            if view == View::Strong && rng.random::<f32>() < self.vector_dropout {
                *v = 0.0;
            } else if sigma > 0.0 {
                *v += normal.sample(rng);
            }
        }
    }
}
