//! Convolution layers with hand-written forward and backward passes, plus
//! the DepthToSpace pixel shuffle.

use super::tensor::{Kernel4, Tensor3};
use super::DetectorError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    /// Dense convolution over all input channels.
    Standard,
    /// Per-channel spatial convolution (groups = channels).
    Depthwise,
    /// 1x1 dense convolution.
    Pointwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// One convolution layer with SAME zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: LayerKind,
    pub kernel: Kernel4,
    pub bias: Vec<f64>,
    pub stride: usize,
    pub activation: Activation,
}

impl ConvLayer {
    /// Validates the layer against an incoming channel count and returns
    /// the outgoing channel count.
    pub fn check_chain(&self, layer_index: usize, in_channels: usize) -> Result<usize, DetectorError> {
        let (out_c, k_in, kh, kw) = self.kernel.dims();
        let mismatch = |reason: String| DetectorError::ShapeMismatch { layer: layer_index, reason };
        if self.stride == 0 {
            return Err(mismatch("stride must be positive".into()));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(mismatch(format!("kernel {kh}x{kw} must have odd extent")));
        }
        if self.bias.len() != out_c {
            return Err(mismatch(format!(
                "bias length {} does not match {out_c} output channels",
                self.bias.len()
            )));
        }
        match self.kind {
            LayerKind::Standard => {
                if k_in != in_channels {
                    return Err(mismatch(format!(
                        "kernel expects {k_in} input channels, got {in_channels}"
                    )));
                }
            }
            LayerKind::Depthwise => {
                if k_in != 1 {
                    return Err(mismatch("depthwise kernel must have input extent 1".into()));
                }
                if out_c != in_channels {
                    return Err(mismatch(format!(
                        "depthwise layer maps {in_channels} channels to {out_c}"
                    )));
                }
            }
            LayerKind::Pointwise => {
                if kh != 1 || kw != 1 {
                    return Err(mismatch(format!("pointwise kernel must be 1x1, got {kh}x{kw}")));
                }
                if k_in != in_channels {
                    return Err(mismatch(format!(
                        "kernel expects {k_in} input channels, got {in_channels}"
                    )));
                }
            }
        }
        Ok(out_c)
    }

    pub fn out_spatial(&self, in_h: usize, in_w: usize) -> (usize, usize) {
        let (_, _, kh, kw) = self.kernel.dims();
        let (ph, pw) = (kh / 2, kw / 2);
        (
            (in_h + 2 * ph - kh) / self.stride + 1,
            (in_w + 2 * pw - kw) / self.stride + 1,
        )
    }

    /// Forward pass returning pre-activation and activated outputs.
    pub fn forward(&self, input: &Tensor3) -> (Tensor3, Tensor3) {
        let (out_c, _, kh, kw) = self.kernel.dims();
        let (ph, pw) = (kh / 2, kw / 2);
        let (out_h, out_w) = self.out_spatial(input.height(), input.width());
        let mut pre = Tensor3::zeros(out_c, out_h, out_w);
        let depthwise = self.kind == LayerKind::Depthwise;
        for o in 0..out_c {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = self.bias[o];
                    let base_y = (oy * self.stride) as isize - ph as isize;
                    let base_x = (ox * self.stride) as isize - pw as isize;
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= input.height() as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= input.width() as isize {
                                continue;
                            }
                            if depthwise {
                                acc += self.kernel.get(o, 0, ky, kx)
                                    * input.get(o, iy as usize, ix as usize);
                            } else {
                                for i in 0..input.channels() {
                                    acc += self.kernel.get(o, i, ky, kx)
                                        * input.get(i, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    pre.set(o, oy, ox, acc);
                }
            }
        }
        let post = match self.activation {
            // `f64::max` would swallow NaN; divergence must stay visible.
            Activation::Relu => pre.map(|v| if v > 0.0 { v } else { v * 0.0 }),
            Activation::Linear => pre.clone(),
        };
        (pre, post)
    }

    /// Backward pass: given the loss gradient at the activated output,
    /// accumulates kernel/bias gradients and returns the input gradient.
    pub fn backward(
        &self,
        input: &Tensor3,
        pre_activation: &Tensor3,
        grad_output: &Tensor3,
        grad_kernel: &mut Kernel4,
        grad_bias: &mut [f64],
    ) -> Tensor3 {
        let (out_c, _, kh, kw) = self.kernel.dims();
        let (ph, pw) = (kh / 2, kw / 2);
        let mut grad_input = Tensor3::zeros(input.channels(), input.height(), input.width());
        let depthwise = self.kind == LayerKind::Depthwise;
        for o in 0..out_c {
            for oy in 0..grad_output.height() {
                for ox in 0..grad_output.width() {
                    let mut g = grad_output.get(o, oy, ox);
                    if self.activation == Activation::Relu && pre_activation.get(o, oy, ox) <= 0.0
                    {
                        g = 0.0;
                    }
                    if g == 0.0 {
                        continue;
                    }
                    grad_bias[o] += g;
                    let base_y = (oy * self.stride) as isize - ph as isize;
                    let base_x = (ox * self.stride) as isize - pw as isize;
                    for ky in 0..kh {
                        let iy = base_y + ky as isize;
                        if iy < 0 || iy >= input.height() as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = base_x + kx as isize;
                            if ix < 0 || ix >= input.width() as isize {
                                continue;
                            }
                            let (iy, ix) = (iy as usize, ix as usize);
                            if depthwise {
                                grad_kernel.add(o, 0, ky, kx, g * input.get(o, iy, ix));
                                grad_input.add(o, iy, ix, g * self.kernel.get(o, 0, ky, kx));
                            } else {
                                for i in 0..input.channels() {
                                    grad_kernel.add(o, i, ky, kx, g * input.get(i, iy, ix));
                                    grad_input.add(i, iy, ix, g * self.kernel.get(o, i, ky, kx));
                                }
                            }
                        }
                    }
                }
            }
        }
        grad_input
    }
}

/// Rearranges a `b^2 x H_c x W_c` tensor into `1 x (H_c b) x (W_c b)`:
/// channel `k` of cell `(cy, cx)` lands on pixel
/// `(b cy + k / b, b cx + k % b)` (row-major within each cell).
pub fn depth_to_space(cells: &Tensor3, block: usize) -> Result<Tensor3, DetectorError> {
    if cells.channels() != block * block {
        return Err(DetectorError::ShapeMismatch {
            layer: 0,
            reason: format!(
                "depth-to-space block {block} needs {} channels, got {}",
                block * block,
                cells.channels()
            ),
        });
    }
    let mut out = Tensor3::zeros(1, cells.height() * block, cells.width() * block);
    for k in 0..cells.channels() {
        let (dy, dx) = (k / block, k % block);
        for cy in 0..cells.height() {
            for cx in 0..cells.width() {
                out.set(0, cy * block + dy, cx * block + dx, cells.get(k, cy, cx));
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`depth_to_space`]: scatters pixel gradients back onto cells.
pub fn space_to_depth(pixels: &Tensor3, block: usize) -> Tensor3 {
    debug_assert_eq!(pixels.channels(), 1);
    let (h, w) = (pixels.height() / block, pixels.width() / block);
    let mut out = Tensor3::zeros(block * block, h, w);
    for k in 0..block * block {
        let (dy, dx) = (k / block, k % block);
        for cy in 0..h {
            for cx in 0..w {
                out.set(k, cy, cx, pixels.get(0, cy * block + dy, cx * block + dx));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_to_space_orders_channels_row_major() {
        let cells = Tensor3::from_data(64, 1, 1, (0..64).map(f64::from).collect());
        let out = depth_to_space(&cells, 8).unwrap();
        assert_eq!(out.height(), 8);
        assert_eq!(out.width(), 8);
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(out.get(0, y, x), (y * 8 + x) as f64);
            }
        }
        // Round trip through the adjoint.
        assert_eq!(space_to_depth(&out, 8), cells);
    }

    #[test]
    fn conv_matches_hand_computation() {
        // 3x3 identity-ish kernel on a 1-channel 3x3 input, SAME padding.
        let input = Tensor3::from_data(1, 3, 3, (1..=9).map(f64::from).collect());
        let mut kernel = Kernel4::zeros(1, 1, 3, 3);
        kernel.add(0, 0, 1, 1, 2.0); // center tap
        kernel.add(0, 0, 1, 2, 1.0); // right neighbor
        let layer = ConvLayer {
            kind: LayerKind::Standard,
            kernel,
            bias: vec![0.5],
            stride: 1,
            activation: Activation::Linear,
        };
        let (_, out) = layer.forward(&input);
        // Center pixel: 2*5 + 1*6 + 0.5 = 16.5; right edge pixel (1,2):
        // 2*6 + (right neighbor padded to 0) + 0.5 = 12.5.
        assert_eq!(out.get(0, 1, 1), 16.5);
        assert_eq!(out.get(0, 1, 2), 12.5);
    }

    #[test]
    fn strided_conv_halves_even_dims() {
        let input = Tensor3::zeros(1, 8, 6);
        let layer = ConvLayer {
            kind: LayerKind::Standard,
            kernel: Kernel4::zeros(4, 1, 3, 3),
            bias: vec![0.0; 4],
            stride: 2,
            activation: Activation::Relu,
        };
        let (h, w) = layer.out_spatial(input.height(), input.width());
        assert_eq!((h, w), (4, 3));
    }
}
