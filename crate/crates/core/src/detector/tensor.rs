//! Dense CHW tensors for the convolutional detector.

/// A channels-height-width tensor of activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, data: vec![0.0; channels * height * width] }
    }

    pub fn from_data(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * height * width, "tensor data length");
        Self { channels, height, width, data }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    #[inline]
    pub fn add(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] += v;
    }

    /// One channel as a contiguous row-major plane.
    pub fn channel(&self, c: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Convolution kernel indexed `[out][in][ky][kx]`. Depthwise kernels use
/// an `in` extent of 1 (each output channel reads one input channel).
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel4 {
    out_channels: usize,
    in_channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Kernel4 {
    pub fn zeros(out_channels: usize, in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            out_channels,
            in_channels,
            height,
            width,
            data: vec![0.0; out_channels * in_channels * height * width],
        }
    }

    pub fn from_data(
        out_channels: usize,
        in_channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Self {
        assert_eq!(data.len(), out_channels * in_channels * height * width, "kernel length");
        Self { out_channels, in_channels, height, width, data }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.out_channels, self.in_channels, self.height, self.width)
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kernel_height(&self) -> usize {
        self.height
    }

    pub fn kernel_width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, o: usize, i: usize, ky: usize, kx: usize) -> f64 {
        self.data[((o * self.in_channels + i) * self.height + ky) * self.width + kx]
    }

    #[inline]
    pub fn add(&mut self, o: usize, i: usize, ky: usize, kx: usize, v: f64) {
        self.data[((o * self.in_channels + i) * self.height + ky) * self.width + kx] += v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
