//! Binary network weights format.
//!
//! Layout (all integers little-endian):
//! magic `TPNW`, format version u32, layer count u32, then per layer:
//! kind u8 (0 standard / 1 depthwise / 2 pointwise), stride u8,
//! activation u8 (0 relu / 1 linear), four u32 kernel dims
//! (out, in, kh, kw), kernel values f32, bias values f32.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::layers::{Activation, ConvLayer, LayerKind};
use super::tensor::Kernel4;
use super::{DetectorError, NetworkWeights};

const MAGIC: [u8; 4] = *b"TPNW";
const VERSION: u32 = 1;

fn io_error(path: &Path, source: std::io::Error) -> DetectorError {
    DetectorError::Io { path: path.display().to_string(), source }
}

/// Serializes weights to `path`, rounding values to 32-bit floats.
pub fn save_weights(path: &Path, weights: &NetworkWeights) -> Result<(), DetectorError> {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(weights.layers().len() as u32).to_le_bytes());
    for layer in weights.layers() {
        let kind = match layer.kind {
            LayerKind::Standard => 0u8,
            LayerKind::Depthwise => 1,
            LayerKind::Pointwise => 2,
        };
        let activation = match layer.activation {
            Activation::Relu => 0u8,
            Activation::Linear => 1,
        };
        bytes.push(kind);
        bytes.push(layer.stride as u8);
        bytes.push(activation);
        let (out_c, in_c, kh, kw) = layer.kernel.dims();
        for dim in [out_c, in_c, kh, kw] {
            bytes.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in layer.kernel.as_slice() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &layer.bias {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| io_error(path, e))?;
    file.write_all(&bytes).map_err(|e| io_error(path, e))
}

/// Byte reader that reports how many bytes were missing on underrun and
/// which layer was being read at the time.
struct Reader<'a> {
    data: &'a [u8],
    offset: usize,
    layer: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, count: usize) -> Result<&'a [u8], DetectorError> {
        let available = self.data.len() - self.offset;
        if available < count {
            return Err(DetectorError::Truncated {
                layer: self.layer,
                needed: count - available,
                got: available,
            });
        }
        let slice = &self.data[self.offset..self.offset + count];
        self.offset += count;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, DetectorError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, DetectorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32_values(&mut self, count: usize) -> Result<Vec<f64>, DetectorError> {
        let raw = self.take(count * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }
}

/// Loads and validates weights; the returned network satisfies the same
/// structural contract as one built in memory.
pub fn load_weights(path: &Path) -> Result<NetworkWeights, DetectorError> {
    let data = fs::read(path).map_err(|e| io_error(path, e))?;
    let mut reader = Reader { data: &data, offset: 0, layer: 0 };
    let magic = reader.take(4)?;
    if magic != MAGIC {
        return Err(DetectorError::BadMagic { got: magic.try_into().expect("4 bytes") });
    }
    let version = reader.u32()?;
    if version != VERSION {
        return Err(DetectorError::UnsupportedVersion { got: version });
    }
    let count = reader.u32()? as usize;
    let mut layers = Vec::with_capacity(count);
    for layer_index in 0..count {
        reader.layer = layer_index;
        let kind = match reader.u8()? {
            0 => LayerKind::Standard,
            1 => LayerKind::Depthwise,
            2 => LayerKind::Pointwise,
            got => return Err(DetectorError::BadTag { layer: layer_index, field: "kind", got }),
        };
        let stride = reader.u8()? as usize;
        let activation = match reader.u8()? {
            0 => Activation::Relu,
            1 => Activation::Linear,
            got => {
                return Err(DetectorError::BadTag { layer: layer_index, field: "activation", got })
            }
        };
        let out_c = reader.u32()? as usize;
        let in_c = reader.u32()? as usize;
        let kh = reader.u32()? as usize;
        let kw = reader.u32()? as usize;
        let kernel_values = reader.f32_values(out_c * in_c * kh * kw)?;
        let bias = reader.f32_values(out_c)?;
        layers.push(ConvLayer {
            kind,
            kernel: Kernel4::from_data(out_c, in_c, kh, kw, kernel_values),
            bias,
            stride,
            activation,
        });
    }
    NetworkWeights::new(layers)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact_for_quantized_weights() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tpnw");
        // Freshly initialized weights are rounded through f32, so one
        // save/load cycle must reproduce them exactly.
        let net = NetworkWeights::mobile_default(42);
        save_weights(&path, &net).unwrap();
        let loaded = load_weights(&path).unwrap();
        assert_eq!(net, loaded);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tpnw");
        fs::write(&path, b"JUNKxxxxyyyy").unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(DetectorError::BadMagic { got }) if &got == b"JUNK"
        ));

        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TPNW");
        bytes.extend_from_slice(&9u32.to_le_bytes());
        bytes.extend_from_slice(&0u32.to_le_bytes());
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(DetectorError::UnsupportedVersion { got: 9 })
        ));
    }

    #[test]
    fn truncation_names_the_missing_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tpnw");
        let net = NetworkWeights::tiny(7, 2);
        save_weights(&path, &net).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 10]).unwrap();
        match load_weights(&path) {
            Err(DetectorError::Truncated { layer, needed, got }) => {
                assert_eq!(layer, net.layers().len() - 1);
                // The final read (the last bias) is short exactly the
                // number of bytes cut off.
                assert_eq!(needed, 10);
                assert!(got > 0);
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn structural_validation_applies_to_loaded_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.tpnw");
        // A single-layer file parses but fails the network contract.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"TPNW");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(0); // standard
        bytes.push(8); // stride
        bytes.push(0); // relu
        for dim in [2u32, 1, 3, 3] {
            bytes.extend_from_slice(&dim.to_le_bytes());
        }
        for _ in 0..2 * 9 + 2 {
            bytes.extend_from_slice(&1.0f32.to_le_bytes());
        }
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(DetectorError::TooFewLayers { got: 1 })
        ));

        let mut bad_tag = fs::read(&path).unwrap();
        bad_tag[12] = 7;
        fs::write(&path, &bad_tag).unwrap();
        assert!(matches!(
            load_weights(&path),
            Err(DetectorError::BadTag { layer: 0, field: "kind", got: 7 })
        ));
    }
}
