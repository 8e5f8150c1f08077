//! Versioned binary checkpoints of a [`ConvNet`] and, optionally, CRF
//! parameters.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic        8 bytes  "ROSACKPT"
//! version      u32      1
//! flags        u32      bit 0: CRF block present; bit 1: periodic padding
//! input_scale  f32
//! mean_pixel   3 x f32
//! n_layers     u32
//! per layer:   u32 out_ch, u32 in_ch, u32 kh, u32 kw,
//!              f32 x (out_ch * in_ch * kh * kw) weights, f32 x out_ch biases
//! CRF block:   f32 omega1, omega2, theta_alpha, theta_beta, theta_gamma,
//!              f32 x 4 mu (row-major), u32 iters
//! ```
//!
//! Values are stored as 32-bit floats, so a save/load round trip rounds
//! parameters to `f32` precision.

use std::path::Path;

use crate::backbone::{ConvLayer, ConvNet, Padding};
use crate::crf::{CrfParams, MessagePassing};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ROSACKPT";
pub const VERSION: u32 = 1;
const FLAG_CRF: u32 = 1;
const FLAG_PERIODIC: u32 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: ConvNet,
    pub mean_pixel: [f64; 3],
    pub crf: Option<CrfParams>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let mut flags = 0;
        if self.crf.is_some() {
            flags |= FLAG_CRF;
        }
        if self.net.padding() == Padding::Periodic {
            flags |= FLAG_PERIODIC;
        }
        out.extend_from_slice(&flags.to_le_bytes());
        let f = |out: &mut Vec<u8>, v: f64| out.extend_from_slice(&(v as f32).to_le_bytes());
        let u = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        f(&mut out, self.net.input_scale());
        for &m in &self.mean_pixel {
            f(&mut out, m);
        }
        u(&mut out, self.net.layers().len());
        for l in self.net.layers() {
            for d in [l.out_ch, l.in_ch, l.kh, l.kw] {
                u(&mut out, d);
            }
            for &w in l.weight.iter().chain(&l.bias) {
                f(&mut out, w);
            }
        }
        if let Some(c) = &self.crf {
            for v in [c.omega1, c.omega2, c.theta_alpha, c.theta_beta, c.theta_gamma] {
                f(&mut out, v);
            }
            for v in c.mu.iter().flatten() {
                f(&mut out, *v);
            }
            u(&mut out, c.iters);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let flags = r.u32()?;
        if flags & !(FLAG_CRF | FLAG_PERIODIC) != 0 {
            return Err(Error::Checkpoint(format!("unknown flags {flags:#x}")));
        }
        let input_scale = r.f32()?;
        let mean_pixel = [r.f32()?, r.f32()?, r.f32()?];
        let n_layers = r.u32()? as usize;
        if n_layers == 0 || n_layers > 1024 {
            return Err(Error::Checkpoint(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (out_ch, in_ch, kh, kw) = (
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
                r.u32()? as usize,
            );
            let count = out_ch
                .checked_mul(in_ch)
                .and_then(|v| v.checked_mul(kh))
                .and_then(|v| v.checked_mul(kw))
                .filter(|&v| v <= r.remaining() / 4)
                .ok_or_else(|| Error::Checkpoint("layer larger than the file".into()))?;
            let mut layer = ConvLayer::zeros(out_ch, in_ch, kh, kw).map_err(|e| Error::Checkpoint(e.to_string()))?;
            for w in layer.weight.iter_mut().take(count) {
                *w = r.f32()?;
            }
            for b in &mut layer.bias {
                *b = r.f32()?;
            }
            layers.push(layer);
        }
        let padding = if flags & FLAG_PERIODIC != 0 {
            Padding::Periodic
        } else {
            Padding::Reflect
        };
        let net = ConvNet::new(layers, padding)
            .and_then(|n| n.with_input_scale(input_scale))
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let crf = if flags & FLAG_CRF != 0 {
            let omega1 = r.f32()?;
            let omega2 = r.f32()?;
            let theta_alpha = r.f32()?;
            let theta_beta = r.f32()?;
            let theta_gamma = r.f32()?;
            let mu = [[r.f32()?, r.f32()?], [r.f32()?, r.f32()?]];
            let iters = r.u32()? as usize;
            let c = CrfParams {
                omega1,
                omega2,
                theta_alpha,
                theta_beta,
                theta_gamma,
                mu,
                iters,
                messages: MessagePassing::Exact,
            };
            c.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
            Some(c)
        } else {
            None
        };
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        if !net.is_finite() {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(Self { net, mean_pixel, crf })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.at
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.remaining() < n {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f64> {
        Ok(f64::from(f32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn f32_round(net: &ConvNet) -> ConvNet {
        let mut n = net.clone();
        for l in n.layers_mut() {
            for v in l.weight.iter_mut().chain(l.bias.iter_mut()) {
                *v = f64::from(*v as f32);
            }
        }
        n
    }

    #[test]
    fn round_trip_to_f32_precision() {
        let net = ConvNet::reference(4);
        let crf = CrfParams {
            omega1: 0.75,
            iters: 3,
            ..CrfParams::default()
        };
        let ck = Checkpoint {
            net: net.clone(),
            mean_pixel: [10.5, 20.25, 30.0],
            crf: Some(crf),
        };
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.net, f32_round(&net));
        assert_eq!(back.crf, Some(crf));
        assert_eq!(back.mean_pixel, [10.5, 20.25, 30.0]);
        // a second trip is lossless
        assert_eq!(Checkpoint::from_bytes(&back.to_bytes()).unwrap(), back);
    }

    #[test]
    fn byte_layout_header() {
        let ck = Checkpoint {
            net: ConvNet::new(vec![ConvLayer::zeros(2, 3, 1, 1).unwrap()], Padding::Reflect).unwrap(),
            mean_pixel: [0.0; 3],
            crf: None,
        };
        let b = ck.to_bytes();
        assert_eq!(&b[..8], b"ROSACKPT");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &0u32.to_le_bytes());
        assert_eq!(&b[16..20], &1.0f32.to_le_bytes());
        assert_eq!(&b[32..36], &1u32.to_le_bytes());
        // header 36 + dims 16 + 6 weights + 2 biases
        assert_eq!(b.len(), 36 + 16 + 4 * 8);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let ck = Checkpoint {
            net: ConvNet::reference(1),
            mean_pixel: [0.0; 3],
            crf: None,
        };
        let b = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut bad = b.clone();
        bad[8] = 2;
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut long = b.clone();
        long.push(0);
        assert!(Checkpoint::from_bytes(&long).is_err());
        assert!(matches!(Checkpoint::from_bytes(&[]), Err(Error::Checkpoint(_))));
    }
}
