//! Binary checkpoint: `TILTCKPT`, u32 version, u64 header length, JSON
//! header, then little-endian f32 payloads in header order (parameters, then
//! optimizer first moments, then second moments).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TiltError};
use crate::model::{Tilt, TiltConfig};
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"TILTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerHeader {
    step: u64,
    hyper: AdamWConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: TiltConfig,
    tensors: Vec<TensorEntry>,
    optimizer: Option<OptimizerHeader>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Tilt<f32>,
    pub optimizer: Option<OptimizerState<f32>>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let Some(end) = end else {
            return Err(TiltError::CheckpointTruncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        };
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn tensor(&mut self, shape: &[usize], what: &str) -> Result<Tensor<f32>> {
        let n: usize = shape.iter().product();
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape.to_vec(), data)
    }
}

fn write_tensor(out: &mut Vec<u8>, t: &Tensor<f32>) {
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn new(model: Tilt<f32>, optimizer: Option<OptimizerState<f32>>) -> Result<Self> {
        if let Some(opt) = &optimizer {
            let shapes_match = |ts: &[Tensor<f32>]| {
                ts.len() == model.params.len()
                    && ts.iter().zip(model.params.iter()).all(|(a, (_, b))| a.shape() == b.shape())
            };
            if !shapes_match(&opt.m) || !shapes_match(&opt.v) {
                return Err(TiltError::Contract("optimizer moments do not match parameters".into()));
            }
        }
        Ok(Checkpoint { model, optimizer })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.model.config.clone(),
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: self.optimizer.as_ref().map(|o| OptimizerHeader {
                step: o.step,
                hyper: o.hyper,
            }),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + 4 * self.model.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in self.model.params.iter() {
            write_tensor(&mut out, t);
        }
        if let Some(opt) = &self.optimizer {
            for t in opt.m.iter().chain(&opt.v) {
                write_tensor(&mut out, t);
            }
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        let magic = r.take(8, "magic")?;
        if magic != MAGIC {
            return Err(TiltError::CheckpointVersion(format!("bad magic {magic:?}")));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(TiltError::CheckpointVersion(format!(
                "file version {version}, supported {VERSION}"
            )));
        }
        let len = u64::from_le_bytes(r.take(8, "header length")?.try_into().expect("8 bytes"));
        let len = usize::try_from(len).map_err(|_| TiltError::CheckpointTruncated("header length overflows".into()))?;
        let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
        header.config.validate()?;

        let mut params = ParamStore::new();
        for e in &header.tensors {
            if params.get(&e.name).is_some() {
                return Err(TiltError::Validation(format!("duplicate tensor `{}`", e.name)));
            }
            let t = r.tensor(&e.shape, &e.name)?;
            params.insert(e.name.clone(), t);
        }
        let optimizer = match &header.optimizer {
            None => None,
            Some(h) => {
                let mut read_all = |kind: &str| -> Result<Vec<Tensor<f32>>> {
                    header
                        .tensors
                        .iter()
                        .map(|e| r.tensor(&e.shape, &format!("{kind} of {}", e.name)))
                        .collect()
                };
                let m = read_all("first moment")?;
                let v = read_all("second moment")?;
                Some((h, m, v))
            }
        };
        if r.pos != buf.len() {
            return Err(TiltError::Validation(format!(
                "{} trailing bytes after payload",
                buf.len() - r.pos
            )));
        }

        let model = Tilt::from_params(header.config, params)?;
        // from_params may reorder; moments follow their parameter names
        let optimizer = optimizer.map(|(h, m, v)| {
            let reorder = |mut ts: Vec<Tensor<f32>>| -> Vec<Tensor<f32>> {
                let mut out = Vec::with_capacity(ts.len());
                let mut slots: Vec<Option<Tensor<f32>>> = ts.drain(..).map(Some).collect();
                for name in model.params.names() {
                    let i = header.tensors.iter().position(|e| e.name == name).expect("validated");
                    out.push(slots[i].take().expect("unique names"));
                }
                out
            };
            OptimizerState {
                hyper: h.hyper,
                step: h.step,
                m: reorder(m),
                v: reorder(v),
            }
        });
        Ok(Checkpoint { model, optimizer })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }

    pub fn into_model(self) -> Tilt<f32> {
        self.model
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vision::VisionConfig;

    fn tiny() -> TiltConfig {
        TiltConfig {
            d_model: 16,
            num_heads: 2,
            d_ff: 24,
            enc_layers: 1,
            dec_layers: 1,
            vision: VisionConfig {
                input_w: 32,
                input_h: 24,
                channels: vec![2, 3, 3],
                out_stage: 2,
                out_channels: 4,
            },
            ..Default::default()
        }
    }

    fn with_optimizer() -> Checkpoint {
        let model = Tilt::<f32>::new(tiny(), 3).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default(), &model.params);
        opt.step = 17;
        for (i, t) in opt.m.iter_mut().chain(opt.v.iter_mut()).enumerate() {
            t.data_mut().iter_mut().for_each(|v| *v = i as f32 * 0.5 + 1.0);
        }
        Checkpoint::new(model, Some(opt)).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = with_optimizer();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
    }

    #[test]
    fn round_trip_preserves_special_floats() {
        let mut model = Tilt::<f32>::new(tiny(), 1).unwrap();
        let d = model.params.get_mut(crate::model::EMBED).unwrap().data_mut();
        d[0] = -0.0;
        d[1] = f32::MIN_POSITIVE / 2.0;
        d[2] = f32::MAX;
        let ck = Checkpoint::new(model, None).unwrap();
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        let a = ck.model.params.get(crate::model::EMBED).unwrap().data();
        let b = back.model.params.get(crate::model::EMBED).unwrap().data();
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn corrupt_magic_and_version_are_version_errors() {
        let mut bytes = with_optimizer().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TiltError::CheckpointVersion(_))));
        let mut bytes = with_optimizer().to_bytes().unwrap();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TiltError::CheckpointVersion(_))));
    }

    #[test]
    fn truncation_is_detected_everywhere() {
        let bytes = with_optimizer().to_bytes().unwrap();
        for cut in [0, 5, 10, 19, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(Checkpoint::from_bytes(&bytes[..cut]), Err(TiltError::CheckpointTruncated(_))),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = with_optimizer().to_bytes().unwrap();
        bytes.push(0);
        assert!(Checkpoint::from_bytes(&bytes).is_err());
    }

    /// Rewrites the header and payload of a parameter-only checkpoint.
    fn forge(edit: impl FnOnce(&mut Header, &mut Vec<Tensor<f32>>)) -> Vec<u8> {
        let model = Tilt::<f32>::new(tiny(), 2).unwrap();
        let mut header = Header {
            config: model.config.clone(),
            tensors: model
                .params
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.into(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            optimizer: None,
        };
        let mut payload: Vec<Tensor<f32>> = model.params.iter().map(|(_, t)| t.clone()).collect();
        edit(&mut header, &mut payload);
        let json = serde_json::to_vec(&header).unwrap();
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in &payload {
            write_tensor(&mut out, t);
        }
        out
    }

    #[test]
    fn extra_tensor_is_rejected_by_name() {
        let bytes = forge(|h, p| {
            h.tensors.push(TensorEntry {
                name: "enc.9.rogue".into(),
                shape: vec![2],
            });
            p.push(Tensor::zeros(&[2]));
        });
        match Checkpoint::from_bytes(&bytes) {
            Err(TiltError::CheckpointUnknown(name)) => assert_eq!(name, "enc.9.rogue"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shape_drift_is_rejected() {
        let bytes = forge(|h, p| {
            h.tensors[0].shape = vec![p[0].len()];
            p[0] = p[0].clone().reshape(&[p[0].len()]).unwrap();
        });
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TiltError::CheckpointShape { .. })));
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let bytes = forge(|h, p| {
            h.tensors.pop();
            p.pop();
        });
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(TiltError::CheckpointMissing(_))));
    }

    #[test]
    fn reordered_file_loads_in_canonical_order() {
        let bytes = forge(|h, p| {
            h.tensors.reverse();
            p.reverse();
        });
        let ck = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(ck.model, Tilt::<f32>::new(tiny(), 2).unwrap());
    }

    #[test]
    fn mismatched_optimizer_rejected() {
        let model = Tilt::<f32>::new(tiny(), 3).unwrap();
        let mut opt = OptimizerState::new(AdamWConfig::default(), &model.params);
        opt.m.pop();
        assert!(Checkpoint::new(model, Some(opt)).is_err());
    }
}
