//! `DVFN1` model checkpoints.
//!
//! Layout: the 5-byte magic `DVFN1`, the manifest length as a little-endian
//! `u64`, a UTF-8 JSON manifest, then the numeric payload as consecutive
//! `FMX1` blobs in the order the manifest's `blocks` list names them:
//! every layer's weight and bias for the image, keyframe and video networks,
//! the four encoders, and the objective trace as a `1 x iterations` row
//! (omitted when the trace is empty).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fmx::{decode_fmx_at, encode_fmx};
use crate::linalg::Matrix;
use crate::net::{Activation, DenseLayer, NetworkParams};
use crate::sae::SaeWeights;
use crate::trainer::{Model, TrainConfig};

pub const DVFN_MAGIC: &[u8; 5] = b"DVFN1";
pub const DVFN_VERSION: u32 = 1;

/// Training columns a model was fit on, kept so evaluation can rebuild the
/// held-out side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub ratio: f64,
    pub seed: u64,
    pub train: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub split: Option<SplitInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NetManifest {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    config: TrainConfig,
    networks: [NetManifest; 3],
    semantic_dim: usize,
    repr_dim: usize,
    iterations: usize,
    initial_objective: f64,
    ridge_activations: usize,
    split: Option<SplitInfo>,
    blocks: Vec<String>,
}

const NET_NAMES: [&str; 3] = ["image", "keyframe", "video"];

fn block_names(networks: &[NetManifest; 3], iterations: usize) -> Vec<String> {
    let mut names = Vec::new();
    for (net, m) in NET_NAMES.iter().zip(networks) {
        for l in 0..m.activations.len() {
            names.push(format!("{net}.{l}.weight"));
            names.push(format!("{net}.{l}.bias"));
        }
    }
    names.extend(["w_f", "w_h", "w_g", "w_e"].map(String::from));
    if iterations > 0 {
        names.push("trace".into());
    }
    names
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let model = &ckpt.model;
    let nets = [&model.theta_x, &model.theta_y, &model.theta_z];
    let networks = nets.map(|n| NetManifest {
        layer_dims: n.layer_dims(),
        activations: n.activations(),
    });
    let blocks = block_names(&networks, model.trace.len());
    let manifest = Manifest {
        version: DVFN_VERSION,
        config: model.config.clone(),
        networks,
        semantic_dim: model.semantic_dim(),
        repr_dim: model.sae.repr_dim(),
        iterations: model.trace.len(),
        initial_objective: model.initial_objective,
        ridge_activations: model.ridge_activations,
        split: ckpt.split.clone(),
        blocks,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut out = Vec::with_capacity(json.len() + 64);
    out.extend_from_slice(DVFN_MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for net in nets {
        for layer in net.layers() {
            out.extend(encode_fmx(&layer.weight));
            out.extend(encode_fmx(&layer.bias));
        }
    }
    for w in [
        &model.sae.w_f,
        &model.sae.w_h,
        &model.sae.w_g,
        &model.sae.w_e,
    ] {
        out.extend(encode_fmx(w));
    }
    if !model.trace.is_empty() {
        out.extend(encode_fmx(&Matrix::from_row_slice(
            1,
            model.trace.len(),
            &model.trace,
        )));
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn block(&mut self, name: &str, shape: (usize, usize)) -> Result<Matrix> {
        let start = self.at as u64;
        let (m, used) = decode_fmx_at(&self.bytes[self.at..], start)?;
        if m.shape() != shape {
            return Err(Error::format(
                start,
                format!(
                    "block {name} is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    shape.0,
                    shape.1
                ),
            ));
        }
        self.at += used;
        Ok(m)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let magic = bytes
        .get(..DVFN_MAGIC.len())
        .ok_or_else(|| Error::format(0, "file shorter than magic"))?;
    if magic != DVFN_MAGIC {
        return Err(Error::format(
            0,
            format!(
                "bad magic {:?}, expected \"DVFN1\"",
                String::from_utf8_lossy(magic)
            ),
        ));
    }
    let len_at = DVFN_MAGIC.len();
    let len_bytes = bytes
        .get(len_at..len_at + 8)
        .ok_or_else(|| Error::format(bytes.len() as u64, "truncated manifest length"))?;
    let len = u64::from_le_bytes(len_bytes.try_into().unwrap_or_else(|_| unreachable!()));
    let body = len_at + 8;
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| body.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| {
            Error::format(
                bytes.len() as u64,
                format!("truncated manifest, declared {len} bytes"),
            )
        })?;
    let manifest: Manifest = serde_json::from_slice(&bytes[body..end])
        .map_err(|e| Error::format(body as u64, format!("bad manifest: {e}")))?;
    if manifest.version != DVFN_VERSION {
        return Err(Error::format(
            body as u64,
            format!(
                "unsupported version {}, expected {DVFN_VERSION}",
                manifest.version
            ),
        ));
    }
    let expected = block_names(&manifest.networks, manifest.iterations);
    if manifest.blocks != expected {
        return Err(Error::format(
            body as u64,
            "manifest block list does not match its layout",
        ));
    }

    let mut rd = Reader { bytes, at: end };
    let mut nets = Vec::with_capacity(3);
    for (name, nm) in NET_NAMES.iter().zip(&manifest.networks) {
        if nm.layer_dims.len() != nm.activations.len() + 1 {
            return Err(Error::format(
                body as u64,
                format!("{name} network dims and activations disagree"),
            ));
        }
        let mut layers = Vec::new();
        for (l, &activation) in nm.activations.iter().enumerate() {
            let (inp, out) = (nm.layer_dims[l], nm.layer_dims[l + 1]);
            let weight = rd.block(&format!("{name}.{l}.weight"), (out, inp))?;
            let bias = rd.block(&format!("{name}.{l}.bias"), (out, 1))?;
            layers.push(DenseLayer {
                weight,
                bias,
                activation,
            });
        }
        nets.push(
            NetworkParams::new(layers).map_err(|e| Error::format(body as u64, e.to_string()))?,
        );
    }
    let (k, d) = (manifest.semantic_dim, manifest.repr_dim);
    let sae = SaeWeights {
        w_f: rd.block("w_f", (k, d))?,
        w_h: rd.block("w_h", (k, d))?,
        w_g: rd.block("w_g", (k, d))?,
        w_e: rd.block("w_e", (k, 2 * d))?,
    };
    let trace = if manifest.iterations > 0 {
        rd.block("trace", (1, manifest.iterations))?
            .iter()
            .copied()
            .collect()
    } else {
        Vec::new()
    };
    if rd.at != bytes.len() {
        return Err(Error::format(
            rd.at as u64,
            format!("{} trailing bytes", bytes.len() - rd.at),
        ));
    }
    let theta_z = nets.pop().unwrap_or_else(|| unreachable!());
    let theta_y = nets.pop().unwrap_or_else(|| unreachable!());
    let theta_x = nets.pop().unwrap_or_else(|| unreachable!());
    Ok(Checkpoint {
        model: Model {
            theta_x,
            theta_y,
            theta_z,
            sae,
            config: manifest.config,
            trace,
            initial_objective: manifest.initial_objective,
            ridge_activations: manifest.ridge_activations,
        },
        split: manifest.split,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(ckpt)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SynthConfig};
    use crate::objective::Hyperparams;
    use crate::trainer::{init_model, resume, train};

    fn setup(iters: usize) -> (crate::TriModalDataset, crate::SemanticTable, TrainConfig) {
        let mut sc = SynthConfig::new(3, 6);
        sc.semantic_dim = 4;
        let (ds, sem) = generate_synthetic(&sc, 1).unwrap();
        let cfg = TrainConfig {
            hp: Hyperparams {
                d: 6,
                iters,
                batch: 8,
                ..Hyperparams::default()
            },
            hidden: 5,
            seed: 3,
            ..TrainConfig::default()
        };
        (ds, sem, cfg)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (ds, sem, cfg) = setup(3);
        let model = train(&ds, &sem, &cfg).unwrap();
        let ckpt = Checkpoint {
            model,
            split: Some(SplitInfo {
                ratio: 0.3,
                seed: u64::MAX,
                train: vec![0, 4, 9],
            }),
        };
        let bytes = encode_checkpoint(&ckpt).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        for (a, b) in back.model.trace.iter().zip(&ckpt.model.trace) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn untrained_model_has_no_trace_block() {
        let (ds, sem, cfg) = setup(0);
        let model = init_model(&ds, &sem, &cfg).unwrap();
        let ckpt = Checkpoint { model, split: None };
        let back = decode_checkpoint(&encode_checkpoint(&ckpt).unwrap()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn restored_model_resumes_identically() {
        let (ds, sem, cfg) = setup(6);
        let full = train(&ds, &sem, &cfg).unwrap();
        let half = resume(init_model(&ds, &sem, &cfg).unwrap(), &ds, &sem, 3, None).unwrap();
        let bytes = encode_checkpoint(&Checkpoint {
            model: half,
            split: None,
        })
        .unwrap();
        let restored = decode_checkpoint(&bytes).unwrap().model;
        let done = resume(restored, &ds, &sem, 6, None).unwrap();
        assert_eq!(done.trace, full.trace);
        assert_eq!(done, full);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let (ds, sem, cfg) = setup(2);
        let bytes = encode_checkpoint(&Checkpoint {
            model: train(&ds, &sem, &cfg).unwrap(),
            split: None,
        })
        .unwrap();

        let mut bad = bytes.clone();
        bad[4] = b'2';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format { offset: 0, .. })
        ));

        for cut in [3, 10, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(
                matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format { .. })),
                "cut {cut}"
            );
        }

        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(
            decode_checkpoint(&long),
            Err(Error::Format { .. })
        ));

        let json_len = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
        let text = String::from_utf8(bytes[13..13 + json_len].to_vec()).unwrap();
        let bumped = text.replacen("\"version\":1", "\"version\":2", 1);
        let mut other = Vec::from(&bytes[..5]);
        other.extend_from_slice(&(bumped.len() as u64).to_le_bytes());
        other.extend_from_slice(bumped.as_bytes());
        other.extend_from_slice(&bytes[13 + json_len..]);
        let err = decode_checkpoint(&other).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }
}
