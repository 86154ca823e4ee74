//! Trained-model serialization, magic "XMCK1".
//!
//! A checkpoint stores parameters and shapes only. It deliberately carries no
//! strategy name, schedule, or seed: two runs that land on the same weights
//! produce byte-identical files, which is what lets equivalence tests compare
//! checkpoints instead of in-memory nets.
//!
//! Layout, all little-endian:
//!
//! ```text
//! magic      5 bytes  "XMCK1"
//! version    u16      1
//! kind       u8       0 = one shared net, 1 = one private net per modality
//! nets       u32      network count (1 for shared)
//! per net:
//!   key      u16      modality the net serves (unused 0 for shared)
//!   branches u32
//!   per branch, ascending modality:
//!     modality u16
//!     layers   u32
//!     per layer: in u32, out u32, weight out*in f64 row-major, bias out f64
//!   trunk: fc6, fc7, classifier each as in u32, out u32, weights, bias
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{CrossModalNet, ModalityBranch, SharedTrunk, TrainedModel};
use crate::binio::{Reader, Writer};
use crate::error::Result;
use crate::nn::{LinearLayer, Mlp};
use crate::synthdata::ModalityId;
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"XMCK1";
const VERSION: u16 = 1;

/// Generous structural caps; anything past these is corruption, not data.
const MAX_DIM: usize = 1 << 20;
const MAX_ELEMS: usize = 1 << 28;
const MAX_LAYERS: usize = 64;
const MAX_BRANCHES: usize = 1 << 10;

fn write_layer<W: Write>(w: &mut Writer<W>, layer: &LinearLayer) -> Result<()> {
    w.u32(layer.in_dim() as u32)?;
    w.u32(layer.out_dim() as u32)?;
    for &v in layer.weight.as_slice() {
        w.f64(v)?;
    }
    for &v in layer.bias.as_slice() {
        w.f64(v)?;
    }
    Ok(())
}

fn read_layer<R: Read>(r: &mut Reader<R>) -> Result<LinearLayer> {
    let in_dim = r.u32()? as usize;
    let out_dim = r.u32()? as usize;
    if in_dim == 0 || out_dim == 0 || in_dim > MAX_DIM || out_dim > MAX_DIM {
        return r.fail(format!("implausible layer dims {out_dim}x{in_dim}"));
    }
    let elems = in_dim.saturating_mul(out_dim);
    if elems > MAX_ELEMS {
        return r.fail(format!("layer with {elems} weights exceeds the format cap"));
    }
    let weight = Tensor::new(vec![out_dim, in_dim], r.f64_vec(elems)?)?;
    let bias = Tensor::new(vec![out_dim], r.f64_vec(out_dim)?)?;
    Ok(LinearLayer { weight, bias })
}

fn write_net<W: Write>(w: &mut Writer<W>, key: ModalityId, net: &CrossModalNet) -> Result<()> {
    w.u16(key)?;
    w.u32(net.modalities().count() as u32)?;
    for m in net.modalities() {
        let branch = net.branch(m)?;
        w.u16(m)?;
        w.u32(branch.encoder.layer_count() as u32)?;
        for j in 0..branch.encoder.layer_count() {
            write_layer(w, branch.encoder.layer(j))?;
        }
    }
    write_layer(w, &net.trunk.fc6)?;
    write_layer(w, &net.trunk.fc7)?;
    write_layer(w, &net.trunk.classifier)?;
    Ok(())
}

fn read_net<R: Read>(r: &mut Reader<R>) -> Result<(ModalityId, CrossModalNet)> {
    let key = r.u16()?;
    let branch_count = r.u32()? as usize;
    if branch_count == 0 || branch_count > MAX_BRANCHES {
        return r.fail(format!("implausible branch count {branch_count}"));
    }
    let mut branches = Vec::with_capacity(branch_count);
    let mut last: Option<ModalityId> = None;
    for _ in 0..branch_count {
        let modality = r.u16()?;
        if let Some(prev) = last {
            if modality <= prev {
                return r.fail(format!(
                    "branch modalities out of order: {modality} after {prev}"
                ));
            }
        }
        last = Some(modality);
        let layer_count = r.u32()? as usize;
        if layer_count == 0 || layer_count > MAX_LAYERS {
            return r.fail(format!("implausible encoder depth {layer_count}"));
        }
        let mut layers = Vec::with_capacity(layer_count);
        for _ in 0..layer_count {
            layers.push(read_layer(r)?);
        }
        let encoder = match Mlp::new(layers) {
            Ok(e) => e,
            Err(e) => return r.fail(format!("inconsistent encoder shapes: {e}")),
        };
        branches.push(ModalityBranch { modality, encoder });
    }
    let trunk = SharedTrunk {
        fc6: read_layer(r)?,
        fc7: read_layer(r)?,
        classifier: read_layer(r)?,
    };
    if trunk.fc7.in_dim() != trunk.fc6.out_dim()
        || trunk.classifier.in_dim() != trunk.fc7.out_dim()
    {
        return r.fail("trunk layer shapes do not chain".to_string());
    }
    match CrossModalNet::from_parts(branches, trunk) {
        Ok(net) => Ok((key, net)),
        Err(e) => r.fail(format!("inconsistent net shapes: {e}")),
    }
}

pub fn save_checkpoint(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut w = Writer::new(BufWriter::new(File::create(path)?));
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    match model {
        TrainedModel::Shared(net) => {
            w.u8(0)?;
            w.u32(1)?;
            write_net(&mut w, 0, net)?;
        }
        TrainedModel::Individual(nets) => {
            w.u8(1)?;
            w.u32(nets.len() as u32)?;
            for (&m, net) in nets {
                write_net(&mut w, m, net)?;
            }
        }
    }
    w.finish()
}

pub fn load_checkpoint(path: &Path) -> Result<TrainedModel> {
    let mut r = Reader::new(BufReader::new(File::open(path)?), path.display().to_string());
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let kind = r.u8()?;
    let count = r.u32()? as usize;
    let model = match kind {
        0 => {
            if count != 1 {
                return r.fail(format!("shared checkpoint must hold 1 net, got {count}"));
            }
            let (_, net) = read_net(&mut r)?;
            TrainedModel::Shared(net)
        }
        1 => {
            if count == 0 || count > MAX_BRANCHES {
                return r.fail(format!("implausible net count {count}"));
            }
            let mut nets = BTreeMap::new();
            for _ in 0..count {
                let (key, net) = read_net(&mut r)?;
                if nets.insert(key, net).is_some() {
                    return r.fail(format!("duplicate net for modality {key}"));
                }
            }
            TrainedModel::Individual(nets)
        }
        other => return r.fail(format!("unknown checkpoint kind {other}")),
    };
    r.expect_eof()?;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crossmodal::ArchConfig;
    use crate::rng::RngState;

    fn sample_shared() -> TrainedModel {
        let arch = ArchConfig {
            shared_dim: 5,
            hidden_dim: 6,
            classes: 3,
            encoder_widths: vec![7],
            init_std: 0.2,
        };
        let dims: BTreeMap<ModalityId, usize> = [(0u16, 4usize), (2u16, 9usize)].into();
        TrainedModel::Shared(CrossModalNet::init_gaussian(&arch, &dims, &RngState::new(21)).unwrap())
    }

    fn sample_individual() -> TrainedModel {
        let arch = ArchConfig {
            shared_dim: 5,
            hidden_dim: 6,
            classes: 3,
            encoder_widths: vec![7],
            init_std: 0.2,
        };
        let mut nets = BTreeMap::new();
        for (m, d) in [(0u16, 4usize), (1, 6), (2, 9)] {
            let dims: BTreeMap<ModalityId, usize> = [(m, d)].into();
            nets.insert(
                m,
                CrossModalNet::init_gaussian(&arch, &dims, &RngState::new(u64::from(m))).unwrap(),
            );
        }
        TrainedModel::Individual(nets)
    }

    fn bits_eq(a: &TrainedModel, b: &TrainedModel) -> bool {
        let flat = |m: &TrainedModel| -> Vec<u64> {
            match m {
                TrainedModel::Shared(n) => n.flat_params().iter().map(|v| v.to_bits()).collect(),
                TrainedModel::Individual(nets) => nets
                    .values()
                    .flat_map(|n| n.flat_params())
                    .map(|v| v.to_bits())
                    .collect(),
            }
        };
        flat(a) == flat(b)
    }

    #[test]
    fn shared_round_trips_exactly() {
        let model = sample_shared();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xmck");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert!(matches!(back, TrainedModel::Shared(_)));
        assert!(bits_eq(&model, &back));
    }

    #[test]
    fn individual_round_trips_with_keys() {
        let model = sample_individual();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xmck");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        match (&model, &back) {
            (TrainedModel::Individual(a), TrainedModel::Individual(b)) => {
                assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
            }
            _ => panic!("expected individual nets"),
        }
        assert!(bits_eq(&model, &back));
    }

    #[test]
    fn saving_twice_yields_identical_bytes() {
        let model = sample_shared();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.xmck");
        let p2 = dir.path().join("b.xmck");
        save_checkpoint(&model, &p1).unwrap();
        save_checkpoint(&model, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn loaded_net_computes_the_same_features() {
        let model = sample_shared();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xmck");
        save_checkpoint(&model, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        let mut rng = RngState::new(3);
        let mut x = Tensor::zeros(vec![4, 9]);
        for v in x.as_mut_slice() {
            *v = rng.normal(0.0, 1.0);
        }
        let a = model.extract(2, &x, crate::density::LayerId::Fc7).unwrap();
        let b = back.extract(2, &x, crate::density::LayerId::Fc7).unwrap();
        assert!(a.bits_eq(&b));
    }

    #[test]
    fn truncation_and_garbage_are_detected() {
        let model = sample_shared();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.xmck");
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("byte offset"), "{err}");

        let mut longer = bytes.clone();
        longer.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &longer).unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");

        std::fs::write(&path, b"XMDM1junkjunkjunk").unwrap();
        let err = load_checkpoint(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
    }
}
