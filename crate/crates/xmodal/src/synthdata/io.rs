//! Dataset file format, magic "XMDS1". All integers little-endian.
//!
//! ```text
//! magic            5 bytes "XMDS1"
//! version          u16 (currently 1)
//! seed             u64
//! spec_hash        u64
//! classes C        u32
//! latent_dim L     u32
//! spread           f64
//! prototypes       C*L f64
//! parts P          u32
//! part_dictionary  P*L f64
//! part_weights     C*P f64
//! anchor           u16
//! modalities M     u32
//! per modality:    name (u32 len + bytes), render_dim u32,
//!                  distractor_dims u32, nonlinearity u8, noise_std f64,
//!                  mixing render_dim*L f64
//! holdout flag     u8; if 1: class count u32 + u16 each,
//!                  affected count u32 + u16 each
//! example count    u64
//! per example:     modality u16, class u16, split u8, latent_id u64,
//!                  features D_m f32
//! ```
//!
//! Features are stored as f32 and widened back to f64 on read; the generator
//! rounds through f32, so write-then-read reproduces the dataset bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{
    CrossModalDataset, Example, HoldoutSpec, ModalityRenderer, Nonlinearity, SceneConceptModel,
    Split,
};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8] = b"XMDS1";
const VERSION: u16 = 1;

pub fn write_dataset(dataset: &CrossModalDataset, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = Writer::new(BufWriter::new(file));
    w.bytes(MAGIC)?;
    w.u16(VERSION)?;
    w.u64(dataset.seed)?;
    w.u64(dataset.spec_hash)?;

    let concept = &dataset.concept;
    let c = concept.prototypes.rows();
    let l = concept.prototypes.cols();
    w.u32(c as u32)?;
    w.u32(l as u32)?;
    w.f64(concept.spread)?;
    for &v in concept.prototypes.as_slice() {
        w.f64(v)?;
    }
    w.u32(concept.part_dictionary.rows() as u32)?;
    for &v in concept.part_dictionary.as_slice() {
        w.f64(v)?;
    }
    for &v in concept.part_weights.as_slice() {
        w.f64(v)?;
    }

    w.u16(dataset.anchor)?;
    w.u32(dataset.renderers.len() as u32)?;
    for r in &dataset.renderers {
        w.string(&r.name)?;
        w.u32(r.render_dim as u32)?;
        w.u32(r.distractor_dims as u32)?;
        w.u8(r.nonlinearity.code())?;
        w.f64(r.noise_std)?;
        for &v in r.mixing.as_slice() {
            w.f64(v)?;
        }
    }

    match &dataset.holdout {
        None => w.u8(0)?,
        Some(h) => {
            w.u8(1)?;
            w.u32(h.classes.len() as u32)?;
            for &cls in &h.classes {
                w.u16(cls)?;
            }
            w.u32(h.affected.len() as u32)?;
            for &m in &h.affected {
                w.u16(m)?;
            }
        }
    }

    w.u64(dataset.examples.len() as u64)?;
    for e in &dataset.examples {
        w.u16(e.modality)?;
        w.u16(e.class)?;
        w.u8(match e.split {
            Split::Train => 0,
            Split::Val => 1,
        })?;
        w.u64(e.latent_id)?;
        for &v in &e.features {
            w.f32(v as f32)?;
        }
    }
    w.finish()
}

pub fn read_dataset(path: &Path) -> Result<CrossModalDataset> {
    let display = path.display().to_string();
    let file = File::open(path)?;
    let mut r = Reader::new(BufReader::new(file), display);
    r.magic(MAGIC)?;
    let version = r.u16()?;
    if version != VERSION {
        return r.fail(format!("unsupported version {version}"));
    }
    let seed = r.u64()?;
    let spec_hash = r.u64()?;

    let c = r.u32()? as usize;
    let l = r.u32()? as usize;
    if c == 0 || c > 1 << 20 || l == 0 || l > 1 << 20 || c.saturating_mul(l) > 1 << 28 {
        return r.fail(format!("implausible dimensions C={c}, L={l}"));
    }
    let spread = r.f64()?;
    let prototypes = Tensor::new(vec![c, l], r.f64_vec(c * l)?)
        .map_err(|e| corrupt(&r, e))?;
    let p = r.u32()? as usize;
    if p == 0 || p.saturating_mul(l) > 1 << 28 {
        return r.fail(format!("implausible part count {p}"));
    }
    let part_dictionary = Tensor::new(vec![p, l], r.f64_vec(p * l)?)
        .map_err(|e| corrupt(&r, e))?;
    let part_weights = Tensor::new(vec![c, p], r.f64_vec(c * p)?)
        .map_err(|e| corrupt(&r, e))?;

    let anchor = r.u16()?;
    let m = r.u32()? as usize;
    if m == 0 || m > 1 << 10 {
        return r.fail(format!("implausible modality count {m}"));
    }
    if usize::from(anchor) >= m {
        return r.fail(format!("anchor {anchor} out of range for {m} modalities"));
    }
    let mut renderers = Vec::with_capacity(m);
    for _ in 0..m {
        let name = r.string()?;
        let render_dim = r.u32()? as usize;
        let distractor_dims = r.u32()? as usize;
        if render_dim == 0 || render_dim.saturating_mul(l) > 1 << 28 || distractor_dims > 1 << 20 {
            return r.fail(format!("implausible renderer dims for '{name}'"));
        }
        let code = r.u8()?;
        let nonlinearity = match Nonlinearity::from_code(code) {
            Some(n) => n,
            None => return r.fail(format!("unknown nonlinearity code {code}")),
        };
        let noise_std = r.f64()?;
        let mixing = Tensor::new(vec![render_dim, l], r.f64_vec(render_dim * l)?)
            .map_err(|e| corrupt(&r, e))?;
        renderers.push(ModalityRenderer {
            name,
            render_dim,
            distractor_dims,
            nonlinearity,
            noise_std,
            mixing,
        });
    }

    let holdout = match r.u8()? {
        0 => None,
        1 => {
            let nc = r.u32()? as usize;
            if nc > c {
                return r.fail(format!("holdout class count {nc} exceeds C={c}"));
            }
            let mut classes = Vec::with_capacity(nc);
            for _ in 0..nc {
                classes.push(r.u16()?);
            }
            let na = r.u32()? as usize;
            if na > m {
                return r.fail(format!("holdout modality count {na} exceeds M={m}"));
            }
            let mut affected = Vec::with_capacity(na);
            for _ in 0..na {
                affected.push(r.u16()?);
            }
            Some(HoldoutSpec { classes, affected })
        }
        other => return r.fail(format!("bad holdout flag {other}")),
    };

    let count = r.u64()? as usize;
    if count > 1 << 32 {
        return r.fail(format!("implausible example count {count}"));
    }
    let mut examples = Vec::with_capacity(count);
    for _ in 0..count {
        let modality = r.u16()?;
        if usize::from(modality) >= m {
            return r.fail(format!("example modality {modality} out of range"));
        }
        let class = r.u16()?;
        if usize::from(class) >= c {
            return r.fail(format!("example class {class} out of range"));
        }
        let split = match r.u8()? {
            0 => Split::Train,
            1 => Split::Val,
            other => return r.fail(format!("bad split tag {other}")),
        };
        let latent_id = r.u64()?;
        let dim = renderers[usize::from(modality)].input_dim();
        let mut features = Vec::with_capacity(dim);
        for _ in 0..dim {
            features.push(f64::from(r.f32()?));
        }
        examples.push(Example {
            modality,
            class,
            split,
            latent_id,
            features,
        });
    }
    r.expect_eof()?;

    Ok(CrossModalDataset {
        seed,
        spec_hash,
        anchor,
        concept: SceneConceptModel {
            prototypes,
            spread,
            part_dictionary,
            part_weights,
        },
        renderers,
        holdout,
        examples,
    })
}

fn corrupt<R: std::io::Read>(r: &Reader<R>, e: Error) -> Error {
    match r.fail::<()>(format!("corrupt payload: {e}")) {
        Err(err) => err,
        Ok(()) => unreachable!(),
    }
}

#[cfg(test)]
mod tests {
    use super::super::{generate_dataset, holdout_classes, GeneratorSpec};
    use super::*;
    use std::io::{Seek, SeekFrom, Write as _};

    fn small() -> CrossModalDataset {
        let mut spec = GeneratorSpec::default_desk();
        spec.train_per_class = 4;
        spec.val_per_class = 2;
        spec.classes = 4;
        generate_dataset(&spec, 77).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.xmds");
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn round_trip_preserves_holdout() {
        let d = small();
        let held = holdout_classes(
            &d,
            &HoldoutSpec { classes: vec![1, 3], affected: vec![1, 2] },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.xmds");
        write_dataset(&held, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(held, back);
        assert_eq!(back.holdout.unwrap().classes, vec![1, 3]);
    }

    #[test]
    fn file_size_matches_the_documented_layout() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.xmds");
        write_dataset(&d, &path).unwrap();

        // Recompute the expected size from the layout comment at the top of
        // this file, independently of the writer.
        let c = d.class_count() as u64;
        let l = d.concept.prototypes.cols() as u64;
        let p = d.concept.part_dictionary.rows() as u64;
        let mut expect = 5 + 2 + 8 + 8; // magic, version, seed, spec_hash
        expect += 4 + 4 + 8; // C, L, spread
        expect += 8 * (c * l + p * l + c * p) + 4; // concept blocks + P
        expect += 2 + 4; // anchor, modality count
        for r in &d.renderers {
            expect += 4 + r.name.len() as u64; // name
            expect += 4 + 4 + 1 + 8; // dims, nonlinearity, noise
            expect += 8 * (r.render_dim as u64 * l); // mixing
        }
        expect += 1; // holdout flag
        expect += 8; // example count
        for e in &d.examples {
            expect += 2 + 2 + 1 + 8 + 4 * e.features.len() as u64;
        }
        assert_eq!(std::fs::metadata(&path).unwrap().len(), expect);
    }

    #[test]
    fn corrupted_magic_is_reported_with_offset() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.xmds");
        write_dataset(&d, &path).unwrap();
        let mut f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.seek(SeekFrom::Start(0)).unwrap();
        f.write_all(b"Z").unwrap();
        drop(f);
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");
        assert!(err.contains("byte offset 0"), "{err}");
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.xmds");
        write_dataset(&d, &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        let f = std::fs::OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 7).unwrap();
        drop(f);
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("unexpected end of file"), "{err}");
        assert!(err.contains("byte offset"), "{err}");
    }

    #[test]
    fn trailing_garbage_is_rejected() {
        let d = small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.xmds");
        write_dataset(&d, &path).unwrap();
        let mut f = std::fs::OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&[0u8; 3]).unwrap();
        drop(f);
        let err = read_dataset(&path).unwrap_err().to_string();
        assert!(err.contains("trailing bytes"), "{err}");
    }
}
