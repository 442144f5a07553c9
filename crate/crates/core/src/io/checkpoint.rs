//! Single-file binary checkpoints.
//!
//! Layout: `b"PVIT"`, format version (`u32` LE), manifest length (`u64` LE),
//! UTF-8 JSON manifest, then every tensor as little-endian `f32` in manifest
//! order. Offsets in the manifest are relative to the start of the payload.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::peft::{attach_lora, AdapterSpec, ExpansionSpec, FreezeMask, MaskStrategy};
use crate::vit::{BlockOrigin, ParamOrigin, ViTConfig, ViTModel};

pub const MAGIC: &[u8; 4] = b"PVIT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub frozen: bool,
    pub origin: ParamOrigin,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ViTConfig,
    pub strategy: MaskStrategy,
    pub adapter: Option<AdapterSpec>,
    pub expansions: Vec<ExpansionSpec>,
    pub tensors: Vec<TensorEntry>,
}

/// Serializes `model` and `mask` into checkpoint bytes.
pub fn encode_checkpoint(model: &ViTModel<f32>, mask: &FreezeMask) -> Result<Vec<u8>> {
    mask.check_covers(model)?;
    let mut offset = 0u64;
    let params = model.params();
    let tensors = params
        .iter()
        .enumerate()
        .map(|(i, (name, t, origin))| {
            let entry = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                offset,
                frozen: !mask.is_trainable(i),
                origin: *origin,
            };
            offset += 4 * t.len() as u64;
            entry
        })
        .collect();
    let manifest = Manifest {
        config: model.config.clone(),
        strategy: mask.strategy(),
        adapter: model.adapter.clone(),
        expansions: model.expansions.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend(FORMAT_VERSION.to_le_bytes());
    out.extend((json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t, _) in &params {
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ViTModel<f32>, mask: &FreezeMask, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, mask)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads only the header and manifest.
pub fn decode_manifest(bytes: &[u8]) -> Result<(Manifest, usize)> {
    if bytes.len() < HEADER_LEN {
        bail!(
            Format,
            "file is {} bytes, shorter than the header",
            bytes.len()
        );
    }
    if &bytes[..4] != MAGIC {
        bail!(
            Format,
            "bad magic {:?}",
            String::from_utf8_lossy(&bytes[..4])
        );
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let end = usize::try_from(len)
        .ok()
        .and_then(|l| HEADER_LEN.checked_add(l))
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("manifest length {len} exceeds file")))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..end])
        .map_err(|e| Error::Format(format!("manifest: {e}")))?;
    Ok((manifest, end))
}

fn skeleton(manifest: &Manifest) -> Result<ViTModel<f32>> {
    let mut model = ViTModel::zeroed(&manifest.config)?;
    if let Some(spec) = &manifest.adapter {
        model = attach_lora(&model, spec, 0)?;
    }
    model.expansions = manifest.expansions.clone();
    for (i, block) in model.blocks.iter_mut().enumerate() {
        let first = format!("blocks.{i}.ln1.gamma");
        let entry = manifest.tensors.iter().find(|t| t.name == first);
        if entry.is_some_and(|t| t.origin == ParamOrigin::Expanded) {
            block.origin = BlockOrigin::Expanded;
        }
    }
    Ok(model)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ViTModel<f32>, FreezeMask)> {
    let (manifest, start) = decode_manifest(bytes)?;
    let mut model = skeleton(&manifest)?;
    let info = model.param_info();
    if info.len() != manifest.tensors.len() {
        bail!(
            Format,
            "manifest lists {} tensors, structure needs {}",
            manifest.tensors.len(),
            info.len()
        );
    }
    let mut expected_offset = 0u64;
    for (entry, want) in manifest.tensors.iter().zip(&info) {
        if entry.name != want.name || entry.shape != want.shape || entry.origin != want.origin {
            bail!(
                Format,
                "manifest entry {} does not match model structure",
                entry.name
            );
        }
        if entry.offset != expected_offset {
            bail!(
                Format,
                "tensor {} at offset {}, expected {expected_offset}",
                entry.name,
                entry.offset
            );
        }
        expected_offset += 4 * entry.shape.iter().product::<usize>() as u64;
    }
    let payload = &bytes[start..];
    if payload.len() as u64 != expected_offset {
        bail!(
            Format,
            "payload has {} bytes, manifest needs {expected_offset}",
            payload.len()
        );
    }
    for (entry, t) in manifest.tensors.iter().zip(model.params_mut()) {
        let at = entry.offset as usize;
        let raw = &payload[at..at + 4 * t.len()];
        for (dst, src) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(src.try_into().expect("4 bytes"));
        }
    }
    let names = manifest.tensors.iter().map(|t| t.name.clone()).collect();
    let flags = manifest.tensors.iter().map(|t| !t.frozen).collect();
    let mask = FreezeMask::from_parts(manifest.strategy, names, flags)?;
    Ok((model, mask))
}

pub fn load_checkpoint(path: &Path) -> Result<(ViTModel<f32>, FreezeMask)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::peft::{build_freeze_mask, expand_blocks, AdapterSpec};
    use crate::vit::build_vit;

    fn model() -> ViTModel<f32> {
        let mut c = ViTConfig::tiny(3);
        c.image_size = 16;
        c.dim = 16;
        c.heads = 2;
        c.depth = 2;
        build_vit(&c, 9).unwrap()
    }

    #[test]
    fn roundtrip_plain_expanded_and_lora() {
        let base = model();
        let expanded = expand_blocks(&base, &ExpansionSpec::new(2, 2).unwrap()).unwrap();
        let lora = attach_lora(&base, &AdapterSpec::new(2), 4).unwrap();
        for (m, s) in [
            (base, MaskStrategy::TopK(1)),
            (expanded, MaskStrategy::ExpandedOnly),
            (lora, MaskStrategy::LoraOnly),
        ] {
            let mask = build_freeze_mask(&m, s).unwrap();
            let bytes = encode_checkpoint(&m, &mask).unwrap();
            let (m2, mask2) = decode_checkpoint(&bytes).unwrap();
            assert_eq!(m2, m);
            assert_eq!(mask2, mask);
            assert_eq!(encode_checkpoint(&m2, &mask2).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = model();
        let mask = build_freeze_mask(&m, MaskStrategy::Full).unwrap();
        let bytes = encode_checkpoint(&m, &mask).unwrap();
        let mut bad = bytes.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_checkpoint(&bad), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Version {
                found: 2,
                expected: 1
            })
        ));
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 4]),
            Err(Error::Format(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long), Err(Error::Format(_))));
        assert!(matches!(
            decode_checkpoint(&bytes[..10]),
            Err(Error::Format(_))
        ));
    }
}
