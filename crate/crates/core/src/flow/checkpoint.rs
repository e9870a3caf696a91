//! `FCKP` model checkpoints.

use std::path::Path;

use super::{alternating_mask, CouplingBlock, FlowModel, PriorHead};
use crate::container::{self, NamedTensors};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FCKP";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(model: &FlowModel) -> Result<Vec<u8>> {
    let header = [
        container::len_u32(model.d, "d")?,
        container::len_u32(model.blocks.len(), "K")?,
        container::len_u32(model.hidden, "h")?,
    ];
    let entries = model
        .param_names()
        .into_iter()
        .zip(model.params())
        .map(|(n, t)| (n, t.clone()))
        .collect();
    container::encode_named(
        MAGIC,
        &NamedTensors {
            version: VERSION,
            header,
            entries,
        },
    )
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<FlowModel> {
    let doc = container::decode_named(bytes, MAGIC, VERSION)?;
    let [d, k, h] = doc.header.map(|v| v as usize);
    let mut model = FlowModel {
        d,
        hidden: h,
        blocks: (0..k)
            .map(|b| CouplingBlock::identity(d, h, alternating_mask(d, b)))
            .collect(),
        prior: PriorHead::zeros(d),
    };
    let names = model.param_names();
    if doc.entries.len() != names.len() {
        return Err(Error::Format {
            offset: 0,
            detail: format!(
                "checkpoint holds {} tensors, a d={d} K={k} h={h} model needs {}",
                doc.entries.len(),
                names.len()
            ),
        });
    }
    for ((expected, slot), (name, t)) in names.iter().zip(model.params_mut()).zip(doc.entries) {
        if *expected != name || slot.shape() != t.shape() {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "entry {name} {:?} does not match {expected} {:?}",
                    t.shape(),
                    slot.shape()
                ),
            });
        }
        if !t.is_finite() {
            return Err(Error::Numeric(format!("checkpoint entry {name} is not finite")));
        }
        *slot = t;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &FlowModel, path: impl AsRef<Path>) -> Result<()> {
    container::write_file(path.as_ref(), &encode_checkpoint(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<FlowModel> {
    decode_checkpoint(&container::read_file(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::init_perturbed;

    #[test]
    fn roundtrip_is_exact() {
        let model = init_perturbed(5, 3, 4, 11, 0.7).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        assert_eq!(&bytes[..4], b"FCKP");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
    }

    #[test]
    fn header_layout() {
        let model = init_perturbed(2, 1, 3, 0, 0.1).unwrap();
        let bytes = encode_checkpoint(&model).unwrap();
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        assert_eq!([word(1), word(2), word(3)], [2, 1, 3]);
        assert_eq!(word(4) as usize, model.param_names().len());
        // first entry: name length at byte 24, then the name
        let name_len = word(5) as usize;
        assert_eq!(&bytes[28..28 + name_len], b"blocks.0.scale.w1");
    }

    #[test]
    fn corrupted_payload_rejected() {
        let model = init_perturbed(3, 2, 2, 1, 0.3).unwrap();
        let mut bytes = encode_checkpoint(&model).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(decode_checkpoint(&bytes), Err(Error::Format { .. })));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    }
}
