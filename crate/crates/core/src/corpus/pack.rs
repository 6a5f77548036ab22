use crate::error::{Error, Result};

use super::Instance;

#[derive(Debug, Clone, Copy)]
pub struct PackConfig {
    pub max_len: usize,
    pub sep_id: u32,
    /// Allow one packed sequence to span two sources.
    pub cross_source: bool,
}

/// A model-ready sequence made of one or more instances (or one chunk of a
/// long instance).
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInstance {
    pub id: u64,
    pub token_ids: Vec<u32>,
    pub source: String,
    pub level: u8,
    pub members: Vec<u64>,
}

struct Buffer {
    ids: Vec<u32>,
    source: String,
    level: u8,
    members: Vec<u64>,
}

/// Greedy in-order packing: instances are joined with a separator while the
/// result fits in `max_len`; longer instances are cut into `max_len` chunks.
pub fn pack_sequences(instances: &[Instance], cfg: PackConfig) -> Result<Vec<PackedInstance>> {
    if cfg.max_len < 2 {
        return Err(Error::config(format!(
            "pack max_len must be at least 2, got {}",
            cfg.max_len
        )));
    }
    let mut out = Vec::new();
    let mut buf: Option<Buffer> = None;

    fn flush(out: &mut Vec<PackedInstance>, buf: &mut Option<Buffer>) {
        if let Some(b) = buf.take() {
            out.push(PackedInstance {
                id: out.len() as u64,
                token_ids: b.ids,
                source: b.source,
                level: b.level,
                members: b.members,
            });
        }
    }

    for inst in instances.iter().filter(|i| !i.token_ids.is_empty()) {
        let len = inst.token_ids.len();
        if len > cfg.max_len {
            flush(&mut out, &mut buf);
            for chunk in inst.token_ids.chunks(cfg.max_len) {
                out.push(PackedInstance {
                    id: out.len() as u64,
                    token_ids: chunk.to_vec(),
                    source: inst.source.clone(),
                    level: inst.level,
                    members: vec![inst.instance_id],
                });
            }
            continue;
        }
        let fits = buf
            .as_ref()
            .is_some_and(|b| b.ids.len() + 1 + len <= cfg.max_len && (cfg.cross_source || b.source == inst.source));
        if fits {
            let b = buf.as_mut().expect("checked above");
            b.ids.push(cfg.sep_id);
            b.ids.extend_from_slice(&inst.token_ids);
            b.level = b.level.max(inst.level);
            b.members.push(inst.instance_id);
        } else {
            flush(&mut out, &mut buf);
            buf = Some(Buffer {
                ids: inst.token_ids.clone(),
                source: inst.source.clone(),
                level: inst.level,
                members: vec![inst.instance_id],
            });
        }
    }
    flush(&mut out, &mut buf);
    Ok(out)
}
