//! On-disk cache of per-video fusion inputs, keyed by video, upstream model
//! checksum, `T`, `P` and sampling seed. Entries are written atomically.

use std::path::PathBuf;

use dap_models::action_parser::{NonVideoFeatures, VideoBackboneFeatures};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::archive;
use crate::error::Result;

const MAGIC: &[u8; 8] = b"DAPFEAT1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    key: String,
    num_frames: usize,
    max_persons: usize,
    lengths: [usize; 7],
}

pub struct FeatureCache {
    dir: PathBuf,
}

impl FeatureCache {
    pub fn new(dir: PathBuf) -> Self {
        FeatureCache { dir }
    }

    pub fn key(video_id: &str, model_checksum: &str, t: usize, p: usize, seed: u64, provider: &str) -> String {
        let doc = format!("{video_id}\u{0}{model_checksum}\u{0}{t}\u{0}{p}\u{0}{seed}\u{0}{provider}");
        hex::encode(Sha256::digest(doc.as_bytes()))
    }

    fn path(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.feat"))
    }

    /// `None` when absent or unreadable; a damaged entry is recomputed.
    pub fn get(&self, key: &str) -> Option<(NonVideoFeatures, VideoBackboneFeatures)> {
        let path = self.path(key);
        if !path.exists() {
            return None;
        }
        let (h, data): (Header, Vec<f32>) = archive::read(&path, MAGIC).ok()?;
        if h.key != key || h.lengths.iter().sum::<usize>() != data.len() {
            return None;
        }
        let mut blocks = Vec::with_capacity(7);
        let mut at = 0;
        for len in h.lengths {
            blocks.push(data[at..at + len].to_vec());
            at += len;
        }
        let spatial = blocks.pop().unwrap();
        let temporal = blocks.pop().unwrap();
        let mask = blocks.pop().unwrap();
        let state = blocks.pop().unwrap();
        let part = blocks.pop().unwrap();
        let instance = blocks.pop().unwrap();
        let frame = blocks.pop().unwrap();
        let nvf = NonVideoFeatures {
            num_frames: h.num_frames,
            max_persons: h.max_persons,
            frame,
            instance,
            part,
            state,
            mask: mask.iter().map(|&m| m != 0.0).collect(),
        };
        nvf.validate().ok()?;
        let opt = |v: Vec<f32>| if v.is_empty() { None } else { Some(v) };
        Some((
            nvf,
            VideoBackboneFeatures {
                temporal: opt(temporal),
                spatial: opt(spatial),
            },
        ))
    }

    pub fn put(&self, key: &str, nvf: &NonVideoFeatures, vbf: &VideoBackboneFeatures) -> Result<()> {
        let mask: Vec<f32> = nvf.mask.iter().map(|&m| m as u8 as f32).collect();
        let empty = Vec::new();
        let temporal = vbf.temporal.as_ref().unwrap_or(&empty);
        let spatial = vbf.spatial.as_ref().unwrap_or(&empty);
        let blocks: [&[f32]; 7] = [&nvf.frame, &nvf.instance, &nvf.part, &nvf.state, &mask, temporal, spatial];
        let header = Header {
            key: key.to_string(),
            num_frames: nvf.num_frames,
            max_persons: nvf.max_persons,
            lengths: blocks.map(|b| b.len()),
        };
        let data: Vec<f32> = blocks.concat();
        archive::write(&self.path(key), MAGIC, &header, &data)
    }
}
