//! Single-file checkpoint: a magic line, one JSON header line, then the
//! numeric payload as little-endian `f64`.
//!
//! Payload layout: model parameters in [`Model::params`] order, followed by
//! the calibrator knot risks and knot values when a calibrator is present.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::domain::TimeNormalizer;
use crate::encoder::Mlp;
use crate::error::{Error, Result};
use crate::head::{Calibrator, HyperplaneHead};
use crate::model::Model;
use crate::trainer::{TrainConfig, TrainHistory, TrainedModel};

pub const MAGIC: &str = "HPSURV-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: TrainConfig,
    /// Encoder widths including the input dimension.
    encoder_sizes: Vec<usize>,
    horizon_months: f64,
    calibrator_knots: Option<usize>,
    history_digest: String,
    history: TrainHistory,
    seed_lineage: Vec<u64>,
    payload_len: usize,
}

pub fn write_checkpoint<W: Write>(trained: &TrainedModel, mut w: W) -> Result<()> {
    let model = &trained.model;
    let mut payload = model.params();
    let calibrator_knots = trained.calibrator.as_ref().map(|c| {
        payload.extend_from_slice(c.knot_risks());
        payload.extend_from_slice(c.knot_values());
        c.knot_risks().len()
    });
    let header = Header {
        format_version: FORMAT_VERSION,
        config: trained.config.clone(),
        encoder_sizes: model.encoder.sizes(),
        horizon_months: model.time.horizon_months,
        calibrator_knots,
        history_digest: trained.history.digest()?,
        history: trained.history.clone(),
        seed_lineage: trained.seed_lineage.clone(),
        payload_len: payload.len(),
    };
    writeln!(w, "{MAGIC} v{FORMAT_VERSION}")?;
    writeln!(w, "{}", serde_json::to_string(&header)?)?;
    let mut bytes = Vec::with_capacity(8 * payload.len());
    for x in &payload {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(())
}

pub fn checkpoint_bytes(trained: &TrainedModel) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_checkpoint(trained, &mut buf)?;
    Ok(buf)
}

fn split_line(bytes: &[u8]) -> Result<(&str, &[u8])> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("truncated header".into()))?;
    let line = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))?;
    Ok((line, &bytes[nl + 1..]))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<TrainedModel> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (magic, rest) = split_line(&bytes)?;
    let expected = format!("{MAGIC} v{FORMAT_VERSION}");
    if magic != expected {
        return Err(Error::Checkpoint(format!("unrecognized magic line {magic:?}, expected {expected:?}")));
    }
    let (header_line, payload_bytes) = split_line(rest)?;
    let header: Header = serde_json::from_str(header_line)?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", header.format_version)));
    }
    if payload_bytes.len() != 8 * header.payload_len {
        return Err(Error::Checkpoint(format!(
            "payload has {} bytes, header declares {} values",
            payload_bytes.len(),
            header.payload_len
        )));
    }
    if header.history.digest()? != header.history_digest {
        return Err(Error::Checkpoint("history digest mismatch".into()));
    }
    let payload: Vec<f64> = payload_bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunks of 8")))
        .collect();

    let encoder = Mlp::zeros(&header.encoder_sizes)?;
    let dim = *header
        .encoder_sizes
        .last()
        .ok_or_else(|| Error::Checkpoint("empty encoder sizes".into()))?;
    let mut model = Model {
        encoder,
        head: HyperplaneHead::with_effective(vec![0.0; dim], 0.0, 1.0, 1.0),
        time: TimeNormalizer::new(header.horizon_months)?,
    };
    let n = model.num_params();
    let n_knots = header.calibrator_knots.unwrap_or(0);
    if payload.len() != n + 2 * n_knots {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values, shapes need {}",
            payload.len(),
            n + 2 * n_knots
        )));
    }
    if let Some(i) = payload.iter().position(|x| !x.is_finite()) {
        return Err(Error::Checkpoint(format!("non-finite payload value at index {i}")));
    }
    model.set_params(&payload[..n])?;
    let calibrator = match header.calibrator_knots {
        Some(k) => Some(Calibrator::from_knots(payload[n..n + k].to_vec(), payload[n + k..].to_vec())?),
        None => None,
    };
    Ok(TrainedModel {
        config: header.config,
        model,
        calibrator,
        history: header.history,
        seed_lineage: header.seed_lineage,
    })
}

pub fn save_checkpoint(trained: &TrainedModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(trained)?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<TrainedModel> {
    read_checkpoint(std::fs::File::open(path)?)
}
