//! Binary checkpoints: a little-endian `u64` header length, a JSON header,
//! then every parameter as a little-endian `f64`.

use super::{EncpModel, ModelConfig};
use crate::equivariant::EquivariantEncoder;
use crate::error::{EncpError, Result};
use crate::group::{regular_representation, FiniteGroup, GroupRepresentation};
use crate::nn::MlpParams;
use crate::rng::digest_hex;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

const FORMAT: &str = "encp-checkpoint";
const VERSION: u32 = 1;
const EQUIVARIANCE_TOL: f64 = 1e-9;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    group: String,
    config: ModelConfig,
    rep_x: Vec<Vec<Vec<f64>>>,
    rep_y: Vec<Vec<Vec<f64>>>,
    dims_x: Vec<usize>,
    dims_y: Vec<usize>,
    block_sizes: Vec<usize>,
    num_values: usize,
    payload_sha256: String,
}

fn payload(model: &EncpModel) -> Vec<f64> {
    let mut values = model.flatten();
    values.extend(model.enc_x().center().iter());
    values.extend(model.enc_y().center().iter());
    values
}

pub fn save_checkpoint(model: &EncpModel, path: &Path) -> Result<()> {
    let values = payload(model);
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        group: model.group().label(),
        config: model.config().clone(),
        rep_x: model.rep_x().to_rows(),
        rep_y: model.rep_y().to_rows(),
        dims_x: model.enc_x().mlp().dims(),
        dims_y: model.enc_y().mlp().dims(),
        block_sizes: model.blocks().iter().map(|b| b.nrows()).collect(),
        num_values: values.len(),
        payload_sha256: digest_hex(&bytes),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + json.len() + bytes.len());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&bytes);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn encoder(
    group: &FiniteGroup,
    rep_in: GroupRepresentation,
    dims: &[usize],
    config: &ModelConfig,
    flat: &[f64],
    center: &[f64],
) -> Result<EquivariantEncoder> {
    let bad = |m: String| EncpError::Checkpoint(m);
    if dims.len() < 2 || dims[0] != rep_in.dim() {
        return Err(bad("encoder dims do not match the input representation".into()));
    }
    let regular = regular_representation(group);
    let mut reps = vec![rep_in];
    for &w in &dims[1..] {
        if w % group.order() != 0 {
            return Err(bad(format!("layer width {w} is not a multiple of |G|")));
        }
        reps.push(regular.repeat(w / group.order())?);
    }
    let mut mlp = MlpParams::zeros(dims, config.activation);
    mlp.assign_flat(flat)?;
    EquivariantEncoder::from_stored(mlp, reps, DVector::from_column_slice(center), EQUIVARIANCE_TOL)
}

pub fn load_checkpoint(path: &Path) -> Result<EncpModel> {
    let raw = fs::read(path)?;
    let bad = |m: &str| EncpError::Checkpoint(format!("{}: {m}", path.display()));
    if raw.len() < 8 {
        return Err(bad("truncated header"));
    }
    let hlen = u64::from_le_bytes(raw[..8].try_into().expect("eight bytes")) as usize;
    let body = raw.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(bad("unknown format or version"));
    }
    let bytes = &raw[8 + hlen..];
    if bytes.len() != header.num_values * 8 {
        return Err(bad("payload length mismatch"));
    }
    if digest_hex(bytes) != header.payload_sha256 {
        return Err(bad("payload digest mismatch"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();

    let group = FiniteGroup::from_label(&header.group)?;
    let rep_x = GroupRepresentation::from_rows(group.clone(), &header.rep_x)?;
    let rep_y = GroupRepresentation::from_rows(group.clone(), &header.rep_y)?;
    let count = |dims: &[usize]| dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
    let (nx, ny) = (count(&header.dims_x), count(&header.dims_y));
    let nb: usize = header.block_sizes.iter().map(|m| m * m).sum();
    let (rx, ry) = (
        *header.dims_x.last().unwrap_or(&0),
        *header.dims_y.last().unwrap_or(&0),
    );
    if values.len() != nx + ny + nb + rx + ry {
        return Err(bad("payload does not match the declared shapes"));
    }
    let mut pos = nx + ny + nb;
    let cx = &values[pos..pos + rx];
    pos += rx;
    let cy = &values[pos..pos + ry];
    let enc_x = encoder(&group, rep_x, &header.dims_x, &header.config, &values[..nx], cx)?;
    let enc_y = encoder(&group, rep_y, &header.dims_y, &header.config, &values[nx..nx + ny], cy)?;
    let mut pos = nx + ny;
    let blocks = header
        .block_sizes
        .iter()
        .map(|&m| {
            let b = DMatrix::from_column_slice(m, m, &values[pos..pos + m * m]);
            pos += m * m;
            b
        })
        .collect();
    EncpModel::from_parts(enc_x, enc_y, blocks, header.config)
}
