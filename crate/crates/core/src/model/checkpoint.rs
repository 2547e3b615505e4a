use crate::error::{Error, Result};
use crate::model::{BlockParams, ModelConfig, ModelParams};
use crate::numeric::{FfnWeights, Matrix};
use crate::scalar::Scalar;
use std::collections::HashMap;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FMEM";
const VERSION: u32 = 1;

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptCheckpoint(msg.into())
}

struct Tensor {
    dims: Vec<u64>,
    data: Vec<f32>,
}

fn write_tensor<T: Scalar, W: Write>(
    w: &mut W,
    name: &str,
    dims: &[u64],
    data: &[T],
) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    debug_assert_eq!(dims.iter().product::<u64>() as usize, data.len());
    for &v in data {
        w.write_all(&(v.to_f64s() as f32).to_le_bytes())?;
    }
    Ok(())
}

fn tensor_entries(config: &ModelConfig) -> Vec<(String, Vec<u64>)> {
    let d = config.d_model as u64;
    let d_ff = config.d_ff as u64;
    let v = config.vocab_size as u64;
    let mut out = vec![("embed".to_string(), vec![v, d])];
    for b in 0..config.num_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        out.push((p("attn_norm"), vec![d]));
        out.push((p("wq"), vec![d, d]));
        out.push((p("wk"), vec![d, d]));
        out.push((p("wv"), vec![d, d]));
        out.push((p("wo"), vec![d, d]));
        out.push((p("ffn_norm"), vec![d]));
        out.push((p("ffn.w_gate"), vec![d_ff, d]));
        out.push((p("ffn.b_gate"), vec![d_ff]));
        out.push((p("ffn.w_up"), vec![d_ff, d]));
        out.push((p("ffn.b_up"), vec![d_ff]));
        out.push((p("ffn.w_down"), vec![d, d_ff]));
        out.push((p("ffn.b_down"), vec![d]));
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![v, d]));
    out
}

/// Serializes a model to the `FMEM` container (f32 storage) and atomically
/// replaces `path` via a temp file plus rename.
pub fn save_checkpoint<T: Scalar>(params: &ModelParams<T>, path: &Path) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let tmp_path = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut w = BufWriter::new(fs::File::create(&tmp_path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        let blob = serde_json::to_vec(&params.config)?;
        w.write_all(&(blob.len() as u64).to_le_bytes())?;
        w.write_all(&blob)?;

        let entries = tensor_entries(&params.config);
        w.write_all(&(entries.len() as u32).to_le_bytes())?;
        write_tensor(&mut w, "embed", &[params.config.vocab_size as u64, params.config.d_model as u64], params.embed.data())?;
        for (b, blk) in params.blocks.iter().enumerate() {
            let d = params.config.d_model as u64;
            let d_ff = params.config.d_ff as u64;
            let p = |s: &str| format!("blocks.{b}.{s}");
            write_tensor(&mut w, &p("attn_norm"), &[d], &blk.attn_norm)?;
            write_tensor(&mut w, &p("wq"), &[d, d], blk.wq.data())?;
            write_tensor(&mut w, &p("wk"), &[d, d], blk.wk.data())?;
            write_tensor(&mut w, &p("wv"), &[d, d], blk.wv.data())?;
            write_tensor(&mut w, &p("wo"), &[d, d], blk.wo.data())?;
            write_tensor(&mut w, &p("ffn_norm"), &[d], &blk.ffn_norm)?;
            write_tensor(&mut w, &p("ffn.w_gate"), &[d_ff, d], blk.ffn.w_gate.data())?;
            write_tensor(&mut w, &p("ffn.b_gate"), &[d_ff], &blk.ffn.b_gate)?;
            write_tensor(&mut w, &p("ffn.w_up"), &[d_ff, d], blk.ffn.w_up.data())?;
            write_tensor(&mut w, &p("ffn.b_up"), &[d_ff], &blk.ffn.b_up)?;
            write_tensor(&mut w, &p("ffn.w_down"), &[d, d_ff], blk.ffn.w_down.data())?;
            write_tensor(&mut w, &p("ffn.b_down"), &[d], &blk.ffn.b_down)?;
        }
        write_tensor(&mut w, "final_norm", &[params.config.d_model as u64], &params.final_norm)?;
        write_tensor(&mut w, "unembed", &[params.config.vocab_size as u64, params.config.d_model as u64], params.unembed.data())?;
        w.flush()?;
    }
    fs::rename(&tmp_path, path)?;
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| corrupt(format!("truncated while reading {what}")))
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn take_tensor<T: Scalar>(
    tensors: &mut HashMap<String, Tensor>,
    name: &str,
    dims: &[u64],
) -> Result<Vec<T>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
    if t.dims != dims {
        return Err(corrupt(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.dims, dims
        )));
    }
    Ok(t.data.into_iter().map(|v| T::from_f64(v as f64)).collect())
}

fn take_matrix<T: Scalar>(
    tensors: &mut HashMap<String, Tensor>,
    name: &str,
    rows: u64,
    cols: u64,
) -> Result<Matrix<T>> {
    let data = take_tensor(tensors, name, &[rows, cols])?;
    Ok(Matrix::from_vec(rows as usize, cols as usize, data))
}

/// Loads a model from the `FMEM` container, validating the header, the
/// config, and the shape of every tensor.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<ModelParams<T>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic; not a model checkpoint"));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(corrupt(format!("unsupported version {version}")));
    }
    let blob_len = read_u64(&mut r, "config length")? as usize;
    if blob_len > 1 << 20 {
        return Err(corrupt("config blob implausibly large"));
    }
    let mut blob = vec![0u8; blob_len];
    read_exact_or(&mut r, &mut blob, "config blob")?;
    let config: ModelConfig = serde_json::from_slice(&blob)
        .map_err(|e| corrupt(format!("bad config json: {e}")))?;
    config
        .validate()
        .map_err(|e| corrupt(format!("invalid config: {e}")))?;

    let count = read_u32(&mut r, "tensor count")? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(&mut r, "tensor name length")? as usize;
        if name_len > 1024 {
            return Err(corrupt("tensor name implausibly long"));
        }
        let mut name_buf = vec![0u8; name_len];
        read_exact_or(&mut r, &mut name_buf, "tensor name")?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| corrupt("tensor name is not utf-8"))?;
        let rank = read_u32(&mut r, "tensor rank")? as usize;
        if rank > 4 {
            return Err(corrupt(format!("tensor {name} has rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r, "tensor dim")?);
        }
        let n = dims.iter().product::<u64>() as usize;
        let mut raw = vec![0u8; n * 4];
        read_exact_or(&mut r, &mut raw, &format!("tensor {name} data"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect::<Vec<_>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(corrupt(format!("tensor {name} contains non-finite values")));
        }
        if tensors.insert(name.clone(), Tensor { dims, data }).is_some() {
            return Err(corrupt(format!("duplicate tensor {name}")));
        }
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(corrupt("trailing bytes after last tensor"));
    }

    let d = config.d_model as u64;
    let d_ff = config.d_ff as u64;
    let v = config.vocab_size as u64;
    let embed = take_matrix(&mut tensors, "embed", v, d)?;
    let mut blocks = Vec::with_capacity(config.num_blocks);
    for b in 0..config.num_blocks {
        let p = |s: &str| format!("blocks.{b}.{s}");
        blocks.push(BlockParams {
            attn_norm: take_tensor(&mut tensors, &p("attn_norm"), &[d])?,
            wq: take_matrix(&mut tensors, &p("wq"), d, d)?,
            wk: take_matrix(&mut tensors, &p("wk"), d, d)?,
            wv: take_matrix(&mut tensors, &p("wv"), d, d)?,
            wo: take_matrix(&mut tensors, &p("wo"), d, d)?,
            ffn_norm: take_tensor(&mut tensors, &p("ffn_norm"), &[d])?,
            ffn: FfnWeights {
                w_gate: take_matrix(&mut tensors, &p("ffn.w_gate"), d_ff, d)?,
                b_gate: take_tensor(&mut tensors, &p("ffn.b_gate"), &[d_ff])?,
                w_up: take_matrix(&mut tensors, &p("ffn.w_up"), d_ff, d)?,
                b_up: take_tensor(&mut tensors, &p("ffn.b_up"), &[d_ff])?,
                w_down: take_matrix(&mut tensors, &p("ffn.w_down"), d, d_ff)?,
                b_down: take_tensor(&mut tensors, &p("ffn.b_down"), &[d])?,
            },
        });
    }
    let final_norm = take_tensor(&mut tensors, "final_norm", &[d])?;
    let unembed = take_matrix(&mut tensors, "unembed", v, d)?;
    if let Some(name) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {name}")));
    }
    Ok(ModelParams { config, embed, blocks, final_norm, unembed })
}
