//! Binary checkpoints: little-endian, magic `MNAT1`, model config echo,
//! sorted parameter table, f32 payloads, then optimizer moments and step.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParameterSet};
use crate::optim::AdamState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 5] = b"MNAT1";
const VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model_config: ModelConfig,
    pub params: ParameterSet,
    pub adam: AdamState,
    pub step: u64,
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> std::io::Result<()> {
        self.0.write_all(b)
    }
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn u64(&mut self, v: u64) -> std::io::Result<()> {
        self.bytes(&v.to_le_bytes())
    }
    fn f32s(&mut self, v: &[f32]) -> std::io::Result<()> {
        for x in v {
            self.bytes(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
        Ok(buf)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.bytes(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.bytes(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize> {
        Ok(self.u32()? as usize)
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        Ok(self
            .bytes(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
}

fn encode(ckpt: &Checkpoint, out: impl Write) -> std::io::Result<()> {
    let mut w = Writer(out);
    let c = &ckpt.model_config;
    w.bytes(MAGIC)?;
    w.u32(VERSION)?;
    for v in [
        c.vocab_size,
        c.model_dim,
        c.hidden_dim,
        c.layers_enc,
        c.layers_dec,
        c.heads,
        c.max_positions,
        c.max_length_bins,
    ] {
        w.u32(v as u32)?;
    }
    w.bytes(&c.dropout_rate.to_le_bytes())?;
    w.u64(c.seed)?;
    w.u32(ckpt.params.len() as u32)?;
    for (name, t) in ckpt.params.iter() {
        w.u32(name.len() as u32)?;
        w.bytes(name.as_bytes())?;
        w.u32(t.rank() as u32)?;
        for &d in t.shape() {
            w.u32(d as u32)?;
        }
    }
    for (_, t) in ckpt.params.iter() {
        w.f32s(t.data())?;
    }
    for (m, v) in ckpt.adam.first_moment.iter().zip(&ckpt.adam.second_moment) {
        w.f32s(m)?;
        w.f32s(v)?;
    }
    w.u64(ckpt.adam.step)?;
    w.u64(ckpt.step)?;
    w.0.flush()
}

fn decode(input: impl Read) -> Result<Checkpoint> {
    let mut r = Reader(input);
    if r.bytes(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 8];
    for d in &mut dims {
        *d = r.usize()?;
    }
    let dropout_rate = f32::from_le_bytes(r.bytes(4)?.try_into().expect("4 bytes"));
    let model_config = ModelConfig {
        vocab_size: dims[0],
        model_dim: dims[1],
        hidden_dim: dims[2],
        layers_enc: dims[3],
        layers_dec: dims[4],
        heads: dims[5],
        max_positions: dims[6],
        max_length_bins: dims[7],
        dropout_rate,
        seed: r.u64()?,
    };
    model_config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("stored config is invalid: {e}")))?;
    let count = r.usize()?;
    let expected = crate::model::parameter_shapes(&model_config).len();
    if count != expected {
        return Err(Error::Checkpoint(format!(
            "{count} parameters stored, config implies {expected}"
        )));
    }
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.usize()?;
        let name = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = r.usize()?;
        if rank > 2 {
            return Err(Error::Checkpoint(format!(
                "parameter {name} has rank {rank}"
            )));
        }
        let shape = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        table.push((name, shape));
    }
    let mut named = Vec::with_capacity(count);
    for (name, shape) in &table {
        let n = shape.iter().product();
        named.push((name.clone(), Tensor::param(shape.clone(), r.f32s(n)?)?));
    }
    let params = ParameterSet::from_named(&model_config, named)
        .map_err(|e| Error::Checkpoint(format!("parameter table: {e}")))?;
    let mut first_moment = Vec::with_capacity(count);
    let mut second_moment = Vec::with_capacity(count);
    for (_, t) in params.iter() {
        first_moment.push(r.f32s(t.numel())?);
        second_moment.push(r.f32s(t.numel())?);
    }
    let adam_step = r.u64()?;
    let step = r.u64()?;
    if !r.bytes(1).is_err() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint {
        model_config,
        params,
        adam: AdamState {
            first_moment,
            second_moment,
            step: adam_step,
        },
        step,
    })
}

/// Writes to a temporary sibling and renames it into place, so a failure
/// leaves any previous file at `path` intact.
pub fn save(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if ckpt.adam.first_moment.len() != ckpt.params.len() {
        return Err(Error::Checkpoint(
            "optimizer state does not match parameters".into(),
        ));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let result = File::create(&tmp)
        .and_then(|f| {
            let mut w = BufWriter::new(f);
            encode(ckpt, &mut w)?;
            w.into_inner().map_err(|e| e.into_error())?.sync_all()
        })
        .and_then(|_| std::fs::rename(&tmp, path));
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode(BufReader::new(file)).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Elementwise mean of parameter sets with identical names and shapes,
/// accumulated in `f64`.
pub fn average_parameters(sets: &[ParameterSet]) -> Result<ParameterSet> {
    let first = sets.first().ok_or(Error::Empty("checkpoints"))?;
    let mut sums: Vec<Vec<f64>> = first.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
    for set in sets {
        if set.names() != first.names() {
            return Err(Error::Checkpoint(
                "parameter names differ between checkpoints".into(),
            ));
        }
        for ((_, t), (_, f)) in set.iter().zip(first.iter()) {
            if t.shape() != f.shape() {
                return Err(Error::ShapeMismatch {
                    op: "average_checkpoints",
                    lhs: f.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        for (sum, (_, t)) in sums.iter_mut().zip(set.iter()) {
            for (s, &v) in sum.iter_mut().zip(t.data()) {
                *s += v as f64;
            }
        }
    }
    let n = sets.len() as f64;
    let mut out = first.clone();
    let tensors = sums
        .into_iter()
        .zip(first.iter())
        .map(|(sum, (_, t))| {
            Tensor::param(
                t.shape().to_vec(),
                sum.into_iter().map(|s| (s / n) as f32).collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    out.set_tensors(tensors)?;
    Ok(out)
}

/// Loads each checkpoint and averages their parameters. The returned
/// checkpoint carries the last file's optimizer state and step.
pub fn average_checkpoints<P: AsRef<Path>>(paths: &[P]) -> Result<Checkpoint> {
    if paths.is_empty() {
        return Err(Error::Empty("checkpoints"));
    }
    let loaded = paths.iter().map(load).collect::<Result<Vec<_>>>()?;
    let config = loaded[0].model_config;
    if loaded.iter().any(|c| c.model_config != config) {
        return Err(Error::Checkpoint(
            "model configs differ between checkpoints".into(),
        ));
    }
    let sets: Vec<ParameterSet> = loaded.iter().map(|c| c.params.clone()).collect();
    let params = average_parameters(&sets)?;
    let last = loaded.into_iter().last().expect("non-empty");
    Ok(Checkpoint { params, ..last })
}
