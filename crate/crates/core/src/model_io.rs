//! Model directory layout.
//!
//! ```text
//! <dir>/config.toml      resolved run configuration
//! <dir>/embeddings.tsv   kind \t id \t v_1 ... v_dim   (8 significant digits)
//! <dir>/mlp.txt          dense layers, see below
//! <dir>/metrics.log      one line per batch (written by the caller)
//! ```
//!
//! `mlp.txt` starts with `dims <input> <hidden>... 1`, then for every layer a
//! `layer <i> <n_in> <n_out>` header, `n_out` lines `w <n_in values>` and one
//! `b <n_out values>` line. Values are written in shortest round-trip form,
//! so a reload reproduces the parameters exactly.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::ctr_net::{Dense, EginModel, MlpParams};
use crate::embed_learn::{EmbeddingTable, TableKind};
use crate::error::{Error, Result};
use crate::multi_interest::CtrTables;

pub const CONFIG_FILE: &str = "config.toml";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const MLP_FILE: &str = "mlp.txt";
pub const METRICS_FILE: &str = "metrics.log";

/// One TSV row per stored vector, tables in the given order, ids ascending.
pub fn write_embeddings<W: Write>(mut out: W, tables: &[&EmbeddingTable]) -> std::io::Result<()> {
    for table in tables {
        for (id, v) in table.entries() {
            write!(out, "{}\t{}", table.kind().name(), id)?;
            for (i, x) in v.iter().enumerate() {
                let sep = if i == 0 { '\t' } else { ' ' };
                write!(out, "{sep}{x:.7e}")?;
            }
            writeln!(out)?;
        }
    }
    out.flush()
}

pub type EmbeddingRow = (TableKind, u64, Vec<f64>);

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Parse { line: n + 1, message };
        let mut parts = line.split('\t');
        let kind = parts
            .next()
            .and_then(TableKind::from_name)
            .ok_or_else(|| bad("unknown table kind".into()))?;
        let id = parts
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .ok_or_else(|| bad("bad id".into()))?;
        let values = parts
            .next()
            .ok_or_else(|| bad("missing vector".into()))?
            .split(' ')
            .map(|s| s.parse::<f64>().map_err(|_| bad(format!("bad value `{s}`"))))
            .collect::<Result<Vec<f64>>>()?;
        rows.push((kind, id, values));
    }
    Ok(rows)
}

pub fn write_mlp<W: Write>(mut out: W, mlp: &MlpParams) -> std::io::Result<()> {
    let dims: Vec<String> = mlp.layer_dims().iter().map(|d| d.to_string()).collect();
    writeln!(out, "dims {}", dims.join(" "))?;
    let join = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(" ");
    for (i, layer) in mlp.layers.iter().enumerate() {
        writeln!(out, "layer {i} {} {}", layer.n_in, layer.n_out)?;
        for row in layer.weights.chunks_exact(layer.n_in) {
            writeln!(out, "w {}", join(row))?;
        }
        writeln!(out, "b {}", join(&layer.bias))?;
    }
    out.flush()
}

pub fn read_mlp(path: &Path) -> Result<MlpParams> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let bad = |line: usize, message: &str| Error::Parse {
        line: line + 1,
        message: message.to_string(),
    };
    let numbers = |line: usize, s: &str| -> Result<Vec<f64>> {
        s.split_whitespace()
            .map(|x| x.parse::<f64>().map_err(|_| bad(line, "bad number")))
            .collect()
    };
    let (n, head) = lines.next().ok_or_else(|| bad(0, "empty file"))?;
    let dims: Vec<usize> = head
        .strip_prefix("dims ")
        .ok_or_else(|| bad(n, "expected `dims`"))?
        .split_whitespace()
        .map(|x| x.parse().map_err(|_| bad(n, "bad dimension")))
        .collect::<Result<_>>()?;
    if dims.len() < 2 || dims.contains(&0) || dims.last() != Some(&1) {
        return Err(bad(n, "layer dims must be positive and end in 1"));
    }
    let mut layers = Vec::new();
    for (i, w) in dims.windows(2).enumerate() {
        let (n_in, n_out) = (w[0], w[1]);
        let (n, header) = lines.next().ok_or_else(|| bad(n, "missing layer"))?;
        if header != format!("layer {i} {n_in} {n_out}") {
            return Err(bad(n, "layer header does not match dims"));
        }
        let mut weights = Vec::with_capacity(n_in * n_out);
        for _ in 0..n_out {
            let (n, row) = lines.next().ok_or_else(|| bad(n, "missing weight row"))?;
            let v = numbers(n, row.strip_prefix("w ").ok_or_else(|| bad(n, "expected `w`"))?)?;
            if v.len() != n_in {
                return Err(bad(n, "weight row has the wrong length"));
            }
            weights.extend(v);
        }
        let (n, b) = lines.next().ok_or_else(|| bad(n, "missing bias"))?;
        let bias = numbers(n, b.strip_prefix("b ").ok_or_else(|| bad(n, "expected `b`"))?)?;
        if bias.len() != n_out {
            return Err(bad(n, "bias has the wrong length"));
        }
        layers.push(Dense {
            n_in,
            n_out,
            weights,
            bias,
        });
    }
    Ok(MlpParams { layers })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

/// Writes config, embeddings and MLP into `dir`, creating it if needed.
pub fn save_model(dir: &Path, model: &EginModel, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let emb_path = dir.join(EMBEDDINGS_FILE);
    let tables = [&model.graph.item, &model.graph.query, &model.ctr.bin, &model.ctr.position];
    write_embeddings(create(&emb_path)?, &tables).map_err(|e| Error::io(&emb_path, e))?;
    let mlp_path = dir.join(MLP_FILE);
    write_mlp(create(&mlp_path)?, &model.mlp).map_err(|e| Error::io(&mlp_path, e))?;
    Ok(())
}

/// Reloads a model written by [`save_model`]. Ids absent from the TSV keep
/// their seeded initial vectors.
pub fn load_model(dir: &Path) -> Result<(RunConfig, EginModel)> {
    let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
    let train = cfg.train_config()?;
    let mlp = read_mlp(&dir.join(MLP_FILE))?;
    let expected = 3 * train.features.k * train.dim;
    if mlp.input_dim() < expected {
        return Err(Error::Contract(format!(
            "network input {} is smaller than the {expected} feature entries the config implies",
            mlp.input_dim()
        )));
    }
    let mut model = EginModel {
        graph: crate::embed_learn::GraphTables::new(train.dim, train.seed),
        ctr: CtrTables::new(train.dim, train.seed),
        mlp,
        features: train.features,
    };
    for (kind, id, v) in read_embeddings(&dir.join(EMBEDDINGS_FILE))? {
        let table = match kind {
            TableKind::Item => &mut model.graph.item,
            TableKind::Query => &mut model.graph.query,
            TableKind::Bin => &mut model.ctr.bin,
            TableKind::Position => &mut model.ctr.position,
        };
        table.set(id, v)?;
    }
    Ok((cfg, model))
}
