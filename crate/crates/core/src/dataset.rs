//! On-disk datasets (JSON lines: one header, then one user per line) and
//! conversion of raw records into channelized users.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embed::{embed_text, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::ingest::{extract_channels, RawUserRecord, TimeWindow};
use crate::schema::{vectorize, ChannelBags, ChannelKind, ChannelSchema, ChannelizedUser, LabeledDataset, Provenance, Vocabulary};

pub const DATASET_FORMAT: &str = "fsspip-dataset";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    schema_hash: String,
    num_classes: usize,
    d_em: usize,
    provenance: Provenance,
    vocab_sizes: Vec<usize>,
    #[serde(default)]
    class_names: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocabulary: Option<Vocabulary>,
}

pub fn write_dataset<W: Write>(data: &LabeledDataset, mut w: W) -> Result<()> {
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        schema_hash: data.schema.hash(),
        num_classes: data.num_classes,
        d_em: data.d_em,
        provenance: data.provenance,
        vocab_sizes: data.vocab_sizes.clone(),
        class_names: data.class_names.clone(),
        vocabulary: data.vocabulary.clone(),
    };
    let io = |e| Error::io("<dataset stream>", e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for u in &data.users {
        serde_json::to_writer(&mut w, u)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read_dataset<R: BufRead>(schema: &ChannelSchema, r: R) -> Result<LabeledDataset> {
    let mut lines = r.lines();
    let parse_err = |line: usize, e: &dyn std::fmt::Display| Error::Parse {
        line,
        message: e.to_string(),
    };
    let first = lines
        .next()
        .ok_or_else(|| parse_err(1, &"missing dataset header"))?
        .map_err(|e| parse_err(1, &e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| parse_err(1, &e))?;
    if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
        return Err(Error::Validation(format!(
            "unsupported dataset {} v{}",
            header.format, header.version
        )));
    }
    if header.schema_hash != schema.hash() {
        return Err(Error::SchemaMismatch {
            expected: schema.hash(),
            found: header.schema_hash,
        });
    }
    let mut data = LabeledDataset::new(
        schema.clone(),
        header.vocab_sizes,
        header.d_em,
        header.num_classes,
        header.provenance,
    );
    data.class_names = header.class_names;
    data.vocabulary = header.vocabulary;
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| parse_err(lineno, &e))?;
        if line.trim().is_empty() {
            continue;
        }
        let u: ChannelizedUser = serde_json::from_str(&line).map_err(|e| parse_err(lineno, &e))?;
        data.users.push(u);
    }
    data.validate()?;
    Ok(data)
}

pub fn save_dataset(data: &LabeledDataset, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_dataset(data, std::io::BufWriter::new(f))
}

pub fn load_dataset(schema: &ChannelSchema, path: &Path) -> Result<LabeledDataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(schema, std::io::BufReader::new(f))
}

/// Embed every dense-channel document of `bags` and vectorize against `vocab`.
pub fn channelize_bags(
    schema: &ChannelSchema,
    bags: &ChannelBags,
    vocab: &Vocabulary,
    provider: &dyn EmbeddingProvider,
) -> Result<ChannelizedUser> {
    let mut dense = BTreeMap::new();
    for desc in schema.channels().iter().filter(|c| c.kind == ChannelKind::Dense) {
        dense.insert(desc.id, embed_text(bags.document(&desc.name), provider)?);
    }
    vectorize(schema, bags, vocab, &dense, provider.dim())
}

/// Raw record straight to a channelized user.
pub fn channelize_record(
    schema: &ChannelSchema,
    record: &RawUserRecord,
    window: &TimeWindow,
    vocab: &Vocabulary,
    provider: &dyn EmbeddingProvider,
) -> Result<ChannelizedUser> {
    channelize_bags(schema, &extract_channels(schema, record, window), vocab, provider)
}
