use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::InteractionDataset;
use crate::error::{Error, Result};

/// Pretrained item embeddings, one row per item, in file order.
#[derive(Clone, Debug, PartialEq)]
pub struct ItemEmbeddings {
    pub ids: Vec<String>,
    pub dim: usize,
    pub values: Vec<f32>,
}

impl ItemEmbeddings {
    pub fn new(ids: Vec<String>, dim: usize, values: Vec<f32>) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Data("no items".into()));
        }
        if dim == 0 || values.len() != ids.len() * dim {
            return Err(Error::Data(format!(
                "{} items of dim {dim} need {} values, got {}",
                ids.len(),
                ids.len() * dim,
                values.len()
            )));
        }
        Ok(ItemEmbeddings { ids, dim, values })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn index(&self) -> HashMap<&str, usize> {
        self.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect()
    }
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    item_id: String,
    embedding: Vec<f32>,
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-blank lines with 1-based line numbers.
fn lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

pub fn ingest_items(path: &Path) -> Result<ItemEmbeddings> {
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    let mut seen = HashMap::new();
    for (no, line) in lines(path)? {
        let rec: ItemRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(path, no, format!("malformed item record: {e}")))?;
        if rec.embedding.is_empty() {
            return Err(parse_err(path, no, "empty embedding"));
        }
        match dim {
            None => dim = Some(rec.embedding.len()),
            Some(d) if d != rec.embedding.len() => {
                return Err(parse_err(
                    path,
                    no,
                    format!("embedding has dimension {}, expected {d}", rec.embedding.len()),
                ))
            }
            _ => {}
        }
        if rec.embedding.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, no, "non-finite embedding value"));
        }
        if let Some(prev) = seen.insert(rec.item_id.clone(), no) {
            return Err(parse_err(
                path,
                no,
                format!("duplicate item_id `{}` (first on line {prev})", rec.item_id),
            ));
        }
        ids.push(rec.item_id);
        values.extend(rec.embedding);
    }
    let Some(dim) = dim else {
        return Err(Error::Data(format!("no items in {}", path.display())));
    };
    ItemEmbeddings::new(ids, dim, values)
}

pub fn write_items(path: &Path, items: &ItemEmbeddings) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (i, id) in items.ids.iter().enumerate() {
        let rec = ItemRecord {
            item_id: id.clone(),
            embedding: items.row(i).to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct SequenceRecord<'a> {
    user_id: &'a str,
    item_ids: &'a [String],
}

/// Reads interactions as either per-user sequences
/// `{"user_id", "item_ids": [...]}` (already chronological) or triplets
/// `{"user_id", "item_id", "timestamp"}`, which are ordered by
/// `(timestamp, item_id)`. Both forms may be mixed; triplets are appended
/// after any sequence records for the same user.
pub fn ingest_interactions(path: &Path) -> Result<InteractionDataset> {
    let mut seqs: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut triplets: BTreeMap<String, Vec<(f64, String)>> = BTreeMap::new();
    for (no, line) in lines(path)? {
        let v: Value =
            serde_json::from_str(&line).map_err(|e| parse_err(path, no, format!("malformed record: {e}")))?;
        let obj = v
            .as_object()
            .ok_or_else(|| parse_err(path, no, "record is not an object"))?;
        let user = obj
            .get("user_id")
            .and_then(Value::as_str)
            .ok_or_else(|| parse_err(path, no, "missing string field `user_id`"))?
            .to_string();
        if let Some(items) = obj.get("item_ids") {
            let items = items
                .as_array()
                .ok_or_else(|| parse_err(path, no, "`item_ids` is not an array"))?
                .iter()
                .map(|x| x.as_str().map(str::to_string))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| parse_err(path, no, "`item_ids` must hold strings"))?;
            seqs.entry(user).or_default().extend(items);
        } else if let (Some(item), Some(ts)) = (obj.get("item_id"), obj.get("timestamp")) {
            let item = item
                .as_str()
                .ok_or_else(|| parse_err(path, no, "`item_id` is not a string"))?;
            let ts = ts
                .as_f64()
                .ok_or_else(|| parse_err(path, no, "`timestamp` is not a number"))?;
            triplets.entry(user).or_default().push((ts, item.to_string()));
        } else {
            return Err(parse_err(path, no, "unknown interaction format"));
        }
    }
    for (user, mut events) in triplets {
        events.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        seqs.entry(user).or_default().extend(events.into_iter().map(|(_, i)| i));
    }
    if seqs.is_empty() {
        return Err(Error::Data(format!("no interactions in {}", path.display())));
    }
    Ok(InteractionDataset::new(seqs))
}

pub fn write_interactions(path: &Path, data: &InteractionDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for (user, items) in &data.users {
        serde_json::to_writer(
            &mut w,
            &SequenceRecord {
                user_id: user,
                item_ids: items,
            },
        )?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
