use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{FeatureSchema, FieldDescriptor, InteractionRecord, Vocabulary};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularItemColumn {
    pub name: String,
    #[serde(default)]
    pub multi_valued: bool,
    /// Separator between values of a multi-valued cell.
    #[serde(default = "default_value_separator")]
    pub value_separator: char,
}

fn default_value_separator() -> char {
    '|'
}

fn default_delimiter() -> char {
    ','
}

/// Column mapping for a delimited click log with a header row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularConfig {
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
    pub user_column: String,
    pub item_column: String,
    pub label_column: String,
    pub timestamp_column: String,
    #[serde(default)]
    pub user_feature_columns: Vec<String>,
    #[serde(default)]
    pub item_feature_columns: Vec<TabularItemColumn>,
    /// Item feature columns used as side information; defaults to all of them.
    #[serde(default)]
    pub side_info: Vec<String>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Schema(format!("column `{name}` is not present in the file header")))
}

/// Load a delimited interaction log; vocabularies are built in first-seen order.
pub fn load_tabular(path: &Path, config: &TabularConfig) -> Result<(Vec<InteractionRecord>, FeatureSchema)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    if !config.delimiter.is_ascii() {
        return Err(Error::Schema("delimiter must be an ASCII character".into()));
    }
    let file_name = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(config.delimiter as u8)
        .has_headers(true)
        .from_path(path)?;
    let headers = reader.headers()?.clone();
    let user_col = column(&headers, &config.user_column)?;
    let item_col = column(&headers, &config.item_column)?;
    let label_col = column(&headers, &config.label_column)?;
    let ts_col = column(&headers, &config.timestamp_column)?;
    let user_feat: Vec<usize> = config
        .user_feature_columns
        .iter()
        .map(|c| column(&headers, c))
        .collect::<Result<_>>()?;
    let item_feat: Vec<usize> = config
        .item_feature_columns
        .iter()
        .map(|c| column(&headers, &c.name))
        .collect::<Result<_>>()?;

    let mut users = Vocabulary::default();
    let mut items = Vocabulary::default();
    let mut user_vocabs = vec![Vocabulary::default(); user_feat.len()];
    let mut item_vocabs = vec![Vocabulary::default(); item_feat.len()];
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        // Line 1 is the header.
        let lineno = i + 2;
        let row = row?;
        let parse_err = |message: String| Error::Parse {
            file: file_name.clone(),
            line: lineno,
            message,
        };
        let cell = |c: usize| row.get(c).ok_or_else(|| parse_err(format!("missing column {c}")));
        let label = match cell(label_col)?.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(parse_err(format!("label `{other}` is not binary"))),
        };
        let ts_raw = cell(ts_col)?;
        let timestamp = ts_raw
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("invalid timestamp `{ts_raw}`")))?;
        let user_fields = user_feat
            .iter()
            .zip(&mut user_vocabs)
            .map(|(&c, v)| cell(c).map(|s| v.id(s)))
            .collect::<Result<_>>()?;
        let mut item_fields = Vec::with_capacity(item_feat.len());
        for ((&c, spec), v) in item_feat.iter().zip(&config.item_feature_columns).zip(&mut item_vocabs) {
            let raw = cell(c)?;
            let mut ids: Vec<usize> = if spec.multi_valued {
                raw.split(spec.value_separator).filter(|s| !s.is_empty()).map(|s| v.id(s)).collect()
            } else {
                vec![v.id(raw)]
            };
            ids.dedup();
            if ids.is_empty() {
                return Err(parse_err(format!("empty value in column `{}`", spec.name)));
            }
            item_fields.push(ids);
        }
        records.push(InteractionRecord {
            user_id: users.id(cell(user_col)?),
            item_id: items.id(cell(item_col)?),
            user_fields,
            item_fields,
            label,
            timestamp,
        });
    }

    let side_info = if config.side_info.is_empty() {
        config.item_feature_columns.iter().map(|c| c.name.clone()).collect()
    } else {
        config.side_info.clone()
    };
    let schema = FeatureSchema {
        user_id: FieldDescriptor::single("user_id", users.len()),
        user_fields: config
            .user_feature_columns
            .iter()
            .zip(&user_vocabs)
            .map(|(n, v)| FieldDescriptor::single(n.clone(), v.len()))
            .collect(),
        item_id: FieldDescriptor::single("item_id", items.len()),
        item_fields: config
            .item_feature_columns
            .iter()
            .zip(&item_vocabs)
            .map(|(c, v)| FieldDescriptor {
                name: c.name.clone(),
                vocab_size: v.len(),
                multi_valued: c.multi_valued,
            })
            .collect(),
        side_info,
    };
    schema.validate()?;
    Ok((records, schema))
}
