//! Synthetic dataset files and their loader: seeded users/items/pages CSVs,
//! referential-integrity checks, page assembly, and the seeded
//! train/validation/test split.

use crate::page::{Grid, PageError, PageInstance};
use crate::rng::SeededRng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("page candidate count {candidates} exceeds the {items} items")]
    NotEnoughItems { candidates: usize, items: usize },
    #[error("{what} must be at least 1")]
    EmptyDimension { what: &'static str },
    #[error("{file}: header {detail}")]
    Header { file: PathBuf, detail: String },
    #[error("{file} record {record}: {detail}")]
    Row {
        file: PathBuf,
        record: u64,
        detail: String,
    },
    #[error("{file} record {record}: duplicate id {id}")]
    DuplicateId {
        file: PathBuf,
        record: u64,
        id: u64,
    },
    #[error("pages record {record}: unknown user id {id}")]
    UnknownUser { record: u64, id: u64 },
    #[error("pages record {record}: unknown item id {id}")]
    UnknownItem { record: u64, id: u64 },
    #[error("pages record {record}: item id {id} repeats")]
    RepeatedItem { record: u64, id: u64 },
    #[error("{file}: {source}")]
    Csv { file: PathBuf, source: csv::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Page(#[from] PageError),
}

/// The three CSV files one dataset lives in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub users: PathBuf,
    pub items: PathBuf,
    pub pages: PathBuf,
}

impl DatasetFiles {
    /// Conventional file names under one directory.
    pub fn under(dir: &Path) -> Self {
        Self {
            users: dir.join("users.csv"),
            items: dir.join("items.csv"),
            pages: dir.join("pages.csv"),
        }
    }
}

/// Geometry of a synthetic dataset; `candidates` is the per-page pool the
/// policy selects from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetParams {
    pub users: usize,
    pub items: usize,
    pub user_width: usize,
    pub item_width: usize,
    pub pages: usize,
    pub candidates: usize,
    pub grid: Grid,
}

impl DatasetParams {
    pub fn validate(&self) -> Result<(), DatasetError> {
        for (what, value) in [
            ("user count", self.users),
            ("item count", self.items),
            ("user feature width", self.user_width),
            ("item feature width", self.item_width),
            ("page count", self.pages),
            ("candidate count", self.candidates),
        ] {
            if value == 0 {
                return Err(DatasetError::EmptyDimension { what });
            }
        }
        if self.candidates > self.items {
            return Err(DatasetError::NotEnoughItems {
                candidates: self.candidates,
                items: self.items,
            });
        }
        Ok(())
    }
}

fn feature_header(id_column: &str, width: usize) -> Vec<String> {
    let mut h = vec![id_column.to_string()];
    for i in 0..width {
        h.push(format!("f{i}"));
    }
    h
}

fn write_feature_csv(
    path: &Path,
    id_column: &str,
    width: usize,
    count: usize,
    rng: &mut SeededRng,
) -> Result<(), DatasetError> {
    let mut text = String::new();
    text.push_str(&feature_header(id_column, width).join(","));
    text.push('\n');
    for id in 0..count {
        write!(text, "{id}").unwrap();
        for _ in 0..width {
            write!(text, ",{}", rng.normal()).unwrap();
        }
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Write the three dataset files: standard-normal user/item features and
/// pages that pair a uniformly drawn user with `candidates` items sampled
/// without replacement. Byte-identical across runs with the same seed.
pub fn gen_dataset(
    params: &DatasetParams,
    files: &DatasetFiles,
    seed: u64,
) -> Result<(), DatasetError> {
    params.validate()?;
    let mut user_rng = SeededRng::derive(seed, "gen-users", &[]);
    write_feature_csv(
        &files.users,
        "user_id",
        params.user_width,
        params.users,
        &mut user_rng,
    )?;
    let mut item_rng = SeededRng::derive(seed, "gen-items", &[]);
    write_feature_csv(
        &files.items,
        "item_id",
        params.item_width,
        params.items,
        &mut item_rng,
    )?;

    let mut page_rng = SeededRng::derive(seed, "gen-pages", &[]);
    let mut text = String::new();
    text.push_str("user_id");
    for i in 0..params.candidates {
        write!(text, ",item_{i}").unwrap();
    }
    text.push('\n');
    for _ in 0..params.pages {
        write!(text, "{}", page_rng.below(params.users)).unwrap();
        for item in page_rng.sample_indices(params.items, params.candidates) {
            write!(text, ",{item}").unwrap();
        }
        text.push('\n');
    }
    std::fs::write(&files.pages, text)?;
    Ok(())
}

/// One page row: a user id and its candidate item ids in file order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PageRow {
    pub user: u64,
    pub items: Vec<u64>,
}

/// A parsed dataset with id lookups resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub user_width: usize,
    pub item_width: usize,
    pub users: HashMap<u64, Vec<f64>>,
    pub items: HashMap<u64, Vec<f64>>,
    pub pages: Vec<PageRow>,
}

fn csv_at(file: &Path) -> impl Fn(csv::Error) -> DatasetError + '_ {
    move |source| DatasetError::Csv {
        file: file.to_path_buf(),
        source,
    }
}

fn parse_id(
    field: &str,
    file: &Path,
    record: u64,
    what: &str,
) -> Result<u64, DatasetError> {
    field.parse().map_err(|_| DatasetError::Row {
        file: file.to_path_buf(),
        record,
        detail: format!("{what} {field:?} is not an unsigned integer"),
    })
}

fn load_feature_csv(
    path: &Path,
    id_column: &str,
) -> Result<(usize, HashMap<u64, Vec<f64>>), DatasetError> {
    let mut reader = csv::Reader::from_path(path).map_err(csv_at(path))?;
    let header = reader.headers().map_err(csv_at(path))?.clone();
    if header.len() < 2 || &header[0] != id_column {
        return Err(DatasetError::Header {
            file: path.to_path_buf(),
            detail: format!(
                "must start with {id_column} and at least one feature column"
            ),
        });
    }
    let width = header.len() - 1;
    let mut rows = HashMap::new();
    for (index, record) in reader.records().enumerate() {
        let record_no = index as u64 + 1;
        let record = record.map_err(csv_at(path))?;
        if record.len() != header.len() {
            return Err(DatasetError::Row {
                file: path.to_path_buf(),
                record: record_no,
                detail: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        let id = parse_id(&record[0], path, record_no, id_column)?;
        let mut features = Vec::with_capacity(width);
        for (i, field) in record.iter().skip(1).enumerate() {
            let value: f64 = field.parse().map_err(|_| DatasetError::Row {
                file: path.to_path_buf(),
                record: record_no,
                detail: format!("feature f{i} {field:?} is not a number"),
            })?;
            if !value.is_finite() {
                return Err(DatasetError::Row {
                    file: path.to_path_buf(),
                    record: record_no,
                    detail: format!("feature f{i} is non-finite"),
                });
            }
            features.push(value);
        }
        if rows.insert(id, features).is_some() {
            return Err(DatasetError::DuplicateId {
                file: path.to_path_buf(),
                record: record_no,
                id,
            });
        }
    }
    Ok((width, rows))
}

/// Parse and cross-check the three files. Every page row must reference
/// existing ids and list each candidate at most once.
pub fn load_dataset(files: &DatasetFiles) -> Result<Dataset, DatasetError> {
    let (user_width, users) = load_feature_csv(&files.users, "user_id")?;
    let (item_width, items) = load_feature_csv(&files.items, "item_id")?;

    let path = files.pages.as_path();
    let mut reader = csv::Reader::from_path(path).map_err(csv_at(path))?;
    let header = reader.headers().map_err(csv_at(path))?.clone();
    if header.len() < 2 || &header[0] != "user_id" {
        return Err(DatasetError::Header {
            file: path.to_path_buf(),
            detail: "must start with user_id and at least one item column".into(),
        });
    }
    let mut pages = Vec::new();
    for (index, record) in reader.records().enumerate() {
        let record_no = index as u64 + 1;
        let record = record.map_err(csv_at(path))?;
        if record.len() != header.len() {
            return Err(DatasetError::Row {
                file: path.to_path_buf(),
                record: record_no,
                detail: format!("{} fields, header has {}", record.len(), header.len()),
            });
        }
        let user = parse_id(&record[0], path, record_no, "user_id")?;
        if !users.contains_key(&user) {
            return Err(DatasetError::UnknownUser {
                record: record_no,
                id: user,
            });
        }
        let mut row_items = Vec::with_capacity(header.len() - 1);
        for field in record.iter().skip(1) {
            let id = parse_id(field, path, record_no, "item id")?;
            if !items.contains_key(&id) {
                return Err(DatasetError::UnknownItem {
                    record: record_no,
                    id,
                });
            }
            if row_items.contains(&id) {
                return Err(DatasetError::RepeatedItem {
                    record: record_no,
                    id,
                });
            }
            row_items.push(id);
        }
        pages.push(PageRow {
            user,
            items: row_items,
        });
    }
    Ok(Dataset {
        user_width,
        item_width,
        users,
        items,
        pages,
    })
}

impl Dataset {
    /// Materialize every page row against a grid, in file order.
    pub fn assemble_pages(&self, grid: Grid) -> Result<Vec<PageInstance>, DatasetError> {
        self.pages
            .iter()
            .map(|row| {
                let user = self.users[&row.user].clone();
                let items: Vec<Vec<f64>> = row
                    .items
                    .iter()
                    .map(|id| self.items[id].clone())
                    .collect();
                Ok(PageInstance::new(user, items, grid)?)
            })
            .collect()
    }
}

/// Index partition from a seeded shuffle: 70% train, 15% validation, and
/// the remainder test.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(count: usize, seed: u64) -> Split {
    let mut order: Vec<usize> = (0..count).collect();
    SeededRng::derive(seed, "split", &[]).shuffle(&mut order);
    let train_end = count * 70 / 100;
    let validation_end = train_end + count * 15 / 100;
    let test = order.split_off(validation_end);
    let validation = order.split_off(train_end);
    Split {
        train: order,
        validation,
        test,
    }
}
