//! Profiled model table.
//!
//! Each row gives the GPU memory a model occupies while serving at batch size
//! 32, the time to upload it, and the time for one inference. The scheduler
//! and the execution model read timings from here and nowhere else.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::time::Micros;

const HEADER: [&str; 4] = ["model_id", "occupation_mb", "load_time_s", "infer_time_s"];

const BUILTIN_CSV: &str = include_str!("../data/models.csv");

/// Dense index of a model within one [`Catalog`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct ModelId(pub u32);

impl ModelId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelProfile {
    pub model_id: String,
    pub occupation_mb: u64,
    pub load_time: Micros,
    pub infer_time: Micros,
}

impl ModelProfile {
    pub fn new(model_id: impl Into<String>, occupation_mb: u64, load_s: f64, infer_s: f64) -> Self {
        ModelProfile {
            model_id: model_id.into(),
            occupation_mb,
            load_time: Micros::from_secs_f64(load_s),
            infer_time: Micros::from_secs_f64(infer_s),
        }
    }
}

/// Immutable, ordered set of model profiles with lookup by name.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Catalog {
    profiles: Vec<ModelProfile>,
    by_name: HashMap<String, ModelId>,
}

impl Catalog {
    pub fn from_profiles(profiles: Vec<ModelProfile>) -> Result<Self> {
        if profiles.is_empty() {
            return Err(Error::EmptyCatalog);
        }
        let mut by_name = HashMap::with_capacity(profiles.len());
        for (i, p) in profiles.iter().enumerate() {
            // data rows start on line 2
            let line = i as u64 + 2;
            if p.occupation_mb == 0 {
                return Err(non_positive(line, "occupation_mb", "0"));
            }
            if p.load_time == Micros::ZERO {
                return Err(non_positive(line, "load_time_s", "0"));
            }
            if p.infer_time == Micros::ZERO {
                return Err(non_positive(line, "infer_time_s", "0"));
            }
            if by_name
                .insert(p.model_id.clone(), ModelId(i as u32))
                .is_some()
            {
                return Err(Error::DuplicateModel {
                    line,
                    model_id: p.model_id.clone(),
                });
            }
        }
        Ok(Catalog { profiles, by_name })
    }

    /// The 22 profiled CNN models shipped with the crate.
    pub fn builtin() -> Self {
        Self::from_csv_reader(BUILTIN_CSV.as_bytes()).expect("bundled catalog is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let mut records = rdr.records();

        let header = match records.next() {
            None => return Err(Error::EmptyCatalog),
            Some(r) => r.map_err(csv_error)?,
        };
        if header.iter().ne(HEADER.iter().copied()) {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{}`", HEADER.join(",")),
            });
        }

        let mut profiles = Vec::new();
        let mut seen = HashMap::new();
        for record in records {
            let record = record.map_err(csv_error)?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != HEADER.len() {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {} fields, got {}", HEADER.len(), record.len()),
                });
            }
            let model_id = record[0].to_string();
            if model_id.is_empty() {
                return Err(Error::Parse {
                    line,
                    message: "empty model_id".into(),
                });
            }
            let occupation_mb: u64 = record[1].parse().map_err(|_| Error::Parse {
                line,
                message: format!("occupation_mb `{}` is not a whole number of MB", &record[1]),
            })?;
            if occupation_mb == 0 {
                return Err(non_positive(line, "occupation_mb", &record[1]));
            }
            let load_time = parse_seconds(&record[2], line, "load_time_s")?;
            let infer_time = parse_seconds(&record[3], line, "infer_time_s")?;
            if seen.insert(model_id.clone(), line).is_some() {
                return Err(Error::DuplicateModel { line, model_id });
            }
            profiles.push(ModelProfile {
                model_id,
                occupation_mb,
                load_time,
                infer_time,
            });
        }
        Self::from_profiles(profiles)
    }

    pub fn to_csv(&self) -> String {
        let mut out = HEADER.join(",");
        out.push('\n');
        for p in &self.profiles {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                p.model_id,
                p.occupation_mb,
                p.load_time.as_secs_f64(),
                p.infer_time.as_secs_f64()
            );
        }
        out
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn profiles(&self) -> &[ModelProfile] {
        &self.profiles
    }

    pub fn ids(&self) -> impl Iterator<Item = ModelId> {
        (0..self.profiles.len() as u32).map(ModelId)
    }

    pub fn id_of(&self, model_id: &str) -> Result<ModelId> {
        self.by_name
            .get(model_id)
            .copied()
            .ok_or_else(|| Error::UnknownModel(model_id.to_string()))
    }

    pub fn lookup(&self, model_id: &str) -> Result<&ModelProfile> {
        self.id_of(model_id).map(|id| &self.profiles[id.index()])
    }

    /// Profile by dense id. Panics if the id came from another catalog.
    pub fn get(&self, id: ModelId) -> &ModelProfile {
        &self.profiles[id.index()]
    }

    pub fn name(&self, id: ModelId) -> &str {
        &self.profiles[id.index()].model_id
    }
}

fn parse_seconds(field: &str, line: u64, name: &'static str) -> Result<Micros> {
    let secs: f64 = field.parse().map_err(|_| Error::Parse {
        line,
        message: format!("{name} `{field}` is not a decimal number"),
    })?;
    if !secs.is_finite() || secs <= 0.0 {
        return Err(non_positive(line, name, field));
    }
    let t = Micros::from_secs_f64(secs);
    if t == Micros::ZERO {
        return Err(non_positive(line, name, field));
    }
    Ok(t)
}

fn non_positive(line: u64, field: &'static str, value: &str) -> Error {
    Error::NonPositive {
        line,
        field,
        value: value.to_string(),
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse {
        line,
        message: e.to_string(),
    }
}
