//! On-disk dataset layout.
//!
//! ```text
//! DIR/volumes/<id>.f32    little-endian f32 voxels, C order
//! DIR/volumes/<id>.json   {"id", "shape", "dtype": "f32le", "masked"}
//! DIR/ehr.csv             id,<feature names...>   (empty cell = missing)
//! DIR/labels.csv          id,label
//! DIR/split.json          CohortSplit
//! DIR/concepts.tsv        id  category  feature  description
//! DIR/dataset.json        generation parameters
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{
    feature_names, generate_concept_catalog, make_cohort, CohortParams, CohortSplit, Concept, ConceptCategory, PatientRecord, Split, Volume,
};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub prevalence: f64,
    pub ratio: f64,
    pub seed: u64,
    pub concepts: usize,
    pub params: CohortParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub records: Vec<PatientRecord>,
    pub split: CohortSplit,
    pub catalog: Vec<Concept>,
    pub feature_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VolumeSidecar {
    id: String,
    shape: Vec<usize>,
    dtype: String,
    masked: bool,
}

impl Dataset {
    /// Generate a cohort and catalog in memory.
    pub fn generate(meta: DatasetMeta) -> Result<Self> {
        let (records, split) = make_cohort(meta.n, meta.prevalence, meta.ratio, meta.seed, &meta.params)?;
        let catalog = generate_concept_catalog(meta.concepts, meta.seed, &meta.params.ehr)?;
        let feature_names = feature_names(&meta.params.ehr);
        Ok(Dataset { meta, records, split, catalog, feature_names })
    }

    pub fn record(&self, id: &str) -> Result<&PatientRecord> {
        self.records.iter().find(|r| r.id == id).ok_or_else(|| Error::NotFound(format!("patient {id}")))
    }

    pub fn train(&self) -> impl Iterator<Item = &PatientRecord> {
        self.records.iter().filter(|r| r.split == Split::Train)
    }

    pub fn test(&self) -> impl Iterator<Item = &PatientRecord> {
        self.records.iter().filter(|r| r.split == Split::Test)
    }

    /// The volume of an unmasked patient; asking for a masked one is an error.
    pub fn train_volume(&self, id: &str) -> Result<&Volume> {
        let r = self.record(id)?;
        if r.masked {
            return Err(Error::InvalidParam(format!("volume of {id} is masked")));
        }
        r.volume.as_ref().ok_or_else(|| Error::NotFound(format!("volume of {id}")))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let vdir = dir.join("volumes");
        fs::create_dir_all(&vdir)?;
        for r in &self.records {
            if let Some(v) = &r.volume {
                write_volume(&vdir, &r.id, v, r.masked)?;
            }
        }
        let mut ehr = String::from("id");
        for n in &self.feature_names {
            ehr.push(',');
            ehr.push_str(n);
        }
        ehr.push('\n');
        let mut labels = String::from("id,label\n");
        for r in &self.records {
            ehr.push_str(&r.id);
            for v in &r.ehr {
                ehr.push(',');
                if !v.is_nan() {
                    ehr.push_str(&v.to_string());
                }
            }
            ehr.push('\n');
            labels.push_str(&format!("{},{}\n", r.id, r.label));
        }
        fs::write(dir.join("ehr.csv"), ehr)?;
        fs::write(dir.join("labels.csv"), labels)?;
        fs::write(dir.join("split.json"), serde_json::to_string_pretty(&self.split)?)?;
        fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&self.meta)?)?;
        let mut tsv = String::from("id\tcategory\tfeature\tdescription\n");
        for c in &self.catalog {
            let f = c.feature.map(|f| f.to_string()).unwrap_or_default();
            tsv.push_str(&format!("{}\t{}\t{}\t{}\n", c.id, c.category.as_str(), f, c.description));
        }
        fs::write(dir.join("concepts.tsv"), tsv)?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let read = |name: &str| fs::read_to_string(dir.join(name)).map_err(|e| Error::NotFound(format!("{}: {e}", dir.join(name).display())));
        let meta: DatasetMeta = serde_json::from_str(&read("dataset.json")?)?;
        let split: CohortSplit = serde_json::from_str(&read("split.json")?)?;
        let ehr_text = read("ehr.csv")?;
        let mut lines = ehr_text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty ehr.csv".into()))?;
        let feature_names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut rows = Vec::new();
        for line in lines {
            let mut cells = line.split(',');
            let id = cells.next().unwrap_or_default().to_string();
            let vals = cells
                .map(|c| if c.is_empty() { Ok(f64::NAN) } else { c.parse::<f64>().map_err(|_| Error::Format(format!("bad EHR value {c:?} for {id}"))) })
                .collect::<Result<Vec<f64>>>()?;
            if vals.len() != feature_names.len() {
                return Err(Error::Format(format!("row {id} has {} values for {} features", vals.len(), feature_names.len())));
            }
            rows.push((id, vals));
        }
        let label_text = read("labels.csv")?;
        let mut labels = std::collections::BTreeMap::new();
        for line in label_text.lines().skip(1) {
            let (id, y) = line.split_once(',').ok_or_else(|| Error::Format(format!("bad label line {line:?}")))?;
            let y: u8 = y.parse().map_err(|_| Error::Format(format!("bad label {y:?}")))?;
            labels.insert(id.to_string(), y);
        }
        let vdir = dir.join("volumes");
        let mut records = Vec::with_capacity(rows.len());
        for (id, ehr) in rows {
            let label = *labels.get(&id).ok_or_else(|| Error::Format(format!("no label for {id}")))?;
            let split_tag = if split.test_ids.contains(&id) { Split::Test } else { Split::Train };
            let (volume, masked) = match read_volume(&vdir, &id) {
                Ok((v, m)) => (Some(v), m),
                Err(Error::NotFound(_)) => (None, split_tag == Split::Test),
                Err(e) => return Err(e),
            };
            records.push(PatientRecord { id, ehr, label, volume, split: split_tag, masked });
        }
        let tsv = read("concepts.tsv")?;
        let mut catalog = Vec::new();
        for line in tsv.lines().skip(1) {
            let cols: Vec<&str> = line.splitn(4, '\t').collect();
            if cols.len() != 4 {
                return Err(Error::Format(format!("bad concept line {line:?}")));
            }
            let category = ConceptCategory::parse(cols[1]).ok_or_else(|| Error::Format(format!("unknown category {}", cols[1])))?;
            let feature = if cols[2].is_empty() { None } else { Some(cols[2].parse().map_err(|_| Error::Format(format!("bad feature {}", cols[2])))?) };
            catalog.push(Concept { id: cols[0].to_string(), category, feature, description: cols[3].to_string() });
        }
        Ok(Dataset { meta, records, split, catalog, feature_names })
    }
}

fn volume_paths(dir: &Path, id: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{id}.f32")), dir.join(format!("{id}.json")))
}

pub fn write_volume(dir: &Path, id: &str, v: &Volume, masked: bool) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (raw, side) = volume_paths(dir, id);
    let bytes: Vec<u8> = v.data().iter().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    fs::write(raw, bytes)?;
    let meta = VolumeSidecar { id: id.to_string(), shape: v.shape().to_vec(), dtype: "f32le".into(), masked };
    fs::write(side, serde_json::to_string(&meta)?)?;
    Ok(())
}

/// Ids of all volumes in `dir`, sorted.
pub fn list_volumes(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir)? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "json") {
            if let Some(stem) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

/// Returns the volume and its masked flag.
pub fn read_volume(dir: &Path, id: &str) -> Result<(Volume, bool)> {
    let (raw, side) = volume_paths(dir, id);
    if !side.exists() {
        return Err(Error::NotFound(format!("volume {id} in {}", dir.display())));
    }
    let meta: VolumeSidecar = serde_json::from_str(&fs::read_to_string(side)?)?;
    if meta.dtype != "f32le" {
        return Err(Error::Format(format!("volume {id}: unsupported dtype {}", meta.dtype)));
    }
    let bytes = fs::read(raw)?;
    let data: Vec<f64> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok((Tensor::from_vec(&meta.shape, data)?, meta.masked))
}
