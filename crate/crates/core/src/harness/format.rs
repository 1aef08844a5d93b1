//! On-disk formats.
//!
//! Datasets are newline-delimited JSON: a header
//! `{"schema":1,"dim":d,"classes":[..],"domains":[..]}` followed by one
//! `{"domain":name|null,"class":name,"vec":[..]}` record per sample. Text
//! banks use the same shape with `"template"` in place of `"domain"` and a
//! header that also names the template roles. The binary dataset variant keeps
//! the JSON header (extended with per-row labels) on the first line and then
//! stores the vectors as little-endian f32, row-major.
//!
//! Every file is written to a temporary sibling and renamed into place.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::dataset::{EmbeddingDataset, LabeledEmbedding};
use crate::error::{Result, ShedError};
use crate::homogenize::{CentroidBank, TextEmbeddings};
use crate::inference::PredictionRecord;
use crate::trainer::{AdapterParams, TraceEntry, TrainConfig};
use crate::vector::{l2_normalize, Vector, DEFAULT_EPS};

pub const SCHEMA_VERSION: u32 = 1;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, write: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| ShedError::InvalidConfig(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut out = BufWriter::new(File::create(&tmp)?);
        write(&mut out)?;
        out.flush()?;
        out.get_ref().sync_all()?;
        Ok(())
    })();
    match result {
        Ok(()) => {
            fs::rename(&tmp, path)?;
            Ok(())
        }
        Err(e) => {
            let _ = fs::remove_file(&tmp);
            Err(e)
        }
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = BufReader::new(File::open(path)?);
    Ok(serde_json::from_reader(file)?)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| Ok(w.write_all(text.as_bytes())?))
}

fn parse_err(line: usize, message: impl Into<String>) -> ShedError {
    ShedError::Parse {
        line,
        message: message.into(),
    }
}

fn check_schema(schema: u32) -> Result<()> {
    if schema != SCHEMA_VERSION {
        return Err(ShedError::SchemaVersionMismatch {
            expected: SCHEMA_VERSION,
            found: schema,
        });
    }
    Ok(())
}

fn index_of(names: &[String]) -> HashMap<&str, usize> {
    names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect()
}

/// Reads lines lazily, numbering them from 1.
fn lines(path: &Path) -> Result<impl Iterator<Item = (usize, std::io::Result<String>)>> {
    let reader = BufReader::new(File::open(path)?);
    Ok(reader.lines().enumerate().map(|(i, l)| (i + 1, l)))
}

fn parse_line<T: DeserializeOwned>(line: usize, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_err(line, e.to_string()))
}

// ---- datasets ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetHeader {
    schema: u32,
    dim: usize,
    classes: Vec<String>,
    domains: Vec<String>,
}

#[derive(Serialize)]
struct DatasetRecord<'a> {
    domain: Option<&'a str>,
    class: &'a str,
    vec: &'a [f64],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OwnedDatasetRecord {
    domain: Option<String>,
    class: String,
    vec: Vec<f64>,
}

pub fn save_dataset(path: &Path, data: &EmbeddingDataset) -> Result<()> {
    write_atomic(path, |w| {
        let header = DatasetHeader {
            schema: SCHEMA_VERSION,
            dim: data.dim(),
            classes: data.class_names().to_vec(),
            domains: data.domain_names().to_vec(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for s in data.samples() {
            let record = DatasetRecord {
                domain: s.domain_id.map(|d| data.domain_names()[d].as_str()),
                class: &data.class_names()[s.class_id],
                vec: &s.vec,
            };
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn load_dataset(path: &Path) -> Result<EmbeddingDataset> {
    let mut it = lines(path)?.filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let (line, header) = it.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let header: DatasetHeader = parse_line(line, &header?)?;
    check_schema(header.schema)?;
    let classes = index_of(&header.classes);
    let domains = index_of(&header.domains);
    let mut samples = Vec::new();
    for (line, text) in it {
        let r: OwnedDatasetRecord = parse_line(line, &text?)?;
        if r.vec.len() != header.dim {
            return Err(parse_err(
                line,
                format!("record has dimension {}, header declares {}", r.vec.len(), header.dim),
            ));
        }
        let class_id = *classes
            .get(r.class.as_str())
            .ok_or_else(|| parse_err(line, format!("undeclared class {:?}", r.class)))?;
        let domain_id = match &r.domain {
            Some(d) => Some(
                *domains
                    .get(d.as_str())
                    .ok_or_else(|| parse_err(line, format!("undeclared domain {d:?}")))?,
            ),
            None => None,
        };
        let sample = LabeledEmbedding::ingest(r.vec, class_id, domain_id)
            .map_err(|e| parse_err(line, e.to_string()))?;
        samples.push(sample);
    }
    EmbeddingDataset::new(header.dim, header.classes, header.domains, samples)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BinaryHeader {
    schema: u32,
    format: String,
    dim: usize,
    classes: Vec<String>,
    domains: Vec<String>,
    count: usize,
    class_ids: Vec<usize>,
    domain_ids: Vec<Option<usize>>,
}

const BINARY_FORMAT: &str = "f32le";

/// Compact variant: JSON header line, then `count * dim` little-endian f32.
/// Vectors lose precision to f32 and are renormalized on load.
pub fn save_dataset_binary(path: &Path, data: &EmbeddingDataset) -> Result<()> {
    write_atomic(path, |w| {
        let header = BinaryHeader {
            schema: SCHEMA_VERSION,
            format: BINARY_FORMAT.into(),
            dim: data.dim(),
            classes: data.class_names().to_vec(),
            domains: data.domain_names().to_vec(),
            count: data.len(),
            class_ids: data.samples().iter().map(|s| s.class_id).collect(),
            domain_ids: data.samples().iter().map(|s| s.domain_id).collect(),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for s in data.samples() {
            for x in s.vec.iter() {
                w.write_all(&(*x as f32).to_le_bytes())?;
            }
        }
        Ok(())
    })
}

pub fn load_dataset_binary(path: &Path) -> Result<EmbeddingDataset> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let header: BinaryHeader = parse_line(1, &header)?;
    check_schema(header.schema)?;
    if header.format != BINARY_FORMAT {
        return Err(parse_err(1, format!("unsupported format {:?}", header.format)));
    }
    if header.class_ids.len() != header.count || header.domain_ids.len() != header.count {
        return Err(parse_err(1, "label arrays do not match count"));
    }
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let expected = header.count * header.dim * 4;
    if bytes.len() != expected {
        return Err(parse_err(2, format!("payload has {} bytes, expected {expected}", bytes.len())));
    }
    let mut samples = Vec::with_capacity(header.count);
    for (i, row) in bytes.chunks_exact(header.dim * 4).enumerate() {
        let raw: Vec<f64> = row
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        samples.push(
            LabeledEmbedding::ingest(raw, header.class_ids[i], header.domain_ids[i])
                .map_err(|e| e.at_sample(i))?,
        );
    }
    EmbeddingDataset::new(header.dim, header.classes, header.domains, samples)
}

/// Picks the reader from the file's first byte after the header line.
pub fn load_dataset_any(path: &Path) -> Result<EmbeddingDataset> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let is_binary = serde_json::from_str::<serde_json::Value>(&header)
        .ok()
        .and_then(|v| v.get("format").cloned())
        .is_some();
    if is_binary {
        load_dataset_binary(path)
    } else {
        load_dataset(path)
    }
}

// ---- text banks ----

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TextHeader {
    schema: u32,
    dim: usize,
    classes: Vec<String>,
    templates: Vec<String>,
    source_templates: Vec<String>,
    additional_templates: Vec<String>,
    generic_template: Option<String>,
}

#[derive(Serialize)]
struct TextRecord<'a> {
    template: &'a str,
    class: &'a str,
    vec: &'a [f64],
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OwnedTextRecord {
    template: String,
    class: String,
    vec: Vec<f64>,
}

pub fn save_text_bank(path: &Path, text: &TextEmbeddings) -> Result<()> {
    let names = |ids: &[usize]| ids.iter().map(|&t| text.template_names[t].clone()).collect();
    write_atomic(path, |w| {
        let header = TextHeader {
            schema: SCHEMA_VERSION,
            dim: text.dim,
            classes: text.class_names.clone(),
            templates: text.template_names.clone(),
            source_templates: names(&text.source_templates),
            additional_templates: names(&text.additional_templates),
            generic_template: text.generic_template.map(|t| text.template_names[t].clone()),
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for (&(t, c), v) in &text.vectors {
            let record = TextRecord {
                template: &text.template_names[t],
                class: &text.class_names[c],
                vec: v,
            };
            serde_json::to_writer(&mut *w, &record)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn load_text_bank(path: &Path) -> Result<TextEmbeddings> {
    let mut it = lines(path)?.filter(|(_, l)| !matches!(l, Ok(s) if s.trim().is_empty()));
    let (line, header) = it.next().ok_or_else(|| parse_err(1, "missing header"))?;
    let header: TextHeader = parse_line(line, &header?)?;
    check_schema(header.schema)?;
    let classes = index_of(&header.classes);
    let templates = index_of(&header.templates);
    let resolve = |names: &[String]| -> Result<Vec<usize>> {
        names
            .iter()
            .map(|n| templates.get(n.as_str()).copied().ok_or_else(|| ShedError::UnknownTemplate(n.clone())))
            .collect()
    };
    let source_templates = resolve(&header.source_templates)?;
    let additional_templates = resolve(&header.additional_templates)?;
    let generic_template = match &header.generic_template {
        Some(n) => Some(resolve(std::slice::from_ref(n))?[0]),
        None => None,
    };
    let mut vectors = BTreeMap::new();
    for (line, text) in it {
        let r: OwnedTextRecord = parse_line(line, &text?)?;
        if r.vec.len() != header.dim {
            return Err(parse_err(
                line,
                format!("record has dimension {}, header declares {}", r.vec.len(), header.dim),
            ));
        }
        let t = *templates
            .get(r.template.as_str())
            .ok_or_else(|| parse_err(line, format!("undeclared template {:?}", r.template)))?;
        let c = *classes
            .get(r.class.as_str())
            .ok_or_else(|| parse_err(line, format!("undeclared class {:?}", r.class)))?;
        let raw = Vector::new(r.vec).map_err(|e| parse_err(line, e.to_string()))?;
        let v = if (raw.norm() - 1.0).abs() <= 1e-12 {
            raw
        } else {
            l2_normalize(&raw, DEFAULT_EPS).map_err(|e| parse_err(line, e.to_string()))?
        };
        if vectors.insert((t, c), v).is_some() {
            return Err(parse_err(line, format!("duplicate pair ({}, {})", r.template, r.class)));
        }
    }
    Ok(TextEmbeddings {
        dim: header.dim,
        class_names: header.classes,
        template_names: header.templates,
        vectors,
        source_templates,
        additional_templates,
        generic_template,
    })
}

// ---- model artifacts ----

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema: u32,
    pub config_hash: String,
    pub train_config: TrainConfig,
    pub adapter: AdapterParams,
    /// Source centroids the adapter was trained against.
    pub source_centroids: Vec<Vector>,
}

#[derive(Serialize, Deserialize)]
struct BankFile {
    schema: u32,
    bank: CentroidBank,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_json(path, ckpt)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ckpt: Checkpoint = read_json(path)?;
    check_schema(ckpt.schema)?;
    // re-validate shapes
    AdapterParams::from_parts(ckpt.adapter.dim, ckpt.adapter.weight.clone(), ckpt.adapter.bias.clone())?;
    Ok(ckpt)
}

pub fn save_centroid_bank(path: &Path, bank: &CentroidBank) -> Result<()> {
    write_json(
        path,
        &BankFile {
            schema: SCHEMA_VERSION,
            bank: bank.clone(),
        },
    )
}

pub fn load_centroid_bank(path: &Path) -> Result<CentroidBank> {
    let file: BankFile = read_json(path)?;
    check_schema(file.schema)?;
    Ok(file.bank)
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    index: usize,
    lambda: f64,
    argmax: usize,
    p_final: &'a [f64],
}

pub fn save_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    write_atomic(path, |w| {
        for (index, r) in records.iter().enumerate() {
            let line = PredictionLine {
                index,
                lambda: r.lambda,
                argmax: r.predicted_class(),
                p_final: &r.p_final,
            };
            serde_json::to_writer(&mut *w, &line)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn save_trace_csv(path: &Path, trace: &[TraceEntry]) -> Result<()> {
    let mut out = String::from("epoch,iteration,loss_align,loss_reg,learning_rate\n");
    for e in trace {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            e.epoch, e.iteration, e.loss_align, e.loss_reg, e.learning_rate
        ));
    }
    write_text(path, &out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_benchmark, GenConfig};

    fn small() -> GenConfig {
        GenConfig {
            dim: 8,
            num_classes: 3,
            num_source_domains: 2,
            samples_per_domain_class: 3,
            num_source_templates: 2,
            num_additional_templates: 3,
            ..Default::default()
        }
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_benchmark(&small()).unwrap();
        let path = dir.path().join("train.ndjson");
        save_dataset(&path, &b.train).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), b.train);
        assert_eq!(load_dataset_any(&path).unwrap(), b.train);
    }

    #[test]
    fn binary_round_trip_to_f32() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_benchmark(&small()).unwrap();
        let path = dir.path().join("train.bin");
        save_dataset_binary(&path, &b.train).unwrap();
        let back = load_dataset_any(&path).unwrap();
        assert_eq!(back.class_names(), b.train.class_names());
        for (a, s) in back.samples().iter().zip(b.train.samples()) {
            assert_eq!((a.class_id, a.domain_id), (s.class_id, s.domain_id));
            for (x, y) in a.vec.iter().zip(s.vec.iter()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn text_bank_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = generate_benchmark(&small()).unwrap();
        let path = dir.path().join("text.ndjson");
        save_text_bank(&path, &b.text).unwrap();
        assert_eq!(load_text_bank(&path).unwrap(), b.text);
    }

    fn write_lines(path: &Path, lines: &[&str]) {
        fs::write(path, lines.join("\n")).unwrap();
    }

    #[test]
    fn rejects_nan_mixed_dims_and_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ndjson");
        let header = r#"{"schema":1,"dim":2,"classes":["a"],"domains":[]}"#;

        write_lines(&path, &[header, r#"{"domain":null,"class":"a","vec":[NaN, 1.0]}"#]);
        assert!(matches!(load_dataset(&path), Err(ShedError::Parse { line: 2, .. })));

        write_lines(
            &path,
            &[
                header,
                r#"{"domain":null,"class":"a","vec":[0.0, 1.0]}"#,
                r#"{"domain":null,"class":"a","vec":[0.0, 1.0, 0.0]}"#,
            ],
        );
        match load_dataset(&path) {
            Err(ShedError::Parse { line, message }) => {
                assert_eq!(line, 3);
                assert!(message.contains("dimension 3"));
            }
            other => panic!("{other:?}"),
        }

        write_lines(&path, &[r#"{"schema":2,"dim":2,"classes":["a"],"domains":[]}"#]);
        assert!(matches!(
            load_dataset(&path),
            Err(ShedError::SchemaVersionMismatch { expected: 1, found: 2 })
        ));
    }

    #[test]
    fn ingest_normalizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.ndjson");
        write_lines(
            &path,
            &[
                r#"{"schema":1,"dim":2,"classes":["a"],"domains":[]}"#,
                r#"{"domain":null,"class":"a","vec":[3.0, 4.0]}"#,
            ],
        );
        let d = load_dataset(&path).unwrap();
        assert_eq!(d.samples()[0].vec.as_slice(), &[0.6, 0.8]);
    }

    #[test]
    fn atomic_write_leaves_no_temp_on_failure() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.json");
        let err = write_atomic(&path, |_| Err(ShedError::EmptyInput));
        assert!(err.is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    mod props {
        use super::*;
        use crate::dataset::LabeledEmbedding;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn ndjson_round_trip_is_lossless(
                rows in prop::collection::vec((prop::collection::vec(-10.0f64..10.0, 5), 0usize..3), 5..20),
            ) {
                prop_assume!(rows.iter().all(|(v, _)| v.iter().any(|x| x.abs() > 1e-3)));
                // every declared domain needs two samples; every third is unlabeled
                let samples: Vec<LabeledEmbedding> = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (v, c))| {
                        let d = if i % 3 == 2 { None } else { Some(i % 2) };
                        LabeledEmbedding::ingest(v, c, d).unwrap()
                    })
                    .collect();
                let data = EmbeddingDataset::new(
                    5,
                    vec!["a".into(), "b".into(), "c".into()],
                    vec!["x".into(), "y".into()],
                    samples,
                )
                .unwrap();
                let dir = tempfile::tempdir().unwrap();
                let path = dir.path().join("d.ndjson");
                save_dataset(&path, &data).unwrap();
                prop_assert_eq!(load_dataset(&path).unwrap(), data);
            }
        }
    }
}
