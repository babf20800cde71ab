//! On-disk formats.
//!
//! Text outputs start with a `# config-fingerprint: <hex>` line; readers skip
//! `#` lines. Binary artifacts written by commands start with an 8-byte magic,
//! a `u32` format version and a length-prefixed fingerprint. All integers and
//! floats are little-endian.
//!
//! | artifact        | layout after the artifact header                                  |
//! |-----------------|-------------------------------------------------------------------|
//! | embeddings      | `u64 count, u64 dim, f32[count*dim]` (no artifact header)          |
//! | cluster model   | `u64 k, u64 dim, u64 count, f64[k*dim], u32[count]`                |
//! | named tensors   | `u64 n`, then per tensor `u32 len, name, u32 rank, u64[rank], f64[]` |

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use dataselect_core::clustering::ClusterModel;
use dataselect_core::corpus::{CandidateInstance, EmbeddingCorpus, InstanceId, Token};
use dataselect_core::curvature::KroneckerFactor;
use dataselect_core::influence::{InfluenceRow, InfluenceTable, ScoreMethod};
use dataselect_core::linalg::Mat;
use dataselect_core::model::{ModelConfig, ParamSet, TapKind};
use dataselect_core::oracle::MethodCorrelation;
use serde::Serialize;

use crate::config::EmbeddingFormat;
use crate::error::{CliError, CliResult};

pub const CLUSTER_MAGIC: &[u8; 8] = b"DSCLUSTR";
pub const TENSOR_MAGIC: &[u8; 8] = b"DSTENSOR";
pub const FORMAT_VERSION: u32 = 1;
pub const FINGERPRINT_PREFIX: &str = "# config-fingerprint: ";

pub fn read_bytes(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(path, e))
}

pub fn read_text(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(path, e))
}

/// 17 significant digits, enough to round-trip any `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Little-endian cursor over a byte buffer that reports truncation.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], path: &'a Path) -> Self {
        Self { bytes, pos: 0, path }
    }

    fn take(&mut self, n: usize, what: &str) -> CliResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::data(
                self.path,
                format!("truncated while reading {what} at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> CliResult<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| CliError::data(self.path, format!("{what} too large")))
    }

    fn f64s(&mut self, n: usize, what: &str) -> CliResult<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| CliError::data(self.path, "size overflow"))?, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn finish(&self) -> CliResult<()> {
        if self.pos != self.bytes.len() {
            return Err(CliError::data(
                self.path,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }

    fn artifact_header(&mut self, magic: &[u8; 8]) -> CliResult<String> {
        if self.take(8, "magic")? != magic {
            return Err(CliError::data(self.path, "wrong file type (bad magic)"));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(CliError::data(
                self.path,
                format!("format version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let n = self.u32("fingerprint length")? as usize;
        String::from_utf8(self.take(n, "fingerprint")?.to_vec())
            .map_err(|_| CliError::data(self.path, "fingerprint is not UTF-8"))
    }
}

fn push_header(out: &mut Vec<u8>, magic: &[u8; 8], fingerprint: &str) {
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(fingerprint.len() as u32).to_le_bytes());
    out.extend_from_slice(fingerprint.as_bytes());
}

// ---------------------------------------------------------------- embeddings

pub fn decode_embeddings_binary(bytes: &[u8], path: &Path) -> CliResult<EmbeddingCorpus> {
    let mut r = Reader::new(bytes, path);
    let count = r.usize("count")?;
    let dim = r.usize("dim")?;
    let n = count
        .checked_mul(dim)
        .ok_or_else(|| CliError::data(path, "count*dim overflows"))?;
    let payload = r.take(
        n.checked_mul(4).ok_or_else(|| CliError::data(path, "size overflow"))?,
        "payload",
    )?;
    r.finish()?;
    let vectors: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    EmbeddingCorpus::from_rows(dim, vectors).map_err(|e| CliError::data(path, e.to_string()))
}

pub fn encode_embeddings_binary(corpus: &EmbeddingCorpus) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + corpus.vectors().len() * 4);
    out.extend_from_slice(&(corpus.count() as u64).to_le_bytes());
    out.extend_from_slice(&(corpus.dim() as u64).to_le_bytes());
    for &v in corpus.vectors() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// One row per instance; an optional non-numeric first row is a header.
pub fn decode_embeddings_csv(text: &str, path: &Path) -> CliResult<EmbeddingCorpus> {
    let mut dim = None;
    let mut vectors = Vec::new();
    let mut first = true;
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parsed: Result<Vec<f64>, _> = line.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(r) => r,
            Err(_) if first => {
                first = false;
                continue;
            }
            Err(_) => return Err(CliError::data(path, format!("line {}: not numeric", n + 1))),
        };
        first = false;
        match dim {
            None => dim = Some(row.len()),
            Some(d) if d != row.len() => {
                return Err(CliError::data(
                    path,
                    format!("line {}: {} columns, expected {d}", n + 1, row.len()),
                ))
            }
            _ => {}
        }
        vectors.extend(row);
    }
    let dim = dim.ok_or_else(|| CliError::data(path, "no embedding rows"))?;
    EmbeddingCorpus::from_rows(dim, vectors).map_err(|e| CliError::data(path, e.to_string()))
}

pub fn encode_embeddings_csv(corpus: &EmbeddingCorpus) -> String {
    let mut s = (0..corpus.dim()).map(|j| format!("e{j}")).collect::<Vec<_>>().join(",");
    s.push('\n');
    for i in 0..corpus.count() {
        let row: Vec<String> = corpus.row(i).iter().map(|&v| fmt_f64(v)).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

pub fn read_embeddings(path: &Path, format: EmbeddingFormat) -> CliResult<EmbeddingCorpus> {
    let csv = match format {
        EmbeddingFormat::Csv => true,
        EmbeddingFormat::Binary => false,
        EmbeddingFormat::Auto => path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")),
    };
    if csv {
        decode_embeddings_csv(&read_text(path)?, path)
    } else {
        decode_embeddings_binary(&read_bytes(path)?, path)
    }
}

// -------------------------------------------------------------------- tokens

pub fn decode_tokens(text: &str, path: &Path) -> CliResult<Vec<CandidateInstance>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, toks) = line
            .split_once('\t')
            .ok_or_else(|| CliError::data(path, format!("line {}: expected id<TAB>tokens", n + 1)))?;
        let id: InstanceId = id
            .trim()
            .parse()
            .map_err(|_| CliError::data(path, format!("line {}: bad id `{id}`", n + 1)))?;
        let tokens: Vec<Token> = toks
            .split_whitespace()
            .map(|t| t.parse())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::data(path, format!("line {}: bad token", n + 1)))?;
        out.push(CandidateInstance {
            id,
            tokens,
            embedding_row: id as usize,
        });
    }
    dataselect_core::corpus::validate_instances(&out).map_err(|e| CliError::data(path, e.to_string()))?;
    Ok(out)
}

pub fn encode_tokens(instances: &[CandidateInstance]) -> String {
    let mut s = String::new();
    for i in instances {
        let toks: Vec<String> = i.tokens.iter().map(u32::to_string).collect();
        let _ = writeln!(s, "{}\t{}", i.id, toks.join(" "));
    }
    s
}

pub fn read_tokens(path: &Path) -> CliResult<Vec<CandidateInstance>> {
    decode_tokens(&read_text(path)?, path)
}

// ---------------------------------------------------------------- text files

/// Fingerprint line followed by `body`.
pub fn with_fingerprint(fingerprint: &str, body: &str) -> String {
    format!("{FINGERPRINT_PREFIX}{fingerprint}\n{body}")
}

pub fn fingerprint_of_text(text: &str) -> Option<&str> {
    text.lines().next()?.strip_prefix(FINGERPRINT_PREFIX)
}

pub fn write_csv<I>(path: &Path, fingerprint: &str, header: &str, rows: I) -> CliResult<()>
where
    I: IntoIterator<Item = String>,
{
    let mut body = String::from(header);
    body.push('\n');
    for r in rows {
        body.push_str(&r);
        body.push('\n');
    }
    write_bytes(path, with_fingerprint(fingerprint, &body).as_bytes())
}

pub fn encode_ids(ids: &[InstanceId]) -> String {
    ids.iter().map(|i| format!("{i}\n")).collect()
}

pub fn decode_ids(text: &str, path: &Path) -> CliResult<Vec<InstanceId>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.parse()
                .map_err(|_| CliError::data(path, format!("bad instance id `{l}`")))
        })
        .collect()
}

pub fn influence_rows(table: &InfluenceTable) -> impl Iterator<Item = String> + '_ {
    table
        .rows
        .iter()
        .map(|r| format!("{},{},{}", r.id, fmt_f64(r.score), r.method.name()))
}

pub const INFLUENCE_HEADER: &str = "instance_id,score,method";
pub const COMPARISON_HEADER: &str = "method,pearson,spearman,n";

pub fn decode_influence(text: &str, path: &Path) -> CliResult<InfluenceTable> {
    let mut rows = Vec::new();
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    if lines.next() != Some(INFLUENCE_HEADER) {
        return Err(CliError::data(path, "missing influence header row"));
    }
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let bad = || CliError::data(path, format!("bad influence row `{l}`"));
        if f.len() != 3 {
            return Err(bad());
        }
        rows.push(InfluenceRow {
            id: f[0].parse().map_err(|_| bad())?,
            score: f[1].parse().map_err(|_| bad())?,
            method: ScoreMethod::from_name(f[2]).ok_or_else(bad)?,
        });
    }
    Ok(InfluenceTable { rows })
}

pub fn comparison_rows(rows: &[MethodCorrelation]) -> impl Iterator<Item = String> + '_ {
    rows.iter().map(|r| {
        format!(
            "{},{},{},{}",
            r.method,
            fmt_f64(r.pearson),
            fmt_f64(r.spearman),
            r.n
        )
    })
}

// ------------------------------------------------------------- cluster model

pub fn encode_cluster_model(model: &ClusterModel, fingerprint: &str) -> Vec<u8> {
    let mut out = Vec::new();
    push_header(&mut out, CLUSTER_MAGIC, fingerprint);
    for v in [model.k(), model.dim(), model.count()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for &c in model.centroids() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    for &a in model.assignment() {
        out.extend_from_slice(&a.to_le_bytes());
    }
    out
}

/// Returns the model and the fingerprint it was written with.
pub fn decode_cluster_model(bytes: &[u8], path: &Path) -> CliResult<(ClusterModel, String)> {
    let mut r = Reader::new(bytes, path);
    let fp = r.artifact_header(CLUSTER_MAGIC)?;
    let k = r.usize("k")?;
    let dim = r.usize("dim")?;
    let count = r.usize("count")?;
    let centroids = r.f64s(k * dim, "centroids")?;
    let assignment = r
        .take(count * 4, "assignment")?
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    r.finish()?;
    let model = ClusterModel::new(k, dim, centroids, assignment)
        .map_err(|e| CliError::data(path, e.to_string()))?;
    Ok((model, fp))
}

// ------------------------------------------------------------- named tensors

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedTensor {
    pub fn matrix(name: impl Into<String>, m: &Mat) -> Self {
        Self {
            name: name.into(),
            shape: vec![m.rows(), m.cols()],
            data: m.as_slice().to_vec(),
        }
    }

    pub fn vector(name: impl Into<String>, v: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            shape: vec![v.len()],
            data: v,
        }
    }

    fn to_mat(&self, path: &Path) -> CliResult<Mat> {
        match self.shape[..] {
            [r, c] => Ok(Mat::from_vec(r, c, self.data.clone())),
            _ => Err(CliError::data(path, format!("tensor `{}` is not a matrix", self.name))),
        }
    }
}

pub fn encode_tensors(tensors: &[NamedTensor], fingerprint: &str) -> Vec<u8> {
    let mut out = Vec::new();
    push_header(&mut out, TENSOR_MAGIC, fingerprint);
    out.extend_from_slice(&(tensors.len() as u64).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_tensors(bytes: &[u8], path: &Path) -> CliResult<(Vec<NamedTensor>, String)> {
    let mut r = Reader::new(bytes, path);
    let fp = r.artifact_header(TENSOR_MAGIC)?;
    let n = r.usize("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| CliError::data(path, "tensor name is not UTF-8"))?;
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.usize("dim")).collect::<CliResult<Vec<_>>>()?;
        let size = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| CliError::data(path, "tensor size overflows"))?;
        let data = r.f64s(size, &name)?;
        out.push(NamedTensor { name, shape, data });
    }
    r.finish()?;
    Ok((out, fp))
}

fn model_meta(c: &ModelConfig) -> Vec<f64> {
    vec![
        c.vocab_size as f64,
        c.hidden_dim as f64,
        c.n_layers as f64,
        c.n_heads as f64,
        c.max_context as f64,
        c.mlp_ratio,
        c.rope_base,
        if c.gated_mlp { 1.0 } else { 0.0 },
    ]
}

pub fn encode_params(params: &ParamSet, fingerprint: &str) -> Vec<u8> {
    let mut tensors = vec![NamedTensor::vector("meta.model", model_meta(&params.config))];
    tensors.extend(params.tensors().into_iter().map(|(n, m)| NamedTensor::matrix(n, m)));
    encode_tensors(&tensors, fingerprint)
}

pub fn decode_params(bytes: &[u8], path: &Path) -> CliResult<ParamSet> {
    let (tensors, _) = decode_tensors(bytes, path)?;
    let meta = tensors
        .iter()
        .find(|t| t.name == "meta.model" && t.data.len() == 8)
        .ok_or_else(|| CliError::data(path, "checkpoint lacks model metadata"))?;
    let m = &meta.data;
    let config = ModelConfig {
        vocab_size: m[0] as usize,
        hidden_dim: m[1] as usize,
        n_layers: m[2] as usize,
        n_heads: m[3] as usize,
        max_context: m[4] as usize,
        mlp_ratio: m[5],
        rope_base: m[6],
        gated_mlp: m[7] != 0.0,
    };
    let mut params = ParamSet::zeros(&config).map_err(|e| CliError::data(path, e.to_string()))?;
    for (name, dst) in params.tensors_mut() {
        let t = tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| CliError::data(path, format!("checkpoint lacks tensor `{name}`")))?;
        if t.shape != [dst.rows(), dst.cols()] {
            return Err(CliError::data(
                path,
                format!("tensor `{name}` has shape {:?}, expected [{}, {}]", t.shape, dst.rows(), dst.cols()),
            ));
        }
        dst.as_mut_slice().copy_from_slice(&t.data);
    }
    Ok(params)
}

pub fn encode_factors(factors: &[KroneckerFactor], fingerprint: &str) -> Vec<u8> {
    let mut tensors = Vec::new();
    for f in factors {
        let base = format!("factors.{}.{}", f.layer, f.kind.name());
        tensors.push(NamedTensor::vector(
            format!("{base}.meta"),
            vec![f.d_out() as f64, f.d_in() as f64, f.sample_count() as f64],
        ));
        tensors.push(NamedTensor::matrix(format!("{base}.delta"), &f.delta()));
        tensors.push(NamedTensor::matrix(format!("{base}.x"), &f.x()));
    }
    encode_tensors(&tensors, fingerprint)
}

pub fn decode_factors(bytes: &[u8], path: &Path) -> CliResult<(Vec<KroneckerFactor>, String)> {
    let (tensors, fp) = decode_tensors(bytes, path)?;
    let mut out = Vec::new();
    for meta in tensors.iter().filter(|t| t.name.ends_with(".meta")) {
        let base = meta.name.trim_end_matches(".meta");
        let parts: Vec<&str> = base.split('.').collect();
        let bad = || CliError::data(path, format!("bad factor entry `{base}`"));
        if parts.len() != 3 || meta.data.len() != 3 {
            return Err(bad());
        }
        let layer: usize = parts[1].parse().map_err(|_| bad())?;
        let kind = TapKind::from_name(parts[2]).ok_or_else(bad)?;
        let find = |suffix: &str| {
            tensors
                .iter()
                .find(|t| t.name == format!("{base}.{suffix}"))
                .ok_or_else(bad)
        };
        let delta = find("delta")?.to_mat(path)?;
        let x = find("x")?.to_mat(path)?;
        if delta.rows() != meta.data[0] as usize || x.rows() != meta.data[1] as usize {
            return Err(bad());
        }
        out.push(
            KroneckerFactor::from_means(layer, kind, delta, x, meta.data[2] as u64)
                .map_err(|e| CliError::data(path, e.to_string()))?,
        );
    }
    Ok((out, fp))
}

// -------------------------------------------------------------------- ledger

#[derive(Debug, Serialize)]
pub struct LedgerPull<'a> {
    pub cluster: usize,
    pub sampled: &'a [InstanceId],
    pub batch_sum: f64,
    pub reward: f64,
}

#[derive(Debug, Serialize)]
pub struct LedgerSelection<'a> {
    pub cluster: usize,
    pub ids: &'a [InstanceId],
}

#[derive(Debug, Serialize)]
pub struct LedgerLine<'a> {
    pub iteration: usize,
    pub clusters: Vec<usize>,
    pub pulls: Vec<LedgerPull<'a>>,
    pub selections: Vec<LedgerSelection<'a>>,
    pub retired: &'a [usize],
    pub skipped_pulls: usize,
    pub selected_total: usize,
}

#[derive(Debug, Serialize)]
struct LedgerHeader<'a> {
    config_fingerprint: &'a str,
}

#[derive(Debug, Serialize)]
struct LedgerFooter {
    stop: &'static str,
    truncated: bool,
    selected_total: usize,
    iterations: usize,
}

pub fn encode_ledger(ledger: &dataselect_core::bandit::SelectionLedger, fingerprint: &str) -> String {
    use dataselect_core::bandit::StopReason;
    let mut s = serde_json::to_string(&LedgerHeader { config_fingerprint: fingerprint }).unwrap();
    s.push('\n');
    for r in &ledger.records {
        let line = LedgerLine {
            iteration: r.iteration,
            clusters: r.pulls.iter().map(|p| p.cluster).collect(),
            pulls: r
                .pulls
                .iter()
                .map(|p| LedgerPull {
                    cluster: p.cluster,
                    sampled: &p.sampled,
                    batch_sum: p.batch_sum,
                    reward: p.reward,
                })
                .collect(),
            selections: r
                .selections
                .iter()
                .map(|x| LedgerSelection { cluster: x.cluster, ids: &x.ids })
                .collect(),
            retired: &r.retired,
            skipped_pulls: r.skipped_pulls,
            selected_total: r.selected_total,
        };
        s.push_str(&serde_json::to_string(&line).unwrap());
        s.push('\n');
    }
    let footer = LedgerFooter {
        stop: match ledger.stop {
            StopReason::BudgetReached => "budget-reached",
            StopReason::AllArmsRetired => "all-arms-retired",
            StopReason::IterationLimit => "iteration-limit",
        },
        truncated: ledger.truncated,
        selected_total: ledger.selected.len(),
        iterations: ledger.iterations(),
    };
    s.push_str(&serde_json::to_string(&footer).unwrap());
    s.push('\n');
    s
}

/// Iteration records parsed back from a ledger file (header and footer skipped).
#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct ParsedPull {
    pub cluster: usize,
    pub sampled: Vec<InstanceId>,
    pub batch_sum: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct ParsedSelection {
    pub cluster: usize,
    pub ids: Vec<InstanceId>,
}

#[derive(Debug, Clone, PartialEq, serde::Deserialize)]
pub struct ParsedIteration {
    pub iteration: usize,
    pub pulls: Vec<ParsedPull>,
    pub selections: Vec<ParsedSelection>,
    pub selected_total: usize,
}

pub fn decode_ledger(text: &str, path: &Path) -> CliResult<Vec<ParsedIteration>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let v: serde_json::Value = serde_json::from_str(line)
            .map_err(|e| CliError::data(path, format!("line {}: {e}", n + 1)))?;
        if v.get("iteration").is_some() {
            out.push(
                serde_json::from_value(v)
                    .map_err(|e| CliError::data(path, format!("line {}: {e}", n + 1)))?,
            );
        }
    }
    Ok(out)
}
