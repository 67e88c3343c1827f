use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use uhubert::cli::{load_checkpoint, save_checkpoint, Checkpoint, Provenance};
use uhubert::clustering;
use uhubert::datagen::{self, CorpusSpec, GeneratorConfig, Profile, ProfileMix};
use uhubert::model::{ModalityInput, ModelConfig};
use uhubert::numcore::Tensor;
use uhubert::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_validation() => PyValueError::new_err(e.to_string()),
        e => PyRuntimeError::new_err(e.to_string()),
    }
}

fn tensor(rows: Vec<Vec<f64>>) -> PyResult<Tensor> {
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("rows must all have the same length"));
    }
    Tensor::matrix(n, d, rows.into_iter().flatten().collect()).map_err(to_py)
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.last_dim();
    t.data().chunks(d.max(1)).map(<[f64]>::to_vec).collect()
}

fn mix(profile: &str) -> PyResult<ProfileMix> {
    match Profile::parse(profile) {
        Some(Profile::AB) => Ok(ProfileMix::AB_ONLY),
        Some(Profile::A) => Ok(ProfileMix::A_ONLY),
        Some(Profile::B) => Ok(ProfileMix::B_ONLY),
        None => Err(PyValueError::new_err(format!("unknown profile `{profile}`"))),
    }
}

/// One utterance as plain Python values.
#[pyclass(get_all, skip_from_py_object)]
#[derive(Clone)]
struct Utterance {
    id: String,
    frames: usize,
    features_a: Option<Vec<Vec<f64>>>,
    features_b: Option<Vec<Vec<f64>>>,
    unit_labels: Vec<usize>,
    transcript: Vec<usize>,
}

#[pyclass]
struct Corpus {
    inner: datagen::Corpus,
}

#[pymethods]
impl Corpus {
    /// Generate a synthetic two-stream corpus with the default generator.
    #[staticmethod]
    #[pyo3(signature = (n_utts, seed=0, profile="AB", min_frames=40, max_frames=120, name="corpus"))]
    fn generate(n_utts: usize, seed: u64, profile: &str, min_frames: usize, max_frames: usize, name: &str) -> PyResult<Self> {
        let generator = GeneratorConfig { seed, ..Default::default() };
        let spec = CorpusSpec { name: name.into(), n_utts, min_frames, max_frames, mix: mix(profile)? };
        Ok(Corpus { inner: datagen::generate_corpus(&generator, &spec).map_err(to_py)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Corpus { inner: datagen::read_corpus(&path).map_err(to_py)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        datagen::write_corpus(&path, &self.inner).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> &str {
        &self.inner.name
    }

    #[getter]
    fn fingerprint(&self) -> &str {
        &self.inner.fingerprint
    }

    fn __len__(&self) -> usize {
        self.inner.utterances.len()
    }

    fn __getitem__(&self, i: usize) -> PyResult<Utterance> {
        let u = self.inner.utterances.get(i).ok_or_else(|| pyo3::exceptions::PyIndexError::new_err(i))?;
        Ok(Utterance {
            id: u.id.clone(),
            frames: u.frames,
            features_a: u.features_a.as_ref().map(rows),
            features_b: u.features_b.as_ref().map(rows),
            unit_labels: u.unit_labels.clone(),
            transcript: u.transcript.clone(),
        })
    }
}

#[pyclass]
struct Model {
    inner: uhubert::model::Model,
}

#[pymethods]
impl Model {
    /// Fresh model; `config` is a JSON object overriding default fields.
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let mut value = serde_json::to_value(ModelConfig::default()).expect("serializable");
        if let Some(text) = config {
            let over: serde_json::Value = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
            let Some(fields) = over.as_object() else {
                return Err(PyValueError::new_err("config must be a JSON object"));
            };
            for (k, v) in fields {
                value[k] = v.clone();
            }
        }
        let config: ModelConfig = serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Model { inner: uhubert::model::Model::new(config, seed).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Model { inner: load_checkpoint(&path, None).map_err(to_py)?.model })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let ck = Checkpoint::new(self.inner.clone(), None, Provenance::new("python", 0));
        save_checkpoint(&path, &ck).map_err(to_py)
    }

    #[getter]
    fn config(&self) -> String {
        serde_json::to_string(&self.inner.config).expect("serializable")
    }

    #[getter]
    fn n_params(&self) -> usize {
        self.inner.params.numel()
    }

    /// Final-layer features (`T x embed_dim`); an absent stream is zero-filled.
    #[pyo3(signature = (features_a=None, features_b=None))]
    fn encode(&self, features_a: Option<Vec<Vec<f64>>>, features_b: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let a = features_a.map(tensor).transpose()?;
        let b = features_b.map(tensor).transpose()?;
        let input = ModalityInput::new(a.as_ref(), b.as_ref()).map_err(to_py)?;
        Ok(rows(&self.inner.encode(input, None).map_err(to_py)?.final_features))
    }

    #[pyo3(signature = (features_a=None, features_b=None))]
    fn cluster_logits(&self, features_a: Option<Vec<Vec<f64>>>, features_b: Option<Vec<Vec<f64>>>) -> PyResult<Vec<Vec<f64>>> {
        let a = features_a.map(tensor).transpose()?;
        let b = features_b.map(tensor).transpose()?;
        let input = ModalityInput::new(a.as_ref(), b.as_ref()).map_err(to_py)?;
        let out = self.inner.encode(input, None).map_err(to_py)?;
        Ok(rows(&self.inner.cluster_logits(&out.final_features).map_err(to_py)?))
    }
}

/// Fit k-means; returns `(centroids, assignments)`.
#[pyfunction]
#[pyo3(signature = (x, k, max_iters=50, seed=0))]
fn kmeans(x: Vec<Vec<f64>>, k: usize, max_iters: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<usize>)> {
    let x = tensor(x)?;
    let codebook = clustering::kmeans_fit(&x, k, max_iters, seed).map_err(to_py)?;
    let labels = clustering::assign(&codebook, &x).map_err(to_py)?;
    Ok((rows(&codebook.centroids), labels))
}

/// Phone-normalized mutual information of a cluster assignment.
#[pyfunction]
fn pnmi(labels: Vec<usize>, clusters: Vec<usize>) -> PyResult<f64> {
    uhubert::metrics::pnmi(&labels, &clusters).map_err(to_py)
}

/// Word error rate between two token sequences.
#[pyfunction]
fn wer(reference: Vec<i64>, hypothesis: Vec<i64>) -> PyResult<f64> {
    uhubert::finetune::wer(&reference, &hypothesis).map_err(to_py)
}

#[pymodule]
fn uhubert_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<Utterance>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(kmeans, m)?)?;
    m.add_function(wrap_pyfunction!(pnmi, m)?)?;
    m.add_function(wrap_pyfunction!(wer, m)?)?;
    Ok(())
}
