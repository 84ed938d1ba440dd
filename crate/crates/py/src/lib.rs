//! Python bindings: synthetic data, training, front sweeps and the
//! hypervolume/dominance toolbox.
//!
//! Build with `cargo build -p parec-py --release`, rename the cdylib to
//! `parec.so` (see python/smoke_test.py) and `import parec`.

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use std::path::PathBuf;

use parec_core::data;
use parec_core::evaluation;
use parec_core::losses;
use parec_core::model::{forward_scores, Candidates, ModelConfig, Parameters};
use parec_core::sampling::{self, DirichletParams, PreferenceVector};
use parec_core::training::{self, OptimizerState, TrainConfig};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn io_err(e: impl std::fmt::Display) -> PyErr {
    PyIOError::new_err(e.to_string())
}

fn parse_g(name: &str) -> PyResult<losses::GFunction> {
    name.parse().map_err(value_err)
}

fn pref(pi_o: f64) -> PyResult<PreferenceVector> {
    PreferenceVector::from_pi_o(pi_o).map_err(value_err)
}

/// Index-encoded sessions plus vocabulary.
#[pyclass(from_py_object)]
#[derive(Clone)]
struct Dataset {
    inner: data::Dataset,
}

#[pymethods]
impl Dataset {
    #[getter]
    fn n_sessions(&self) -> usize {
        self.inner.sessions.len()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.vocab_size()
    }

    #[getter]
    fn click_events(&self) -> usize {
        self.inner.total_clicks()
    }

    #[getter]
    fn order_events(&self) -> usize {
        self.inner.total_orders()
    }

    /// Session steps as `(item_index, ordered)` pairs.
    fn session(&self, index: usize) -> PyResult<Vec<(u32, bool)>> {
        self.inner
            .sessions
            .get(index)
            .map(|s| s.steps.iter().map(|st| (st.item, st.ordered)).collect())
            .ok_or_else(|| value_err(format!("session index {index} out of range")))
    }

    fn item_id(&self, index: u32) -> PyResult<String> {
        if (index as usize) < self.inner.vocab_size() {
            Ok(self.inner.vocab.id(index).to_string())
        } else {
            Err(value_err(format!("item index {index} out of range")))
        }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset(&self.inner, &path).map_err(io_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset(&path).map_err(io_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(sessions={}, items={}, clicks={}, orders={})",
            self.n_sessions(),
            self.n_items(),
            self.click_events(),
            self.order_events()
        )
    }
}

/// Deterministic synthetic conflict dataset.
#[pyfunction]
#[pyo3(signature = (n_sessions, n_items, conflict, seed=0))]
fn generate_synthetic(
    n_sessions: usize,
    n_items: usize,
    conflict: f64,
    seed: u64,
) -> PyResult<Dataset> {
    let spec = data::SyntheticSpec {
        n_sessions,
        n_items,
        conflict,
        seed,
    };
    Ok(Dataset {
        inner: data::generate_synthetic(&spec).map_err(value_err)?,
    })
}

/// Iterated support/length filtering to a fixpoint.
#[pyfunction]
#[pyo3(signature = (dataset, min_item_support=5, min_session_clicks=2))]
fn filter_dataset(
    dataset: &Dataset,
    min_item_support: usize,
    min_session_clicks: usize,
) -> Dataset {
    Dataset {
        inner: data::filter_dataset(&dataset.inner, min_item_support, min_session_clicks),
    }
}

/// Temporal train/test split on session start times.
#[pyfunction]
fn temporal_split(dataset: &Dataset, boundary: i64) -> PyResult<(Dataset, Dataset)> {
    let (train, test) = data::temporal_split(&dataset.inner, boundary).map_err(value_err)?;
    Ok((Dataset { inner: train }, Dataset { inner: test }))
}

#[pyfunction]
fn click_loss_sampled_softmax(positive_logit: f64, negative_logits: Vec<f64>) -> PyResult<f64> {
    if negative_logits.is_empty() {
        return Err(value_err("need at least one negative logit"));
    }
    Ok(losses::click_loss_sampled_softmax(
        positive_logit,
        &negative_logits,
    ))
}

#[pyfunction]
fn order_loss_bce(logit: f64, label: bool) -> f64 {
    losses::order_loss_bce(logit, label)
}

#[pyfunction]
fn scalarized_loss(l_c: f64, l_o: f64, pi_o: f64) -> PyResult<f64> {
    Ok(losses::scalarized_loss(l_c, l_o, &pref(pi_o)?))
}

#[pyfunction]
#[pyo3(signature = (l_c, l_o, pi_o, g="softmax"))]
fn non_uniformity_penalty(l_c: f64, l_o: f64, pi_o: f64, g: &str) -> PyResult<f64> {
    losses::non_uniformity_penalty(l_c, l_o, &pref(pi_o)?, parse_g(g)?).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (l_c, l_o, pi_o, lambda_, g="softmax"))]
fn total_loss<'py>(
    py: Python<'py>,
    l_c: f64,
    l_o: f64,
    pi_o: f64,
    lambda_: f64,
    g: &str,
) -> PyResult<Bound<'py, PyDict>> {
    let breakdown =
        losses::total_loss(l_c, l_o, &pref(pi_o)?, lambda_, parse_g(g)?).map_err(value_err)?;
    let dict = PyDict::new(py);
    dict.set_item("l_c", breakdown.l_c)?;
    dict.set_item("l_o", breakdown.l_o)?;
    dict.set_item("weighted_c", breakdown.weighted_c)?;
    dict.set_item("weighted_o", breakdown.weighted_o)?;
    dict.set_item("pi_hat", breakdown.pi_hat)?;
    dict.set_item("reg", breakdown.reg)?;
    dict.set_item("total", breakdown.total)?;
    Ok(dict)
}

/// Evenly spaced `(pi_c, pi_o)` grid over `[clamp, 1 - clamp]`.
#[pyfunction]
#[pyo3(signature = (n, clamp=1e-3))]
fn preference_grid(n: usize, clamp: f64) -> PyResult<Vec<(f64, f64)>> {
    Ok(sampling::preference_grid(n, clamp)
        .map_err(value_err)?
        .iter()
        .map(|p| (p.pi_c(), p.pi_o()))
        .collect())
}

/// Dirichlet preference draws, reproducible under `seed`.
#[pyfunction]
#[pyo3(signature = (n, beta_c=0.5, beta_o=0.5, seed=0))]
fn sample_preferences(n: usize, beta_c: f64, beta_o: f64, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    use rand::SeedableRng;
    let params = DirichletParams::new(beta_c, beta_o).map_err(value_err)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let p = sampling::sample_preference(&mut rng, &params);
            (p.pi_c(), p.pi_o())
        })
        .collect())
}

#[pyfunction]
fn dominance_filter(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    evaluation::dominance_filter(&points)
}

#[pyfunction]
fn nadir_point(points: Vec<(f64, f64)>) -> PyResult<(f64, f64)> {
    evaluation::nadir_point(&points).map_err(value_err)
}

#[pyfunction]
fn hypervolume_2d(points: Vec<(f64, f64)>, reference: (f64, f64)) -> f64 {
    evaluation::hypervolume_2d(
        &points,
        &evaluation::ReferencePoint {
            r_c: reference.0,
            r_o: reference.1,
        },
    )
}

/// A trained preference-conditioned recommender.
#[pyclass]
struct Model {
    params: Parameters,
    opt: OptimizerState,
    cfg: TrainConfig,
}

#[pymethods]
impl Model {
    /// Train a fresh model on `dataset`.
    #[staticmethod]
    #[pyo3(signature = (dataset, *, d_model=32, layers=1, heads=2, max_len=16,
                        epochs=10, batch=256, lr=1e-4, lambda_=0.0,
                        beta=(0.5, 0.5), negatives=128, seed=0, g="softmax"))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        dataset: &Dataset,
        d_model: usize,
        layers: usize,
        heads: usize,
        max_len: usize,
        epochs: usize,
        batch: usize,
        lr: f64,
        lambda_: f64,
        beta: (f64, f64),
        negatives: usize,
        seed: u64,
        g: &str,
    ) -> PyResult<Self> {
        let model_cfg = ModelConfig {
            d_model,
            n_layers: layers,
            n_heads: heads,
            max_len,
            vocab_size: dataset.inner.vocab_size(),
            seed,
        };
        let cfg = TrainConfig {
            batch_size: batch,
            learning_rate: lr,
            epochs,
            lambda: lambda_,
            beta: DirichletParams::new(beta.0, beta.1).map_err(value_err)?,
            negatives,
            seed,
            g: parse_g(g)?,
            pi_fixed: None,
        };
        let (params, opt, _, _) =
            training::train(&dataset.inner, &model_cfg, &cfg).map_err(runtime_err)?;
        Ok(Self { params, opt, cfg })
    }

    /// Mean `(l_c, l_o)` over all test prediction positions at `pi_o`.
    #[pyo3(signature = (test, pi_o, negatives=128, seed=0))]
    fn evaluate_losses(
        &self,
        test: &Dataset,
        pi_o: f64,
        negatives: usize,
        seed: u64,
    ) -> PyResult<(f64, f64)> {
        evaluation::evaluate_losses(&self.params, &test.inner, &pref(pi_o)?, negatives, seed)
            .map_err(runtime_err)
    }

    /// Sweep a preference grid; returns rows of `(pi_o, l_c, l_o)`.
    #[pyo3(signature = (test, grid_size=26, clamp=1e-3, negatives=128, seed=0))]
    fn sweep_front(
        &self,
        test: &Dataset,
        grid_size: usize,
        clamp: f64,
        negatives: usize,
        seed: u64,
    ) -> PyResult<Vec<(f64, f64, f64)>> {
        let grid = sampling::preference_grid(grid_size, clamp).map_err(value_err)?;
        let front =
            evaluation::sweep_front(&self.params, &test.inner, &grid, negatives, seed)
                .map_err(runtime_err)?;
        Ok(front
            .points
            .iter()
            .map(|p| (p.pi_o, p.l_c, p.l_o))
            .collect())
    }

    #[pyo3(signature = (test, pi_o=0.0, k=20))]
    fn recall_at_k(&self, test: &Dataset, pi_o: f64, k: usize) -> PyResult<f64> {
        evaluation::recall_at_k(&self.params, &test.inner, &pref(pi_o)?, k).map_err(runtime_err)
    }

    /// Full-vocabulary logits for every prefix position.
    fn scores(&self, prefix: Vec<u32>, pi_o: f64) -> PyResult<Vec<Vec<f64>>> {
        let scores = forward_scores(&self.params, &prefix, &pref(pi_o)?, Candidates::All)
            .map_err(value_err)?;
        Ok((0..scores.positions())
            .map(|p| scores.row(p).to_vec())
            .collect())
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        training::save_checkpoint(&self.params, &self.opt, &self.cfg, &path).map_err(io_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (params, opt, cfg) = training::load_checkpoint(&path).map_err(io_err)?;
        Ok(Self { params, opt, cfg })
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.params.config().vocab_size
    }

    fn __repr__(&self) -> String {
        let c = self.params.config();
        format!(
            "Model(d_model={}, layers={}, heads={}, vocab={}, lambda={})",
            c.d_model, c.n_layers, c.n_heads, c.vocab_size, self.cfg.lambda
        )
    }
}

#[pymodule]
fn parec(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(filter_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(temporal_split, m)?)?;
    m.add_function(wrap_pyfunction!(click_loss_sampled_softmax, m)?)?;
    m.add_function(wrap_pyfunction!(order_loss_bce, m)?)?;
    m.add_function(wrap_pyfunction!(scalarized_loss, m)?)?;
    m.add_function(wrap_pyfunction!(non_uniformity_penalty, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(preference_grid, m)?)?;
    m.add_function(wrap_pyfunction!(sample_preferences, m)?)?;
    m.add_function(wrap_pyfunction!(dominance_filter, m)?)?;
    m.add_function(wrap_pyfunction!(nadir_point, m)?)?;
    m.add_function(wrap_pyfunction!(hypervolume_2d, m)?)?;
    Ok(())
}
