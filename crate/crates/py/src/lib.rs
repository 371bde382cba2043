//! Python bindings: runtime and channel operations, the two lock-free
//! primitives, the bus model and the stress harness.

use std::time::Duration;

use mcomm::harness::{self, Affinity, ReportFormat, RunConfig, TrafficKind};
use mcomm::model::{self, Calibration, ModelConfig};
use mcomm::nbb::{InsertError, ReadError};
use mcomm::nbw::{self, StateReader, StateWriter};
use mcomm::{
    ApiError, Backend, CancelOutcome, Completion, EndpointId, MessageEnvelope, NodeHandle, RequestId, RuntimeConfig,
    ScalarValue, ScalarWidth, SendStatus, WaitOutcome,
};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};
use std::sync::Mutex;

create_exception!(mcomm_py, McommError, PyException);

fn api_err(e: ApiError) -> PyErr {
    McommError::new_err(e.to_string())
}

fn value_err(e: impl ToString) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn width(bits: u8) -> PyResult<ScalarWidth> {
    ScalarWidth::from_bits(bits).ok_or_else(|| PyValueError::new_err(format!("unsupported scalar width {bits}")))
}

#[pyclass(frozen, eq, hash, skip_from_py_object, module = "mcomm_py")]
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
struct Endpoint(EndpointId);

#[pymethods]
impl Endpoint {
    #[new]
    fn new(domain: u16, node: u16, port: u16) -> Self {
        Endpoint(EndpointId::new(domain, node, port))
    }

    #[getter]
    fn domain(&self) -> u16 {
        self.0.domain
    }

    #[getter]
    fn node(&self) -> u16 {
        self.0.node
    }

    #[getter]
    fn port(&self) -> u16 {
        self.0.port
    }

    fn __repr__(&self) -> String {
        format!("Endpoint{}", self.0)
    }
}

#[pyclass(frozen, module = "mcomm_py")]
struct Node(NodeHandle);

#[pymethods]
impl Node {
    #[getter]
    fn domain(&self) -> u16 {
        self.0.domain()
    }

    #[getter]
    fn node(&self) -> u16 {
        self.0.node()
    }
}

#[pyclass(frozen, module = "mcomm_py")]
struct Request(RequestId);

#[pymethods]
impl Request {
    fn __repr__(&self) -> String {
        format!("Request({})", self.0.index())
    }
}

#[pyclass(frozen, module = "mcomm_py")]
struct Channel(mcomm::Channel);

#[pymethods]
impl Channel {
    #[getter]
    fn kind(&self) -> String {
        self.0.kind().to_string()
    }

    #[getter]
    fn is_open(&self) -> bool {
        self.0.is_open()
    }
}

/// A message runtime over the `lockfree` or `locked` backend.
#[pyclass(frozen, module = "mcomm_py")]
struct Runtime(mcomm::Runtime);

#[pymethods]
impl Runtime {
    #[new]
    #[pyo3(signature = (backend = "lockfree", record_transitions = false))]
    fn new(backend: &str, record_transitions: bool) -> PyResult<Self> {
        let backend: Backend = backend.parse().map_err(value_err)?;
        Ok(Runtime(mcomm::Runtime::new(RuntimeConfig { record_transitions, ..RuntimeConfig::with_backend(backend) })))
    }

    #[getter]
    fn backend(&self) -> &'static str {
        self.0.backend().as_str()
    }

    fn node_init(&self, domain: u16, node: u16) -> PyResult<Node> {
        self.0.node_init(domain, node).map(Node).map_err(api_err)
    }

    fn node_finalize(&self, node: &Node) -> PyResult<()> {
        self.0.node_finalize(&node.0).map_err(api_err)
    }

    fn create_endpoint(&self, node: &Node, port: u16) -> PyResult<Endpoint> {
        self.0.create_endpoint(&node.0, port).map(Endpoint).map_err(api_err)
    }

    #[pyo3(signature = (src, dst, payload, priority = 0, txid = 0))]
    fn msg_send(&self, src: &Endpoint, dst: &Endpoint, payload: &[u8], priority: u8, txid: u64) -> PyResult<Request> {
        self.0.msg_send(src.0, dst.0, MessageEnvelope::new(priority, txid, payload)).map(Request).map_err(api_err)
    }

    fn msg_recv(&self, ep: &Endpoint) -> PyResult<Request> {
        self.0.msg_recv(ep.0).map(Request).map_err(api_err)
    }

    /// `kind` is `packet`, `scalar` or `scalar8`..`scalar64`.
    fn channel_open(&self, kind: &str, send: &Endpoint, recv: &Endpoint) -> PyResult<Channel> {
        let kind = kind.parse().map_err(value_err)?;
        self.0.channel_open(kind, send.0, recv.0).map(Channel).map_err(api_err)
    }

    fn channel_close(&self, chan: &Channel) -> PyResult<()> {
        self.0.channel_close(&chan.0).map_err(api_err)
    }

    fn pkt_send(&self, chan: &Channel, payload: &[u8]) -> PyResult<Request> {
        self.0.pkt_send(&chan.0, payload).map(Request).map_err(api_err)
    }

    fn pkt_recv(&self, chan: &Channel) -> PyResult<Request> {
        self.0.pkt_recv(&chan.0).map(Request).map_err(api_err)
    }

    /// False when the channel ring is full.
    #[pyo3(signature = (chan, value, bits = 64))]
    fn scalar_send(&self, chan: &Channel, value: u64, bits: u8) -> PyResult<bool> {
        let v = ScalarValue::new(width(bits)?, value).map_err(api_err)?;
        Ok(self.0.scalar_send(&chan.0, v).map_err(api_err)? == SendStatus::Sent)
    }

    #[pyo3(signature = (chan, bits = 64))]
    fn scalar_recv(&self, chan: &Channel, bits: u8) -> PyResult<Option<u64>> {
        Ok(self.0.scalar_recv(&chan.0, width(bits)?).map_err(api_err)?.map(|v| v.value()))
    }

    /// Waits up to `timeout` seconds. Returns a dict whose `status` is
    /// `completed`, `cancelled`, `pending` or `timeout`; completed receives
    /// carry `payload`, and messages also `priority` and `txid`. Packet
    /// buffers are copied out and released.
    #[pyo3(signature = (req, timeout = 1.0))]
    fn wait<'py>(&self, py: Python<'py>, req: &Request, timeout: f64) -> PyResult<Bound<'py, PyDict>> {
        let timeout = Duration::try_from_secs_f64(timeout).map_err(value_err)?;
        let id = req.0;
        let outcome = py.detach(|| self.0.wait(id, timeout)).map_err(api_err)?;
        let d = PyDict::new(py);
        let status = match outcome {
            WaitOutcome::Completed(c) => {
                match c {
                    Completion::Sent => {}
                    Completion::Message { payload, priority, txid } => {
                        d.set_item("payload", PyBytes::new(py, &payload))?;
                        d.set_item("priority", priority)?;
                        d.set_item("txid", txid)?;
                    }
                    Completion::Packet { buffer, len } => {
                        d.set_item("payload", PyBytes::new(py, &self.0.read_buffer(&buffer, len)))?;
                        self.0.buffers().free(buffer);
                    }
                }
                "completed"
            }
            WaitOutcome::Cancelled => "cancelled",
            WaitOutcome::Pending => "pending",
            WaitOutcome::Timeout => "timeout",
        };
        d.set_item("status", status)?;
        Ok(d)
    }

    /// `cancelled` or `too_late`.
    fn cancel(&self, req: &Request) -> PyResult<&'static str> {
        Ok(match self.0.cancel(req.0).map_err(api_err)? {
            CancelOutcome::Cancelled => "cancelled",
            CancelOutcome::TooLate => "too_late",
        })
    }

    fn buffers_in_use(&self) -> usize {
        self.0.buffers().in_use()
    }
}

/// Single-producer single-consumer ring of 64-bit items.
#[pyclass(frozen, module = "mcomm_py")]
struct NonBlockingBuffer(mcomm::nbb::NonBlockingBuffer);

#[pymethods]
impl NonBlockingBuffer {
    #[new]
    fn new(capacity: usize) -> PyResult<Self> {
        if !capacity.is_power_of_two() {
            return Err(PyValueError::new_err(format!("capacity {capacity} is not a power of two")));
        }
        Ok(NonBlockingBuffer(mcomm::nbb::NonBlockingBuffer::new(capacity)))
    }

    #[getter]
    fn capacity(&self) -> usize {
        self.0.capacity()
    }

    fn __len__(&self) -> usize {
        self.0.occupancy()
    }

    /// `ok`, `full` or `full_but_consumer_reading`.
    fn insert(&self, item: u64) -> &'static str {
        match self.0.insert_item(item) {
            Ok(()) => "ok",
            Err(InsertError::Full) => "full",
            Err(InsertError::FullButConsumerReading) => "full_but_consumer_reading",
        }
    }

    /// `("ok", item)`, `("empty", None)` or `("empty_but_producer_inserting", None)`.
    fn read(&self) -> (&'static str, Option<u64>) {
        match self.0.read_item() {
            Ok(v) => ("ok", Some(v)),
            Err(ReadError::Empty) => ("empty", None),
            Err(ReadError::EmptyButProducerInserting) => ("empty_but_producer_inserting", None),
        }
    }
}

/// Versioned multi-slot state cell: writes never wait, reads may retry.
#[pyclass(module = "mcomm_py")]
struct StateCell {
    writer: Mutex<StateWriter>,
    reader: StateReader,
}

#[pymethods]
impl StateCell {
    #[new]
    #[pyo3(signature = (slots = 1, capacity = 64))]
    fn new(slots: usize, capacity: usize) -> PyResult<Self> {
        if slots == 0 {
            return Err(PyValueError::new_err("a state cell needs at least one slot"));
        }
        let (writer, reader) = nbw::state_cell(slots, capacity);
        Ok(StateCell { writer: Mutex::new(writer), reader })
    }

    #[getter]
    fn version(&self) -> u64 {
        self.reader.version()
    }

    fn write(&self, payload: &[u8]) -> PyResult<()> {
        self.writer.lock().expect("writer lock").write(payload).map_err(value_err)
    }

    #[pyo3(signature = (max_retries = 100))]
    fn read<'py>(&self, py: Python<'py>, max_retries: u32) -> PyResult<Bound<'py, PyBytes>> {
        let (bytes, _) = self.reader.read(max_retries).map_err(|e| McommError::new_err(e.to_string()))?;
        Ok(PyBytes::new(py, &bytes))
    }
}

#[pyfunction]
fn throughput_speedup(test: f64, original: f64) -> PyResult<f64> {
    harness::throughput_speedup(test, original).map_err(value_err)
}

#[pyfunction]
fn latency_speedup(original: f64, test: f64) -> PyResult<f64> {
    harness::latency_speedup(original, test).map_err(value_err)
}

fn calibration(path: Option<&str>) -> PyResult<Calibration> {
    match path {
        Some(p) => model::load_calibration(p).map_err(value_err),
        None => model::parse_calibration(include_str!("../../core/calibration/default.toml")).map_err(value_err),
    }
}

fn model_config(path: Option<&str>, cores: usize, hit_rate: f64) -> PyResult<ModelConfig> {
    let cfg = calibration(path)?.config(cores, hit_rate);
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Bus-limited message rate, msgs/s. Uses the shipped calibration unless a
/// TOML path is given.
#[pyfunction]
#[pyo3(signature = (hit_rate = 0.0, calibration = None))]
fn theoretical_max(hit_rate: f64, calibration: Option<&str>) -> PyResult<f64> {
    model::theoretical_max(&model_config(calibration, 1, hit_rate)?).map_err(value_err)
}

/// Simulates one model point and returns its result as a dict.
#[pyfunction]
#[pyo3(signature = (cores = 1, hit_rate = 0.0, seed = 1, completions = model::DEFAULT_COMPLETIONS, calibration = None))]
fn simulate<'py>(
    py: Python<'py>,
    cores: usize,
    hit_rate: f64,
    seed: u64,
    completions: f64,
    calibration: Option<&str>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = model_config(calibration, cores, hit_rate)?;
    let r = py.detach(|| model::simulate(&cfg, cfg.horizon_for(completions), seed)).map_err(value_err)?;
    json_value(py, &serde_json::to_string(&r).map_err(value_err)?)
}

/// Runs one stress configuration over a topology file and returns the
/// report rows as dicts.
#[pyfunction]
#[pyo3(signature = (topology, backend = "lockfree", affinity = "none", kind = None, count = 1000, payload = 24, reps = 1))]
#[allow(clippy::too_many_arguments)]
fn stress<'py>(
    py: Python<'py>,
    topology: &str,
    backend: &str,
    affinity: &str,
    kind: Option<&str>,
    count: u64,
    payload: usize,
    reps: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let topo = harness::load_topology(topology).map_err(value_err)?;
    let backend: Backend = backend.parse().map_err(value_err)?;
    let affinity: Affinity = affinity.parse().map_err(value_err)?;
    let kind: Option<TrafficKind> = kind.map(str::parse).transpose().map_err(value_err)?;
    let cfg = RunConfig { kind, count, payload, reps, ..RunConfig::new(backend, affinity) };
    let report = py.detach(|| harness::run_config(&topo, &cfg)).map_err(|e| McommError::new_err(e.to_string()))?;
    let text = harness::render_report(&[report], ReportFormat::Json, 0).map_err(value_err)?;
    json_value(py, &text)
}

fn json_value<'py>(py: Python<'py>, text: &str) -> PyResult<Bound<'py, PyAny>> {
    py.import("json")?.call_method1("loads", (text,))
}

#[pymodule]
fn mcomm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("McommError", m.py().get_type::<McommError>())?;
    m.add_class::<Runtime>()?;
    m.add_class::<Endpoint>()?;
    m.add_class::<Node>()?;
    m.add_class::<Request>()?;
    m.add_class::<Channel>()?;
    m.add_class::<NonBlockingBuffer>()?;
    m.add_class::<StateCell>()?;
    m.add_function(wrap_pyfunction!(throughput_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(latency_speedup, m)?)?;
    m.add_function(wrap_pyfunction!(theoretical_max, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(stress, m)?)?;
    Ok(())
}
