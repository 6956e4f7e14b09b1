//! C ABI over the tmegraph toolkit.
//!
//! Objects cross the boundary as opaque handles (`TgGraph`, `TgModel`) that
//! the caller releases with the matching `*_free`. Every fallible call
//! returns a [`TgStatus`]; on failure the message is available from
//! [`tg_last_error`] on the same thread. Strings returned by the library are
//! released with [`tg_string_free`]. Panics never cross the boundary.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::sync::OnceLock;

use tmegraph::cli::load_bundle;
use tmegraph::explain::{integrated_gradients, IgConfig};
use tmegraph::graph::{build_graph, deserialize_graph, serialize_graph, SpatialGraph};
use tmegraph::ingest::Phenotype;
use tmegraph::metrics::{metric_names, metric_vector, N_METRICS};
use tmegraph::model::{make_test_graph, softmax, Checkpoint, Model, RoISample};
use tmegraph::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TgStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Validation = 3,
    Parse = 4,
    Shape = 5,
    Empty = 6,
    NonFinite = 7,
    ModelMismatch = 8,
    Io = 9,
    BufferTooSmall = 10,
    Panic = 11,
}

/// Spatial graph handle.
pub struct TgGraph(SpatialGraph);

/// Trained model handle.
pub struct TgModel(Model);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> TgStatus {
    match e {
        Error::MissingColumn(_) | Error::Parse { .. } | Error::Malformed { .. } | Error::Json(_) | Error::Csv(_) => {
            TgStatus::Parse
        }
        Error::Validation(_) | Error::Config(_) => TgStatus::Validation,
        Error::Shape(_) => TgStatus::Shape,
        Error::Empty(_) => TgStatus::Empty,
        Error::NonFinite(_) => TgStatus::NonFinite,
        Error::ModelMismatch(_) => TgStatus::ModelMismatch,
        Error::Io { .. } => TgStatus::Io,
    }
}

struct Fail(TgStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn fail(status: TgStatus, msg: impl Into<String>) -> Fail {
    Fail(status, msg.into())
}

/// Run `f`, record any failure and map it to a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> TgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            TgStatus::Ok
        }
        Ok(Err(Fail(s, m))) => {
            set_error(&m);
            s
        }
        Err(_) => {
            set_error("internal panic");
            TgStatus::Panic
        }
    }
}

fn nonnull<T>(p: *const T, what: &str) -> Result<(), Fail> {
    if p.is_null() {
        Err(fail(TgStatus::NullPointer, format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn slice<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts(p, n))
}

unsafe fn slice_mut<'a, T>(p: *mut T, n: usize, what: &str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    nonnull(p, what)?;
    Ok(std::slice::from_raw_parts_mut(p, n))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    nonnull(p, what)?;
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(TgStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn graph<'a>(g: *const TgGraph) -> Result<&'a SpatialGraph, Fail> {
    nonnull(g, "graph")?;
    Ok(&(*g).0)
}

unsafe fn model<'a>(m: *const TgModel) -> Result<&'a Model, Fail> {
    nonnull(m, "model")?;
    Ok(&(*m).0)
}

fn give_string(s: String, out: *mut *mut c_char) -> Result<(), Fail> {
    let c = CString::new(s).map_err(|_| fail(TgStatus::InvalidArgument, "string holds a NUL byte"))?;
    unsafe { *out = c.into_raw() };
    Ok(())
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn tg_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Release a string returned by the library. Null is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tg_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Build a radius graph: nodes at `points` (`n` x,y pairs), edges between
/// points strictly closer than `k`. `features` holds `n * feature_dim`
/// values row by row and may be null when `feature_dim` is 0.
///
/// # Safety
/// Pointers must reference arrays of the stated lengths; `out` must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_build(
    points: *const f64,
    n: usize,
    features: *const f64,
    feature_dim: usize,
    k: f64,
    out: *mut *mut TgGraph,
) -> TgStatus {
    guard(|| {
        nonnull(out, "out")?;
        let xy = slice(points, 2 * n, "points")?;
        let f = slice(features, n * feature_dim, "features")?;
        let pts: Vec<[f64; 2]> = xy.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        let g = build_graph(&pts, f.to_vec(), feature_dim, k)?;
        *out = Box::into_raw(Box::new(TgGraph(g)));
        Ok(())
    })
}

/// Release a graph. Null is ignored.
///
/// # Safety
/// `g` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_free(g: *mut TgGraph) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Node and edge counts.
///
/// # Safety
/// `g` must be a live graph; outputs may be null when not wanted.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_counts(g: *const TgGraph, n_nodes: *mut usize, n_edges: *mut usize) -> TgStatus {
    guard(|| {
        let g = graph(g)?;
        if !n_nodes.is_null() {
            *n_nodes = g.n_nodes();
        }
        if !n_edges.is_null() {
            *n_edges = g.n_edges();
        }
        Ok(())
    })
}

/// Copy the edge list as `(u, v)` pairs with `u < v` into `pairs`, which
/// holds room for `capacity` pairs.
///
/// # Safety
/// `pairs` must hold `2 * capacity` writable values.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_edges(g: *const TgGraph, pairs: *mut usize, capacity: usize) -> TgStatus {
    guard(|| {
        let g = graph(g)?;
        if capacity < g.n_edges() {
            return Err(fail(
                TgStatus::BufferTooSmall,
                format!("{} edges, room for {capacity}", g.n_edges()),
            ));
        }
        let out = slice_mut(pairs, 2 * g.n_edges(), "pairs")?;
        for (slot, &(u, v)) in out.chunks_exact_mut(2).zip(&g.edges) {
            slot[0] = u;
            slot[1] = v;
        }
        Ok(())
    })
}

/// Attach phenotype labels, one per node, as indices into
/// cd4, cd8, cd20, foxp3, ck.
///
/// # Safety
/// `labels` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_set_labels(g: *mut TgGraph, labels: *const u8, n: usize) -> TgStatus {
    guard(|| {
        nonnull(g, "graph")?;
        let raw = slice(labels, n, "labels")?;
        let labels = raw
            .iter()
            .map(|&i| {
                Phenotype::ALL
                    .get(i as usize)
                    .copied()
                    .ok_or_else(|| fail(TgStatus::InvalidArgument, format!("phenotype index {i} out of range")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let g = &mut (*g).0;
        *g = g.clone().with_labels(labels)?;
        Ok(())
    })
}

/// Number of entries in the metric catalog.
#[no_mangle]
pub extern "C" fn tg_metric_count() -> usize {
    N_METRICS
}

/// Catalog name of metric `i`, or null when out of range. The string is
/// owned by the library and lives for the whole process.
#[no_mangle]
pub extern "C" fn tg_metric_name(i: usize) -> *const c_char {
    static NAMES: OnceLock<Vec<CString>> = OnceLock::new();
    let names = NAMES.get_or_init(|| {
        metric_names()
            .into_iter()
            .map(|n| CString::new(n).expect("metric names hold no NUL"))
            .collect()
    });
    names.get(i).map_or(ptr::null(), |c| c.as_ptr())
}

/// Compute the metric vector of a labelled cell graph into `out`, which
/// holds `len` values (at least `tg_metric_count()`).
///
/// # Safety
/// `out` must hold `len` writable values.
#[no_mangle]
pub unsafe extern "C" fn tg_metric_vector(g: *const TgGraph, out: *mut f64, len: usize) -> TgStatus {
    guard(|| {
        let g = graph(g)?;
        if len < N_METRICS {
            return Err(fail(TgStatus::BufferTooSmall, format!("{N_METRICS} metrics, room for {len}")));
        }
        let v = metric_vector(g)?;
        slice_mut(out, N_METRICS, "out")?.copy_from_slice(&v.values);
        Ok(())
    })
}

/// Serialize a graph to JSON. Release the result with `tg_string_free`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_to_json(g: *const TgGraph, out: *mut *mut c_char) -> TgStatus {
    guard(|| {
        nonnull(out, "out")?;
        let s = serialize_graph(graph(g)?)?;
        give_string(s, out)
    })
}

/// Parse a graph from JSON.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_graph_from_json(json: *const c_char, out: *mut *mut TgGraph) -> TgStatus {
    guard(|| {
        nonnull(out, "out")?;
        let g = deserialize_graph(text(json, "json")?)?;
        *out = Box::into_raw(Box::new(TgGraph(g)));
        Ok(())
    })
}

/// Load a trained model from a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn tg_model_load(path: *const c_char, out: *mut *mut TgModel) -> TgStatus {
    guard(|| {
        nonnull(out, "out")?;
        let ck = Checkpoint::load(Path::new(text(path, "path")?))?;
        *out = Box::into_raw(Box::new(TgModel(ck.to_model()?)));
        Ok(())
    })
}

/// Release a model. Null is ignored.
///
/// # Safety
/// `m` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn tg_model_free(m: *mut TgModel) {
    if !m.is_null() {
        drop(Box::from_raw(m));
    }
}

/// Number of output classes.
///
/// # Safety
/// `m` must be a live model.
#[no_mangle]
pub unsafe extern "C" fn tg_model_n_classes(m: *const TgModel, out: *mut usize) -> TgStatus {
    guard(|| {
        nonnull(out, "out")?;
        *out = model(m)?.n_classes();
        Ok(())
    })
}

fn test_sample(m: &Model, path: &str) -> Result<RoISample, Fail> {
    let s = load_bundle(Path::new(path))?;
    let mut g = make_test_graph(&s, &m.cfg)?;
    m.prepare(&mut g)?;
    Ok(g)
}

/// Classify the RoI stored in a graph bundle written by `tmegraph build`.
/// Writes class probabilities into `probs` (`len` values, at least the
/// class count) and the predicted class into `pred`.
///
/// # Safety
/// `bundle` must be a NUL-terminated string; `probs` must hold `len`
/// writable values; `pred` may be null.
#[no_mangle]
pub unsafe extern "C" fn tg_model_classify(
    m: *const TgModel,
    bundle: *const c_char,
    probs: *mut f64,
    len: usize,
    pred: *mut usize,
) -> TgStatus {
    guard(|| {
        let m = model(m)?;
        let c = m.n_classes();
        if len < c {
            return Err(fail(TgStatus::BufferTooSmall, format!("{c} classes, room for {len}")));
        }
        let s = test_sample(m, text(bundle, "bundle")?)?;
        let p = softmax(&m.logits(&s)?);
        slice_mut(probs, c, "probs")?.copy_from_slice(&p);
        if !pred.is_null() {
            *pred = tmegraph::model::argmax(&p);
        }
        Ok(())
    })
}

/// Integrated-gradient node attributions for the predicted class, using
/// `n_points` Gauss-Legendre nodes. `node_ig` receives one value per tile
/// in bundle order (`len` values, at least the tile count); `n_tiles` the
/// tile count; `gap` the completeness gap. Outputs other than `node_ig`
/// may be null.
///
/// # Safety
/// `bundle` must be a NUL-terminated string; `node_ig` must hold `len`
/// writable values.
#[no_mangle]
pub unsafe extern "C" fn tg_model_integrated_gradients(
    m: *const TgModel,
    bundle: *const c_char,
    n_points: usize,
    node_ig: *mut f64,
    len: usize,
    n_tiles: *mut usize,
    gap: *mut f64,
) -> TgStatus {
    guard(|| {
        let m = model(m)?;
        let s = test_sample(m, text(bundle, "bundle")?)?;
        if !n_tiles.is_null() {
            *n_tiles = s.n_tiles();
        }
        if len < s.n_tiles() {
            return Err(fail(
                TgStatus::BufferTooSmall,
                format!("{} tiles, room for {len}", s.n_tiles()),
            ));
        }
        let cfg = IgConfig {
            n_points,
            ..IgConfig::default()
        };
        let a = integrated_gradients(m, &s, &cfg)?;
        slice_mut(node_ig, a.node_ig.len(), "node_ig")?.copy_from_slice(&a.node_ig);
        if !gap.is_null() {
            *gap = a.completeness_gap;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        unsafe { CStr::from_ptr(tg_last_error()) }.to_str().unwrap().to_string()
    }

    #[test]
    fn null_arguments_are_reported() {
        let mut g = ptr::null_mut();
        let st = unsafe { tg_graph_build(ptr::null(), 2, ptr::null(), 0, 1.0, &mut g) };
        assert_eq!(st, TgStatus::NullPointer);
        assert!(last_error().contains("points"));
        assert_eq!(unsafe { tg_graph_counts(ptr::null(), ptr::null_mut(), ptr::null_mut()) }, TgStatus::NullPointer);
    }

    #[test]
    fn metric_names_cover_the_catalog() {
        assert_eq!(tg_metric_count(), 68);
        assert!(tg_metric_name(68).is_null());
        let first = unsafe { CStr::from_ptr(tg_metric_name(0)) }.to_str().unwrap();
        assert_eq!(first, metric_names()[0]);
    }

    #[test]
    fn bad_label_index_is_rejected() {
        let pts = [0.0, 0.0, 1.0, 0.0];
        let mut g = ptr::null_mut();
        unsafe {
            assert_eq!(tg_graph_build(pts.as_ptr(), 2, ptr::null(), 0, 5.0, &mut g), TgStatus::Ok);
            assert_eq!(tg_graph_set_labels(g, [0u8, 9].as_ptr(), 2), TgStatus::InvalidArgument);
            assert_eq!(tg_graph_set_labels(g, [0u8].as_ptr(), 1), TgStatus::Shape);
            assert_eq!(tg_graph_set_labels(g, [0u8, 4].as_ptr(), 2), TgStatus::Ok);
            assert_eq!(last_error(), "");
            tg_graph_free(g);
        }
    }
}
