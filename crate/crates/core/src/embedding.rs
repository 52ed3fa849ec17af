//! Server-side embedding tables and their checkpoint format.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "DECKGEMB"
//! version  u32      1
//! d        u32      entity dimension
//! k        u32      relation dimension
//! L        u32      propagation layers
//! |E|      u64
//! |R|      u64
//! entity rows       |E| × d   f64
//! relation rows     |R| × k   f64
//! projections       |R| × d × k f64 (row-major per relation)
//! layer weights     L × d × d f64
//! layer biases      L × d     f64
//! ```
//!
//! A JSON sidecar at `<path>.json` stores the hyperparameters used.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Activation, Hyperparams};
use crate::error::{Error, Result};
use crate::kgstore::KnowledgeGraph;
use crate::propagation::{forward, LayerParams, PropagationGraph};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DECKGEMB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingState<T> {
    /// `|E| × d`
    pub entity: Array2<T>,
    /// `|R| × k`
    pub relation: Array2<T>,
    /// One `d × k` projection per relation.
    pub projection: Vec<Array2<T>>,
    pub layers: Vec<LayerParams<T>>,
    pub activation: Activation,
}

impl<T: Scalar> EmbeddingState<T> {
    /// Entity and relation rows uniform in `±0.5/sqrt(d)`, projections the
    /// truncated identity, layers identity with zero bias.
    pub fn init<R: Rng + ?Sized>(
        n_entities: usize,
        n_relations: usize,
        hp: &Hyperparams,
        rng: &mut R,
    ) -> Self {
        let (d, k) = (hp.dim_entity, hp.dim_relation);
        let bound = 0.5 / (d as f64).sqrt();
        let mut uniform = |n: usize, m: usize| {
            Array2::from_shape_simple_fn((n, m), || T::of(rng.random_range(-bound..=bound)))
        };
        let entity = uniform(n_entities, d);
        let relation = uniform(n_relations, k);
        let projection = (0..n_relations)
            .map(|_| Array2::from_shape_fn((d, k), |(i, j)| if i == j { T::one() } else { T::zero() }))
            .collect();
        let layers = (0..hp.layers).map(|_| LayerParams::identity(d)).collect();
        EmbeddingState {
            entity,
            relation,
            projection,
            layers,
            activation: hp.activation,
        }
    }

    pub fn dim_entity(&self) -> usize {
        self.entity.ncols()
    }

    pub fn dim_relation(&self) -> usize {
        self.relation.ncols()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_entities(&self) -> usize {
        self.entity.nrows()
    }

    pub fn n_relations(&self) -> usize {
        self.relation.nrows()
    }

    pub fn is_finite(&self) -> bool {
        self.entity.iter().all(|v| v.is_finite())
            && self.relation.iter().all(|v| v.is_finite())
            && self.projection.iter().all(|p| p.iter().all(|v| v.is_finite()))
            && self.layers.iter().all(LayerParams::is_finite)
    }

    pub fn zeros_like(&self) -> Self {
        EmbeddingState {
            entity: Array2::zeros(self.entity.raw_dim()),
            relation: Array2::zeros(self.relation.raw_dim()),
            projection: self
                .projection
                .iter()
                .map(|p| Array2::zeros(p.raw_dim()))
                .collect(),
            layers: self.layers.iter().map(LayerParams::zeros_like).collect(),
            activation: self.activation,
        }
    }

    /// `self += scale * other` for every parameter.
    pub fn scaled_add(&mut self, scale: T, other: &Self) {
        self.entity.scaled_add(scale, &other.entity);
        self.relation.scaled_add(scale, &other.relation);
        for (p, o) in self.projection.iter_mut().zip(&other.projection) {
            p.scaled_add(scale, o);
        }
        for (l, o) in self.layers.iter_mut().zip(&other.layers) {
            l.weight.scaled_add(scale, &o.weight);
            l.bias.scaled_add(scale, &o.bias);
        }
    }
}

/// Entity embeddings after `layers` propagation layers over the whole graph.
pub fn propagate<T: Scalar>(
    kg: &KnowledgeGraph,
    emb: &EmbeddingState<T>,
    layers: usize,
) -> Result<Array2<T>> {
    if layers > emb.n_layers() {
        return Err(Error::InvalidArgument(format!(
            "requested {layers} layers but the state holds {}",
            emb.n_layers()
        )));
    }
    if kg.n_entities() != emb.n_entities() {
        return Err(Error::InvalidArgument(format!(
            "graph has {} entities, embedding table {}",
            kg.n_entities(),
            emb.n_entities()
        )));
    }
    let graph = PropagationGraph::full(kg);
    Ok(forward(&graph, &emb.entity, &emb.layers[..layers], emb.activation).into_output())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    format_version: u32,
    hyperparams: Hyperparams,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    state: &EmbeddingState<T>,
    hp: &Hyperparams,
) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(40);
    header.extend_from_slice(CHECKPOINT_MAGIC);
    header.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    header.extend_from_slice(&(state.dim_entity() as u32).to_le_bytes());
    header.extend_from_slice(&(state.dim_relation() as u32).to_le_bytes());
    header.extend_from_slice(&(state.n_layers() as u32).to_le_bytes());
    header.extend_from_slice(&(state.n_entities() as u64).to_le_bytes());
    header.extend_from_slice(&(state.n_relations() as u64).to_le_bytes());
    w.write_all(&header).map_err(io)?;

    let mut put = |vals: &mut dyn Iterator<Item = &T>| -> std::io::Result<()> {
        for v in vals {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    };
    put(&mut state.entity.iter()).map_err(io)?;
    put(&mut state.relation.iter()).map_err(io)?;
    for p in &state.projection {
        put(&mut p.iter()).map_err(io)?;
    }
    for l in &state.layers {
        put(&mut l.weight.iter()).map_err(io)?;
    }
    for l in &state.layers {
        put(&mut l.bias.iter()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    let sidecar = Sidecar {
        format_version: CHECKPOINT_VERSION,
        hyperparams: hp.clone(),
    };
    let sp = sidecar_path(path);
    std::fs::write(&sp, serde_json::to_string_pretty(&sidecar)? + "\n")
        .map_err(|e| Error::io(&sp, e))
}

pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(EmbeddingState<T>, Hyperparams)> {
    let sp = sidecar_path(path);
    let sidecar: Sidecar = serde_json::from_str(
        &std::fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?,
    )?;
    let io = |e| Error::io(path, e);
    let mut r = BufReader::new(File::open(path).map_err(io)?);
    let bad = |reason: &str| Error::parse(path.display(), 0, reason);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let mut u32s = [0u32; 4];
    for v in &mut u32s {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(io)?;
        *v = u32::from_le_bytes(b);
    }
    let [version, d, k, n_layers] = u32s.map(|v| v as usize);
    if version != CHECKPOINT_VERSION as usize {
        return Err(bad("unsupported checkpoint version"));
    }
    let mut u64s = [0u64; 2];
    for v in &mut u64s {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(io)?;
        *v = u64::from_le_bytes(b);
    }
    let [n_e, n_r] = u64s.map(|v| v as usize);

    let mut take = |n: usize| -> Result<Vec<T>> {
        let mut buf = vec![0u8; n * 8];
        r.read_exact(&mut buf).map_err(io)?;
        Ok(buf
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
            .collect())
    };
    let shape = |rows, cols, v| Array2::from_shape_vec((rows, cols), v).expect("sized read");
    let entity = shape(n_e, d, take(n_e * d)?);
    let relation = shape(n_r, k, take(n_r * k)?);
    let projection = (0..n_r)
        .map(|_| Ok(shape(d, k, take(d * k)?)))
        .collect::<Result<Vec<_>>>()?;
    let weights = (0..n_layers)
        .map(|_| Ok(shape(d, d, take(d * d)?)))
        .collect::<Result<Vec<_>>>()?;
    let biases = (0..n_layers)
        .map(|_| Ok(Array1::from_vec(take(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes after checkpoint payload"));
    }
    let layers = weights
        .into_iter()
        .zip(biases)
        .map(|(weight, bias)| LayerParams { weight, bias })
        .collect();
    Ok((
        EmbeddingState {
            entity,
            relation,
            projection,
            layers,
            activation: sidecar.hyperparams.activation,
        },
        sidecar.hyperparams,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn hp() -> Hyperparams {
        Hyperparams {
            dim_entity: 4,
            dim_relation: 3,
            layers: 2,
            ..Default::default()
        }
    }

    #[test]
    fn init_shapes_and_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s: EmbeddingState<f64> = EmbeddingState::init(10, 3, &hp(), &mut rng);
        assert_eq!(s.entity.dim(), (10, 4));
        assert_eq!(s.relation.dim(), (3, 3));
        assert_eq!(s.projection.len(), 3);
        assert_eq!(s.projection[0].dim(), (4, 3));
        assert_eq!(s.projection[0][[2, 2]], 1.0);
        assert_eq!(s.projection[0][[3, 2]], 0.0);
        assert_eq!(s.layers.len(), 2);
        assert!(s.entity.iter().all(|v| v.abs() <= 0.25));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s: EmbeddingState<f64> = EmbeddingState::init(7, 2, &hp(), &mut rng);
        s.layers[1].bias[0] = -0.125;
        write_checkpoint(&path, &s, &hp()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], CHECKPOINT_MAGIC);
        assert_eq!(bytes.len(), 40 + 8 * (7 * 4 + 2 * 3 + 2 * 12 + 2 * 16 + 2 * 4));
        let (back, hp_back) = read_checkpoint::<f64>(&path).unwrap();
        assert_eq!(back, s);
        assert_eq!(hp_back, hp());
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s: EmbeddingState<f64> = EmbeddingState::init(3, 1, &hp(), &mut rng);
        write_checkpoint(&path, &s, &hp()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_checkpoint::<f64>(&path).is_err());
    }

    #[test]
    fn propagate_rejects_excess_layers() {
        let kg = KnowledgeGraph::new(3, 1, vec![]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s: EmbeddingState<f64> = EmbeddingState::init(3, 1, &hp(), &mut rng);
        assert!(propagate(&kg, &s, 3).is_err());
        assert_eq!(propagate(&kg, &s, 0).unwrap(), s.entity);
    }
}
