//! Embedding network: an MLP feature extractor followed by a linear
//! classifier head, plus frozen snapshots and head extension for
//! class-incremental training.
//!
//! Parameters live in plain vectors. A forward pass either runs on constant
//! tensors (inference) or on fresh gradient leaves obtained from
//! [`EmbeddingNet::trainable`].

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"INCR";
const FORMAT_VERSION: u32 = 1;

/// Standard deviation of freshly added classifier units.
pub const NEW_HEAD_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Param {
    fn group_of(name: &str) -> Option<ParamGroup> {
        if name.starts_with("extractor.") {
            Some(ParamGroup::Extractor)
        } else if name.starts_with("head.") {
            Some(ParamGroup::Head)
        } else {
            None
        }
    }
}

/// Layer widths of an [`EmbeddingNet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_dim: usize,
    /// Hidden widths of the extractor, each followed by a ReLU.
    pub hidden: Vec<usize>,
    /// Width of the retrieval feature. 512 in the full-scale setup.
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl NetConfig {
    /// `in_dim → 64 → 64 → 32`.
    pub fn desk(in_dim: usize, num_classes: usize) -> NetConfig {
        NetConfig {
            in_dim,
            hidden: vec![64, 64],
            feature_dim: 32,
            num_classes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingNet {
    params: Vec<Param>,
}

fn gaussian(rng: &mut impl Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..n).map(|_| normal.sample(rng)).collect()
}

impl EmbeddingNet {
    /// Fresh network with scaled-Gaussian weights and zero biases.
    pub fn new(config: &NetConfig, rng: &mut impl Rng) -> Result<EmbeddingNet> {
        if config.in_dim == 0 || config.feature_dim == 0 || config.num_classes == 0 {
            return Err(Error::Contract(format!("degenerate network config {config:?}")));
        }
        if config.hidden.contains(&0) {
            return Err(Error::Contract("hidden widths must be positive".into()));
        }
        let mut widths = vec![config.in_dim];
        widths.extend(&config.hidden);
        widths.push(config.feature_dim);
        let mut params = Vec::new();
        let last = widths.len() - 2;
        for (i, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            // ReLU layers get the He gain; the linear feature layer does not.
            let gain = if i < last { 2.0 } else { 1.0 };
            params.push(Param {
                name: format!("extractor.{i}.weight"),
                group: ParamGroup::Extractor,
                shape: vec![fan_in, fan_out],
                values: gaussian(rng, fan_in * fan_out, (gain / fan_in as f64).sqrt()),
            });
            params.push(Param {
                name: format!("extractor.{i}.bias"),
                group: ParamGroup::Extractor,
                shape: vec![1, fan_out],
                values: vec![0.0; fan_out],
            });
        }
        let d = config.feature_dim;
        params.push(Param {
            name: "head.weight".into(),
            group: ParamGroup::Head,
            shape: vec![d, config.num_classes],
            values: gaussian(rng, d * config.num_classes, (1.0 / d as f64).sqrt()),
        });
        params.push(Param {
            name: "head.bias".into(),
            group: ParamGroup::Head,
            shape: vec![1, config.num_classes],
            values: vec![0.0; config.num_classes],
        });
        Ok(EmbeddingNet { params })
    }

    /// Rebuilds a network from named parameters, validating the layout.
    pub fn from_params(params: Vec<Param>) -> Result<EmbeddingNet> {
        let bad = |msg: String| Err(Error::Contract(format!("invalid parameter layout: {msg}")));
        if params.len() < 4 || !params.len().is_multiple_of(2) {
            return bad(format!("expected an even count ≥ 4, got {}", params.len()));
        }
        let layers = params.len() / 2 - 1;
        let mut width = None;
        for (i, pair) in params.chunks(2).enumerate() {
            let prefix = if i < layers {
                format!("extractor.{i}")
            } else {
                "head".to_string()
            };
            let (w, b) = (&pair[0], &pair[1]);
            if w.name != format!("{prefix}.weight") || b.name != format!("{prefix}.bias") {
                return bad(format!("unexpected names {} / {}", w.name, b.name));
            }
            if w.shape.len() != 2 || b.shape != [1, w.shape[1]] {
                return bad(format!("{} has shape {:?}, bias {:?}", w.name, w.shape, b.shape));
            }
            if width.is_some_and(|prev| prev != w.shape[0]) {
                return bad(format!("{} input width does not chain", w.name));
            }
            for p in pair {
                if p.values.len() != p.shape.iter().product::<usize>() {
                    return bad(format!("{} value count mismatch", p.name));
                }
            }
            width = Some(w.shape[1]);
        }
        let params = params
            .into_iter()
            .map(|mut p| {
                p.group = Param::group_of(&p.name).expect("validated name");
                p
            })
            .collect();
        Ok(EmbeddingNet { params })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn in_dim(&self) -> usize {
        self.params[0].shape[0]
    }

    pub fn feature_dim(&self) -> usize {
        self.head_weight().shape[0]
    }

    pub fn num_classes(&self) -> usize {
        self.head_weight().shape[1]
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.values.len()).sum()
    }

    fn head_weight(&self) -> &Param {
        &self.params[self.params.len() - 2]
    }

    /// Inference forward pass; the outputs carry no gradient graph.
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        let consts = self
            .params
            .iter()
            .map(|p| Tensor::new(&p.shape, p.values.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        run_layers(&consts, batch)
    }

    /// Gradient leaves for every parameter, in [`EmbeddingNet::params`] order.
    pub fn trainable(&self) -> Result<Trainable> {
        let leaves = self
            .params
            .iter()
            .map(|p| Tensor::param(&p.shape, p.values.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Ok(Trainable { leaves })
    }

    /// Copy of this network with `m_new` additional classifier outputs. The
    /// existing outputs keep their exact weights; new weights are drawn from
    /// N(0, 0.01²) with zero bias.
    pub fn extend_classifier(&self, m_new: usize, rng: &mut impl Rng) -> Result<EmbeddingNet> {
        if m_new == 0 {
            return Err(Error::Contract(
                "classifier extension needs at least one new class".into(),
            ));
        }
        let mut out = self.clone();
        let n = self.num_classes();
        let d = self.feature_dim();
        let fresh = gaussian(rng, d * m_new, NEW_HEAD_STD);
        let len = out.params.len();
        let weight = &mut out.params[len - 2];
        let mut values = Vec::with_capacity(d * (n + m_new));
        for (row, new_row) in weight.values.chunks(n).zip(fresh.chunks(m_new)) {
            values.extend_from_slice(row);
            values.extend_from_slice(new_row);
        }
        weight.values = values;
        weight.shape = vec![d, n + m_new];
        let bias = &mut out.params[len - 1];
        bias.values.resize(n + m_new, 0.0);
        bias.shape = vec![1, n + m_new];
        Ok(out)
    }

    /// Immutable copy for use as the frozen teacher.
    pub fn snapshot(&self) -> FrozenSnapshot {
        FrozenSnapshot {
            net: Arc::new(self.clone()),
        }
    }

    /// Euclidean distance between the flattened parameters of two networks
    /// of identical layout.
    pub fn parameter_distance(&self, other: &EmbeddingNet) -> Result<f64> {
        if self.params.len() != other.params.len()
            || self.params.iter().zip(&other.params).any(|(a, b)| a.shape != b.shape)
        {
            return Err(Error::Contract("parameter layouts differ".into()));
        }
        let sq: f64 = self
            .params
            .iter()
            .zip(&other.params)
            .flat_map(|(a, b)| a.values.iter().zip(&b.values))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        Ok(sq.sqrt())
    }

    /// Writes the parameters in the `INCR` binary format.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            buf.extend_from_slice(p.name.as_bytes());
            buf.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
            for &dim in &p.shape {
                buf.extend_from_slice(&(dim as u64).to_le_bytes());
            }
            for v in &p.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::File::create(path)
            .and_then(|mut f| f.write_all(&buf))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EmbeddingNet> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let format_err = |message: String| Error::Format {
            path: path.to_path_buf(),
            message,
        };
        let mut r = ByteReader { bytes: &bytes, pos: 0 };
        if r.take(4).map_err(&format_err)? != MAGIC {
            return Err(format_err("bad magic".into()));
        }
        let version = r.u32().map_err(&format_err)?;
        if version != FORMAT_VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let count = r.u32().map_err(&format_err)? as usize;
        let mut params = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32().map_err(&format_err)? as usize;
            let name = String::from_utf8(r.take(name_len).map_err(&format_err)?.to_vec())
                .map_err(|_| format_err("parameter name is not UTF-8".into()))?;
            let group = Param::group_of(&name).ok_or_else(|| format_err(format!("unknown parameter `{name}`")))?;
            let rank = r.u32().map_err(&format_err)? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&format_err)?;
            let n: usize = shape.iter().product();
            let values = (0..n)
                .map(|_| r.f64())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(&format_err)?;
            params.push(Param {
                name,
                group,
                shape,
                values,
            });
        }
        if r.pos != bytes.len() {
            return Err(format_err("trailing bytes".into()));
        }
        EmbeddingNet::from_params(params).map_err(|e| format_err(e.to_string()))
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("unexpected end of file at byte {}", self.pos)),
        }
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// `[weight, bias]*` layers; ReLU between extractor layers, none after the
/// feature layer or the head.
/// Forward pass of `net`'s architecture using caller-supplied parameter
/// tensors, e.g. perturbed copies for gradient checks.
pub fn forward_with(net: &EmbeddingNet, params: &[Tensor], batch: &Tensor) -> Result<(Tensor, Tensor)> {
    if params.len() != net.params.len()
        || params
            .iter()
            .zip(&net.params)
            .any(|(t, p)| t.shape() != p.shape.as_slice())
    {
        return Err(Error::Contract(
            "parameter tensors do not match the network layout".into(),
        ));
    }
    run_layers(params, batch)
}

fn run_layers(params: &[Tensor], batch: &Tensor) -> Result<(Tensor, Tensor)> {
    let rows = batch.shape().first().copied().unwrap_or(0);
    let ones = Tensor::full(&[rows.max(1), 1], 1.0)?;
    let affine = |x: &Tensor, w: &Tensor, b: &Tensor| -> Result<Tensor> { Ok(x.matmul(w)?.add(&ones.matmul(b)?)?) };
    let layers = params.len() / 2 - 1;
    let mut h = batch.clone();
    for i in 0..layers {
        h = affine(&h, &params[2 * i], &params[2 * i + 1])?;
        if i + 1 < layers {
            h = h.relu();
        }
    }
    let logits = affine(&h, &params[2 * layers], &params[2 * layers + 1])?;
    Ok((h, logits))
}

/// Gradient leaves of one training step.
pub struct Trainable {
    leaves: Vec<Tensor>,
}

impl Trainable {
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        run_layers(&self.leaves, batch)
    }

    pub fn leaves(&self) -> &[Tensor] {
        &self.leaves
    }

    /// Accumulated gradients, zero-filled for parameters the loss did not reach.
    pub fn grads(&self) -> Vec<Vec<f64>> {
        self.leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| vec![0.0; l.numel()]))
            .collect()
    }
}

/// Inference-only copy of a trained network. Cheap to clone and safe to
/// share between threads.
#[derive(Debug, Clone)]
pub struct FrozenSnapshot {
    net: Arc<EmbeddingNet>,
}

impl FrozenSnapshot {
    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Tensor)> {
        self.net.forward(batch)
    }

    pub fn net(&self) -> &EmbeddingNet {
        &self.net
    }

    pub fn num_classes(&self) -> usize {
        self.net.num_classes()
    }

    /// A trainable copy of the frozen parameters.
    pub fn thaw(&self) -> EmbeddingNet {
        (*self.net).clone()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn net(seed: u64, classes: usize) -> EmbeddingNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        EmbeddingNet::new(&NetConfig::desk(6, classes), &mut rng).unwrap()
    }

    fn batch(seed: u64, rows: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(&[rows, 6], gaussian(&mut rng, rows * 6, 1.0)).unwrap()
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn output_shapes_and_width_check() {
        let n = net(1, 5);
        let (f, l) = n.forward(&batch(2, 7)).unwrap();
        assert_eq!(f.shape(), &[7, 32]);
        assert_eq!(l.shape(), &[7, 5]);
        let wrong = Tensor::zeros(&[3, 4]).unwrap();
        assert!(matches!(
            n.forward(&wrong),
            Err(Error::Tensor(crate::autodiff::TensorError::Shape { .. }))
        ));
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut n = net(1, 4);
        let len = n.params.len();
        for p in &mut n.params_mut()[len - 2..] {
            p.values.iter_mut().for_each(|v| *v = 0.0);
        }
        let (_, logits) = n.forward(&batch(3, 5)).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_row_forward_matches_batch_row() {
        let n = net(4, 3);
        let b = batch(5, 6);
        let (_, all) = n.forward(&b).unwrap();
        for r in 0..6 {
            let row = Tensor::new(&[1, 6], b.data()[r * 6..(r + 1) * 6].to_vec()).unwrap();
            let (_, one) = n.forward(&row).unwrap();
            assert_eq!(
                bits(&one),
                all.data()[r * 3..(r + 1) * 3]
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn snapshot_matches_net_bit_for_bit() {
        let n = net(6, 4);
        let snap = n.snapshot();
        for s in 0..10 {
            let b = batch(100 + s, 5);
            let (fa, la) = n.forward(&b).unwrap();
            let (fb, lb) = snap.forward(&b).unwrap();
            assert_eq!(bits(&fa), bits(&fb));
            assert_eq!(bits(&la), bits(&lb));
            assert!(!lb.has_graph());
        }
        assert_eq!(snap.thaw().snapshot().net(), snap.net());
    }

    #[test]
    fn snapshot_is_isolated_from_later_training() {
        let mut n = net(7, 3);
        let snap = n.snapshot();
        let before = snap.net().clone();
        n.params_mut()[0].values[0] += 1.0;
        assert_eq!(snap.net(), &before);
        assert!(n.parameter_distance(snap.net()).unwrap() > 0.0);
    }

    #[test]
    fn extension_preserves_old_logits_exactly() {
        let n = net(8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        assert!(n.extend_classifier(0, &mut rng).is_err());
        for m in [1, 3] {
            let e = n.extend_classifier(m, &mut rng).unwrap();
            assert_eq!(e.num_classes(), 4 + m);
            assert_eq!(e.param_count(), n.param_count() + m * (n.feature_dim() + 1));
            for s in 0..5 {
                let b = batch(200 + s, 4);
                let (fo, lo) = n.forward(&b).unwrap();
                let (fe, le) = e.forward(&b).unwrap();
                assert_eq!(bits(&fo), bits(&fe));
                assert_eq!(bits(&lo), bits(&le.narrow_cols(0, 4).unwrap()));
            }
            // Extractor untouched.
            let k = e.params().len() - 2;
            assert_eq!(&e.params()[..k], &n.params()[..k]);
        }
    }

    #[test]
    fn extension_to_paper_head_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = NetConfig {
            in_dim: 8,
            hidden: vec![16],
            feature_dim: 512,
            num_classes: 100,
        };
        let a = EmbeddingNet::new(&cfg, &mut rng).unwrap();
        let b = a.extend_classifier(100, &mut rng).unwrap();
        let head = &b.params()[b.params().len() - 2];
        assert_eq!(head.shape, vec![512, 200]);
        assert_eq!(b.num_classes(), 200);
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        let n = net(10, 6);
        n.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(&bytes[..4], b"INCR");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 8);
        let back = EmbeddingNet::load(&path).unwrap();
        assert_eq!(back, n);
        assert!(back
            .params()
            .iter()
            .flat_map(|p| &p.values)
            .zip(n.params().iter().flat_map(|p| &p.values))
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn load_rejects_truncated_or_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.bin");
        net(11, 2).save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(EmbeddingNet::load(&path), Err(Error::Format { .. })));
        fs::write(&path, b"NOPE\x01\0\0\0").unwrap();
        assert!(matches!(EmbeddingNet::load(&path), Err(Error::Format { .. })));
        assert!(matches!(
            EmbeddingNet::load(&dir.path().join("missing.bin")),
            Err(Error::Io { .. })
        ));
    }
}
