use std::io::{Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, RopeTable};
use crate::error::{Error, Result};
use crate::Scalar;

const MAGIC: &[u8; 4] = b"SMDM";

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<F> {
    pub attn_norm: Array1<F>,
    pub wq: Array2<F>,
    pub wk: Array2<F>,
    pub wv: Array2<F>,
    pub wo: Array2<F>,
    pub mlp_norm: Array1<F>,
    pub w_in: Array2<F>,
    pub w_out: Array2<F>,
}

/// All trainable tensors. Matrices multiply row vectors from the right (`x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct Params<F> {
    /// `vocab.total() x d_model`; rows `0..vocab.size` double as the output head.
    pub tok_emb: Array2<F>,
    /// `max_position x d_model`.
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub final_norm: Array1<F>,
}

impl<F: Scalar> Params<F> {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let layer = LayerParams {
            attn_norm: Array1::zeros(d),
            wq: Array2::zeros((d, d)),
            wk: Array2::zeros((d, d)),
            wv: Array2::zeros((d, d)),
            wo: Array2::zeros((d, d)),
            mlp_norm: Array1::zeros(d),
            w_in: Array2::zeros((d, cfg.d_ff)),
            w_out: Array2::zeros((cfg.d_ff, d)),
        };
        Self {
            tok_emb: Array2::zeros((cfg.vocab.total(), d)),
            pos_emb: Array2::zeros((cfg.max_position, d)),
            layers: vec![layer; cfg.n_layers],
            final_norm: Array1::zeros(d),
        }
    }

    /// Tensor names and shapes in storage order.
    pub fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.visit().into_iter().map(|(name, _, shape)| (name, shape)).collect()
    }

    fn visit(&self) -> Vec<(String, &[F], Vec<usize>)> {
        fn m<F>(a: &Array2<F>) -> (&[F], Vec<usize>) {
            (a.as_slice().expect("standard layout"), a.shape().to_vec())
        }
        fn v<F>(a: &Array1<F>) -> (&[F], Vec<usize>) {
            (a.as_slice().expect("standard layout"), a.shape().to_vec())
        }
        let mut out: Vec<(String, &[F], Vec<usize>)> = Vec::new();
        fn push<'a, F>(out: &mut Vec<(String, &'a [F], Vec<usize>)>, name: String, (data, shape): (&'a [F], Vec<usize>)) {
            out.push((name, data, shape));
        }
        push(&mut out, "tok_emb".into(), m(&self.tok_emb));
        push(&mut out, "pos_emb".into(), m(&self.pos_emb));
        for (i, l) in self.layers.iter().enumerate() {
            push(&mut out, format!("layers.{i}.attn_norm"), v(&l.attn_norm));
            push(&mut out, format!("layers.{i}.wq"), m(&l.wq));
            push(&mut out, format!("layers.{i}.wk"), m(&l.wk));
            push(&mut out, format!("layers.{i}.wv"), m(&l.wv));
            push(&mut out, format!("layers.{i}.wo"), m(&l.wo));
            push(&mut out, format!("layers.{i}.mlp_norm"), v(&l.mlp_norm));
            push(&mut out, format!("layers.{i}.w_in"), m(&l.w_in));
            push(&mut out, format!("layers.{i}.w_out"), m(&l.w_out));
        }
        push(&mut out, "final_norm".into(), v(&self.final_norm));
        out
    }

    /// Mutable views of every tensor, in the same order as [`Params::slices`].
    pub fn slices_mut(&mut self) -> Vec<&mut [F]> {
        let mut out: Vec<&mut [F]> = vec![
            self.tok_emb.as_slice_mut().expect("standard layout"),
            self.pos_emb.as_slice_mut().expect("standard layout"),
        ];
        for l in self.layers.iter_mut() {
            let LayerParams { attn_norm, wq, wk, wv, wo, mlp_norm, w_in, w_out } = l;
            out.push(attn_norm.as_slice_mut().expect("standard layout"));
            for w in [wq, wk, wv, wo] {
                out.push(w.as_slice_mut().expect("standard layout"));
            }
            out.push(mlp_norm.as_slice_mut().expect("standard layout"));
            out.push(w_in.as_slice_mut().expect("standard layout"));
            out.push(w_out.as_slice_mut().expect("standard layout"));
        }
        out.push(self.final_norm.as_slice_mut().expect("standard layout"));
        out
    }

    pub fn slices(&self) -> Vec<&[F]> {
        self.visit().into_iter().map(|(_, data, _)| data).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> Params<G> {
        let c2 = |a: &Array2<F>| a.mapv(|x| G::of(x.as_f64()));
        let c1 = |a: &Array1<F>| a.mapv(|x| G::of(x.as_f64()));
        Params {
            tok_emb: c2(&self.tok_emb),
            pos_emb: c2(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c1(&l.attn_norm),
                    wq: c2(&l.wq),
                    wk: c2(&l.wk),
                    wv: c2(&l.wv),
                    wo: c2(&l.wo),
                    mlp_norm: c1(&l.mlp_norm),
                    w_in: c2(&l.w_in),
                    w_out: c2(&l.w_out),
                })
                .collect(),
            final_norm: c1(&self.final_norm),
        }
    }

    /// Squared L2 norm over all tensors.
    pub fn norm_sq(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x.as_f64().powi(2)).sum()
    }
}

/// Parameters plus the derived rotary table. Immutable once built; the only
/// interior state is a token counter used for instrumentation.
#[derive(Debug)]
pub struct Model<F> {
    pub(super) cfg: ModelConfig,
    pub(super) params: Params<F>,
    pub(super) rope: RopeTable<F>,
    token_forwards: AtomicU64,
}

impl<F: Scalar> Clone for Model<F> {
    fn clone(&self) -> Self {
        Self::from_params(self.cfg.clone(), self.params.clone()).expect("cloned model was valid")
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    tensors: Vec<TensorHeader>,
}

#[derive(Serialize, Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

impl<F: Scalar> Model<F> {
    /// Deterministic initialization from `cfg.seed`. Values are drawn in f64
    /// and cast, so f32 and f64 models built from one config agree.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = Params::<F>::zeros(cfg);
        let embed_bound = 0.1 * 3f64.sqrt();
        let mut fill = |a: &mut Array2<F>, bound: f64| {
            a.mapv_inplace(|_| F::of(rng.gen_range(-bound..bound)));
        };
        fill(&mut params.tok_emb, embed_bound);
        fill(&mut params.pos_emb, embed_bound);
        let d = cfg.d_model as f64;
        for l in params.layers.iter_mut() {
            l.attn_norm.fill(F::one());
            l.mlp_norm.fill(F::one());
            for w in [&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo] {
                fill(w, 1.0 / d.sqrt());
            }
            fill(&mut l.w_in, 1.0 / d.sqrt());
            fill(&mut l.w_out, 1.0 / (cfg.d_ff as f64).sqrt());
        }
        params.final_norm.fill(F::one());
        Self::from_params(cfg.clone(), params)
    }

    pub fn from_params(cfg: ModelConfig, params: Params<F>) -> Result<Self> {
        cfg.validate()?;
        let expected = Params::<F>::zeros(&cfg).shapes();
        if params.shapes() != expected {
            return Err(Error::DimensionMismatch("parameter shapes do not match the config".into()));
        }
        let rope = RopeTable::new(&cfg);
        Ok(Self { cfg, params, rope, token_forwards: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<F> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<F> {
        &mut self.params
    }

    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model::from_params(self.cfg.clone(), self.params.cast()).expect("same config")
    }

    /// Total number of token rows pushed through a forward pass so far.
    pub fn token_forwards(&self) -> u64 {
        self.token_forwards.load(Ordering::Relaxed)
    }

    pub(super) fn count_tokens(&self, n: usize) {
        self.token_forwards.fetch_add(n as u64, Ordering::Relaxed);
    }

    /// SHA-256 over the little-endian f64 image of every parameter.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for s in self.params.slices() {
            for x in s {
                h.update(x.as_f64().to_le_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// Checkpoint layout: `SMDM`, u32 LE header length, JSON header with the
    /// config and tensor shapes, then every tensor as little-endian f32.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let header = Header {
            config: self.cfg.clone(),
            tensors: self
                .params
                .shapes()
                .into_iter()
                .map(|(name, shape)| TensorHeader { name, shape })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        out.write_all(MAGIC)?;
        out.write_all(&(json.len() as u32).to_le_bytes())?;
        out.write_all(&json)?;
        for s in self.params.slices() {
            for x in s {
                out.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut json)?;
        let header: Header = serde_json::from_slice(&json)?;
        header.config.validate()?;
        let mut params = Params::<F>::zeros(&header.config);
        let stored: Vec<(String, Vec<usize>)> = header.tensors.into_iter().map(|t| (t.name, t.shape)).collect();
        if stored != params.shapes() {
            return Err(Error::Checkpoint("tensor table does not match the config".into()));
        }
        let mut buf = [0u8; 4];
        for s in params.slices_mut() {
            for x in s.iter_mut() {
                input.read_exact(&mut buf)?;
                *x = F::of(f32::from_le_bytes(buf) as f64);
            }
        }
        Self::from_params(header.config, params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::Vocabulary;

    fn cfg() -> ModelConfig {
        ModelConfig::new(Vocabulary::new(6).unwrap(), 8, 2, 2, 16, 32).with_seed(7)
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f32>::init(&cfg()).unwrap();
        let b = Model::<f32>::init(&cfg()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.params(), b.params());
        assert_eq!(a.config().d_head(), 4);
    }

    #[test]
    fn seed_changes_parameters() {
        let a = Model::<f32>::init(&cfg()).unwrap();
        for seed in [8, 9, 1000] {
            let b = Model::<f32>::init(&cfg().with_seed(seed)).unwrap();
            assert_ne!(a.checksum(), b.checksum());
        }
    }

    #[test]
    fn invalid_dimensions() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(Model::<f32>::init(&c).is_err());
        let mut c = cfg();
        c.d_model = 6;
        c.n_heads = 2;
        assert!(Model::<f32>::init(&c).is_err(), "odd head dimension");
        let mut c = cfg();
        c.n_layers = 0;
        assert!(Model::<f32>::init(&c).is_err());
    }

    #[test]
    fn precisions_share_initial_values() {
        let a = Model::<f32>::init(&cfg()).unwrap();
        let b = Model::<f64>::init(&cfg()).unwrap();
        assert_eq!(a.checksum(), b.cast::<f32>().checksum());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let a = Model::<f32>::init(&cfg()).unwrap();
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SMDM");
        let b = Model::<f32>::read_from(buf.as_slice()).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.config(), b.config());

        buf[0] = b'X';
        assert!(Model::<f32>::read_from(buf.as_slice()).is_err());
    }
}
