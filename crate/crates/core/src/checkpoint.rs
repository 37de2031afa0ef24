//! Binary checkpoint container.
//!
//! Layout (little-endian): `DECORCKPT`, `u32` version, `u64` header length,
//! JSON header, `u32` section count, then per section a length-prefixed name
//! and its parameters. Each parameter is a length-prefixed name, a `u8`
//! frozen flag, `u32` rank, `u64` dims and `f32` values in row-major order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::decor_embedding::Vocab;
use crate::error::{Error, Result};
use crate::numerics::optim::AdamW;
use crate::numerics::{ParamId, ParamStore, Tensor};
use crate::recommender::{RecommenderModel, TrainProgress, TrainState};
use crate::semantic_indexer::RqVaeModel;

pub const MAGIC: &[u8; 9] = b"DECORCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    Tokenizer,
    Recommender,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: CheckpointKind,
    pub config: PipelineConfig,
    /// Recommender token layout.
    pub vocab: Option<Vocab>,
    /// Recommender training position, for resuming.
    pub progress: Option<TrainProgress>,
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: Header,
    pub sections: Vec<(String, ParamStore<f32>)>,
}

const MODEL: &str = "model";
const BEST: &str = "best";
const ADAM_M: &str = "adam.m";
const ADAM_V: &str = "adam.v";

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&ParamStore<f32>> {
        self.sections.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    fn take(&mut self, name: &str) -> Result<ParamStore<f32>> {
        let i = self
            .sections
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing section {name}")))?;
        Ok(self.sections.remove(i).1)
    }

    fn expect(&self, kind: CheckpointKind) -> Result<()> {
        if self.header.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind:?} checkpoint, found {:?}",
                self.header.kind
            )));
        }
        Ok(())
    }

    pub fn tokenizer(config: &PipelineConfig, model: &RqVaeModel<f32>) -> Self {
        Checkpoint {
            header: Header {
                kind: CheckpointKind::Tokenizer,
                config: config.clone(),
                vocab: None,
                progress: None,
                optimizer_step: None,
            },
            sections: vec![(MODEL.into(), model.store.clone())],
        }
    }

    pub fn into_tokenizer(mut self) -> Result<(PipelineConfig, RqVaeModel<f32>)> {
        self.expect(CheckpointKind::Tokenizer)?;
        let store = self.take(MODEL)?;
        let model = RqVaeModel::from_store(self.header.config.tokenizer.clone(), store)?;
        Ok((self.header.config, model))
    }

    /// Recommender parameters plus, when given, the training state needed to
    /// resume.
    pub fn recommender(
        config: &PipelineConfig,
        model: &RecommenderModel<f32>,
        state: Option<&TrainState<f32>>,
    ) -> Self {
        let mut sections = vec![(MODEL.to_string(), model.store.clone())];
        let mut header = Header {
            kind: CheckpointKind::Recommender,
            config: config.clone(),
            vocab: Some(model.vocab),
            progress: None,
            optimizer_step: None,
        };
        if let Some(state) = state {
            header.progress = Some(state.progress.clone());
            header.optimizer_step = Some(state.optimizer.step);
            if let Some(best) = &state.best {
                sections.push((BEST.into(), best.clone()));
            }
            let (mut m_store, mut v_store) = (ParamStore::new(), ParamStore::new());
            for ((_, p), (m, v)) in model.store.iter().zip(state.optimizer.moments()) {
                let shape = p.tensor.shape().to_vec();
                m_store.add(
                    p.name.clone(),
                    Tensor::new(shape.clone(), m.to_vec()).expect("moment shape"),
                );
                v_store.add(p.name.clone(), Tensor::new(shape, v.to_vec()).expect("moment shape"));
            }
            sections.push((ADAM_M.into(), m_store));
            sections.push((ADAM_V.into(), v_store));
        }
        Checkpoint { header, sections }
    }

    pub fn into_recommender(mut self) -> Result<(PipelineConfig, RecommenderModel<f32>, Option<TrainState<f32>>)> {
        self.expect(CheckpointKind::Recommender)?;
        let vocab = self
            .header
            .vocab
            .ok_or_else(|| Error::Checkpoint("missing vocabulary".into()))?;
        let config = self.header.config.clone();
        let store = self.take(MODEL)?;
        let model = RecommenderModel::bind(config.recommender.clone(), config.decor.clone(), vocab, store)?;
        let state = match self.header.progress.take() {
            None => None,
            Some(progress) => {
                let mut optimizer = AdamW::new(
                    crate::numerics::optim::AdamWConfig {
                        weight_decay: config.recommender.weight_decay,
                        ..Default::default()
                    },
                    &model.store,
                );
                optimizer.step = self.header.optimizer_step.unwrap_or(0);
                let (m, v) = (self.take(ADAM_M)?, self.take(ADAM_V)?);
                for (i, (_, p)) in model.store.iter().enumerate() {
                    let mt = m.by_name(&p.name)?.tensor.clone();
                    let vt = v.by_name(&p.name)?.tensor.clone();
                    if mt.shape() != p.tensor.shape() || vt.shape() != p.tensor.shape() {
                        return Err(Error::Checkpoint(format!("moment shape for {}", p.name)));
                    }
                    optimizer.set_moments(ParamId(i), mt, vt);
                }
                let best = self.take(BEST).ok();
                Some(TrainState {
                    progress,
                    optimizer,
                    best,
                })
            }
        };
        Ok((config, model, state))
    }

    pub fn write_to<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&self.header)?;
        out.write_all(&(header.len() as u64).to_le_bytes())?;
        out.write_all(&header)?;
        out.write_all(&(self.sections.len() as u32).to_le_bytes())?;
        for (name, store) in &self.sections {
            write_str(out, name)?;
            out.write_all(&(store.len() as u32).to_le_bytes())?;
            for (_, p) in store.iter() {
                write_str(out, &p.name)?;
                out.write_all(&[p.frozen as u8])?;
                out.write_all(&(p.tensor.shape().len() as u32).to_le_bytes())?;
                for &d in p.tensor.shape() {
                    out.write_all(&(d as u64).to_le_bytes())?;
                }
                let mut bytes = Vec::with_capacity(p.tensor.len() * 4);
                for x in p.tensor.data() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
                out.write_all(&bytes)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 9];
        input.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(input)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let len = read_u64(input)? as usize;
        let header: Header = serde_json::from_slice(&read_bytes(input, len)?)?;
        let n_sections = read_u32(input)?;
        let mut sections = Vec::with_capacity(n_sections as usize);
        for _ in 0..n_sections {
            let name = read_str(input)?;
            let count = read_u32(input)?;
            let mut store = ParamStore::new();
            for _ in 0..count {
                let pname = read_str(input)?;
                let mut flag = [0u8; 1];
                input.read_exact(&mut flag)?;
                let rank = read_u32(input)? as usize;
                let shape = (0..rank)
                    .map(|_| read_u64(input).map(|d| d as usize))
                    .collect::<Result<Vec<_>>>()?;
                let n: usize = shape.iter().product();
                let raw = read_bytes(input, n * 4)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                if store.id(&pname).is_some() {
                    return Err(Error::Checkpoint(format!("duplicate parameter {pname}")));
                }
                let id = store.add(pname, Tensor::new(shape, data)?);
                store.set_frozen(id, flag[0] != 0);
            }
            sections.push((name, store));
        }
        Ok(Checkpoint { header, sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(&mut bytes.as_slice())
    }
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    out.write_all(&(s.len() as u32).to_le_bytes())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

fn read_bytes<R: Read>(input: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    input.take(n as u64).read_to_end(&mut buf)?;
    if buf.len() != n {
        return Err(Error::Checkpoint("truncated file".into()));
    }
    Ok(buf)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let b = read_bytes(input, 4)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn read_u64<R: Read>(input: &mut R) -> Result<u64> {
    let b = read_bytes(input, 8)?;
    Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
}

fn read_str<R: Read>(input: &mut R) -> Result<String> {
    let n = read_u32(input)? as usize;
    String::from_utf8(read_bytes(input, n)?).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::decor_embedding::DecorConfig;
    use crate::recommender::tests::model;
    use crate::semantic_indexer::RqVaeConfig;

    fn same_store(a: &ParamStore<f32>, b: &ParamStore<f32>) {
        assert_eq!(a.len(), b.len());
        for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.frozen, q.frozen);
            assert_eq!(p.tensor.shape(), q.tensor.shape());
            let bits = |t: &Tensor<f32>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&p.tensor), bits(&q.tensor));
        }
    }

    fn round_trip(c: &Checkpoint) -> Checkpoint {
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_to(&mut again).unwrap();
        assert_eq!(buf, again);
        back
    }

    #[test]
    fn tokenizer_round_trip_is_bitwise() {
        let cfg = RqVaeConfig {
            input_dim: 12,
            latent_dim: 8,
            codebook_size: 5,
            encoder_hidden: vec![10],
            ..RqVaeConfig::default()
        };
        let m = RqVaeModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let pc = PipelineConfig {
            tokenizer: cfg,
            ..PipelineConfig::default()
        };
        let (pc2, m2) = round_trip(&Checkpoint::tokenizer(&pc, &m)).into_tokenizer().unwrap();
        assert_eq!(pc2, pc);
        same_store(&m.store, &m2.store);
    }

    #[test]
    fn recommender_round_trip_keeps_state() {
        let m: crate::recommender::RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 2);
        let pc = PipelineConfig {
            recommender: m.config.clone(),
            ..PipelineConfig::default()
        };
        let mut optimizer = AdamW::new(Default::default(), &m.store);
        optimizer.step = 7;
        for (i, (_, p)) in m.store.iter().enumerate() {
            let n = p.tensor.len();
            let t = |s: f32| Tensor::new(p.tensor.shape().to_vec(), (0..n).map(|k| s * k as f32).collect()).unwrap();
            optimizer.set_moments(ParamId(i), t(0.5), t(0.25));
        }
        let rng = ChaCha8Rng::seed_from_u64(3);
        let state = TrainState {
            progress: TrainProgress {
                epochs_done: 2,
                step: 9,
                total_steps: 40,
                warmup_steps: 2,
                best_epoch: Some(1),
                best_val_ndcg10: Some(0.125),
                bad_epochs: 1,
                finished: false,
                log: Vec::new(),
                rng: crate::recommender::RngState::capture(&rng),
            },
            optimizer,
            best: Some(m.store.clone()),
        };
        let c = round_trip(&Checkpoint::recommender(&pc, &m, Some(&state)));
        let (_, m2, s2) = c.into_recommender().unwrap();
        same_store(&m.store, &m2.store);
        let s2 = s2.unwrap();
        assert_eq!(s2.progress, state.progress);
        assert_eq!(s2.optimizer.step, 7);
        for (a, b) in state.optimizer.moments().zip(s2.optimizer.moments()) {
            assert_eq!(a, b);
        }
        same_store(state.best.as_ref().unwrap(), s2.best.as_ref().unwrap());
    }

    #[test]
    fn rejects_garbage_and_wrong_kind() {
        assert!(matches!(
            Checkpoint::read_from(&mut &b"NOTACKPT!...."[..]),
            Err(Error::Checkpoint(_))
        ));
        let m: crate::recommender::RecommenderModel<f32> = model(16, 1, DecorConfig::default(), 2);
        let c = Checkpoint::recommender(&PipelineConfig::default(), &m, None);
        let mut buf = Vec::new();
        c.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Checkpoint::read_from(&mut buf.as_slice()).is_err());
        assert!(c.into_tokenizer().is_err());
    }
}
