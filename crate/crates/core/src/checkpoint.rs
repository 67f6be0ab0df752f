//! `NFDL` checkpoints: magic, `u32` version, `u64` manifest length, a JSON
//! manifest, then every tensor as little-endian `f32` in manifest order.
//!
//! Models are rebuilt from the manifest's configuration and layout and then
//! filled by tensor name, so a round trip is bit-exact.

use std::collections::HashSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Reader};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, FlowLayout, FlowModel, Synthesizer};
use crate::fusion::rebuild_flow;
use crate::graph::{Graph, Parametric};
use crate::params::ParamStore;
use crate::student::{StudentConfig, StudentModel, Variant};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NFDL";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_MANIFEST: u64 = 16 << 20;
const KIND: &str = "checkpoint";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub kind: ModelKind,
    pub variant: Option<Variant>,
    /// The teacher's configuration; for a student, the teacher it pairs with.
    pub teacher: FlowConfig,
    pub student: Option<StudentConfig>,
    pub layout: Option<FlowLayout>,
    pub step: usize,
    pub tensors: Vec<TensorInfo>,
    /// Resolved configuration of the command that wrote the file.
    pub producer: Option<serde_json::Value>,
}

#[derive(Clone, Debug)]
pub enum Model {
    Teacher(FlowModel<f32>),
    Student(StudentModel<f32>),
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params().count()
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Teacher(_) => ModelKind::Teacher,
            Model::Student(_) => ModelKind::Student,
        }
    }

    pub fn params(&self) -> &ParamStore<f32> {
        match self {
            Model::Teacher(m) => m.params(),
            Model::Student(m) => m.params(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub step: usize,
    pub producer: Option<serde_json::Value>,
}

fn fail(reason: impl Into<String>) -> Error {
    Error::Format {
        kind: KIND,
        reason: reason.into(),
    }
}

impl Checkpoint {
    pub fn teacher(model: FlowModel<f32>, step: usize) -> Self {
        Checkpoint {
            model: Model::Teacher(model),
            step,
            producer: None,
        }
    }

    pub fn student(model: StudentModel<f32>, step: usize) -> Self {
        Checkpoint {
            model: Model::Student(model),
            step,
            producer: None,
        }
    }

    pub fn manifest(&self) -> Manifest {
        let tensors = self
            .model
            .params()
            .iter()
            .map(|(_, e)| TensorInfo {
                name: e.name.clone(),
                shape: e.tensor.shape().to_vec(),
                dtype: "f32".into(),
            })
            .collect();
        let (teacher, student, layout) = match &self.model {
            Model::Teacher(m) => (m.config().clone(), None, Some(m.layout().clone())),
            Model::Student(m) => (m.teacher_config().clone(), Some(m.config().clone()), None),
        };
        Manifest {
            kind: self.model.kind(),
            variant: student.as_ref().map(|s| s.variant),
            teacher,
            student,
            layout,
            step: self.step,
            tensors,
            producer: self.producer.clone(),
        }
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let manifest = serde_json::to_vec(&self.manifest())?;
        let store = self.model.params();
        let payload: usize = store.iter().map(|(_, e)| e.tensor.len()).sum();
        let mut out = Vec::with_capacity(16 + manifest.len() + 4 * payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        for (_, e) in store.iter() {
            for v in e.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, KIND);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(r.fail("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.fail(&format!("unsupported version {version}")));
        }
        let len = r.u64()?;
        if len > MAX_MANIFEST || len as usize > r.remaining() {
            return Err(r.fail(&format!("manifest length {len} is out of range")));
        }
        let m: Manifest = serde_json::from_slice(r.take(len as usize)?)
            .map_err(|e| fail(format!("manifest: {e}")))?;

        let mut names = HashSet::with_capacity(m.tensors.len());
        let mut total = 0usize;
        for t in &m.tensors {
            if t.dtype != "f32" {
                return Err(fail(format!(
                    "tensor {} has unsupported dtype {}",
                    t.name, t.dtype
                )));
            }
            if !names.insert(t.name.as_str()) {
                return Err(fail(format!("duplicate tensor {}", t.name)));
            }
            let n = t
                .shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fail(format!("tensor {} is too large", t.name)))?;
            total = total
                .checked_add(n)
                .ok_or_else(|| fail("payload is too large"))?;
        }
        if total.checked_mul(4) != Some(r.remaining()) {
            return Err(fail(format!(
                "manifest describes {total} values, payload holds {} bytes",
                r.remaining()
            )));
        }
        let mut tensors = Vec::with_capacity(m.tensors.len());
        for t in &m.tensors {
            let n = t.shape.iter().product();
            let data = r.f32s(n)?;
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(fail(format!(
                    "tensor {} has a non-finite value at {i}",
                    t.name
                )));
            }
            tensors.push((t.name.clone(), Tensor::new(t.shape.clone(), data)?));
        }

        let model = match (m.kind, &m.student, &m.layout) {
            (ModelKind::Teacher, None, Some(layout)) if m.variant.is_none() => {
                m.teacher.validate()?;
                // Structure is only built once its size is known to fit the payload.
                // Fusion can drop weight-norm gains and actnorm parameters.
                let fused_floor = FlowConfig {
                    weight_norm: false,
                    ..m.teacher.clone()
                }
                .param_count()
                .saturating_sub(m.teacher.steps * 2 * m.teacher.squeeze);
                if fused_floor > total {
                    return Err(fail("configuration does not match the payload size"));
                }
                let mut model = rebuild_flow::<f32>(m.teacher.clone(), layout)?;
                model.store_mut().load_from(&tensors)?;
                Model::Teacher(model)
            }
            (ModelKind::Student, Some(s), None) if m.variant == Some(s.variant) => {
                if s.param_count(&m.teacher)? > total {
                    return Err(fail("configuration does not match the payload size"));
                }
                let mut model = StudentModel::<f32>::new(
                    s.clone(),
                    &m.teacher,
                    &mut ChaCha8Rng::seed_from_u64(0),
                )?;
                model.store_mut().load_from(&tensors)?;
                Model::Student(model)
            }
            _ => return Err(fail("model kind, variant and configuration disagree")),
        };
        Ok(Checkpoint {
            model,
            step: m.step,
            producer: m.producer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    pub fn into_teacher(self) -> Result<FlowModel<f32>> {
        match self.model {
            Model::Teacher(m) => Ok(m),
            Model::Student(_) => Err(Error::invalid("checkpoint holds a student, not a teacher")),
        }
    }

    pub fn into_student(self) -> Result<StudentModel<f32>> {
        match self.model {
            Model::Student(m) => Ok(m),
            Model::Teacher(_) => Err(Error::invalid("checkpoint holds a teacher, not a student")),
        }
    }
}

impl Synthesizer<f32> for Model {
    fn synthesize<G: Graph<f32>>(&self, g: &mut G, z: &G::V, c: &G::V) -> Result<G::V> {
        match self {
            Model::Teacher(m) => m.synthesize(g, z, c),
            Model::Student(m) => m.synthesize(g, z, c),
        }
    }

    fn latent_shape(&self, batch: usize, len: usize) -> Result<[usize; 3]> {
        match self {
            Model::Teacher(m) => m.latent_shape(batch, len),
            Model::Student(m) => m.latent_shape(batch, len),
        }
    }

    fn store(&self) -> &ParamStore<f32> {
        self.params()
    }

    fn frame_hop(&self) -> usize {
        match self {
            Model::Teacher(m) => m.frame_hop(),
            Model::Student(m) => m.frame_hop(),
        }
    }

    fn cond_channels(&self) -> usize {
        match self {
            Model::Teacher(m) => m.cond_channels(),
            Model::Student(m) => m.cond_channels(),
        }
    }
}
