use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::auc;
use crate::alignment::{
    behavioral_alignment_loss, semantic_alignment_loss, topk_neighbors, AlignmentConfig, BatchEmbeddings, Direction,
    EmbeddingTable, EmbeddingTables, EntityKind, NeighborIndex, ProjectionNet,
};
use crate::cdm::{project_nonneg, Batch, Cdm, CdmParameters, ModelConfig, ModelDims, ModelKind};
use crate::dataset::{DatasetSplit, FrequencyTable, QMatrix};
use crate::error::{Error, Result};
use crate::numerics::{value_and_grad, AdamConfig, Checkpoint, NodeId, OptimizerState, ParamNodes, Params, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignMode {
    None,
    Beh,
    Sem,
}

impl AlignMode {
    pub fn name(self) -> &'static str {
        match self {
            AlignMode::None => "none",
            AlignMode::Beh => "beh",
            AlignMode::Sem => "sem",
        }
    }
}

impl std::str::FromStr for AlignMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AlignMode::None),
            "beh" => Ok(AlignMode::Beh),
            "sem" => Ok(AlignMode::Sem),
            other => Err(Error::config(format!(
                "unknown alignment mode {other:?} (none, beh, sem)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub align: AlignMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without a validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(kind: ModelKind, align: AlignMode, seed: u64) -> Self {
        Self {
            model: ModelConfig::new(kind),
            align,
            epochs: 30,
            batch_size: 256,
            lr: 0.002,
            patience: 5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Objective per training log.
    pub train_loss: f64,
    pub valid_auc: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: CdmParameters,
    /// Projection networks, empty without alignment.
    pub projections: Params,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub config: TrainConfig,
    pub alignment: AlignmentConfig,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    cdm: Cdm,
    train: TrainConfig,
    alignment: AlignmentConfig,
    best_epoch: usize,
}

impl TrainOutcome {
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = CheckpointMeta {
            cdm: self.model.model.clone(),
            train: self.config.clone(),
            alignment: self.alignment.clone(),
            best_epoch: self.best_epoch,
        };
        let mut params = self.model.params.clone();
        params.extend(self.projections.clone());
        Ok(Checkpoint::new(
            self.model.model.kind().name(),
            serde_json::to_value(meta)?,
            &params,
        ))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.meta.clone())?;
        let (mut model_params, mut projections) = (Params::new(), Params::new());
        for (name, t) in ck.params()? {
            if name.starts_with(meta.cdm.kind().name()) {
                model_params.insert(name, t);
            } else {
                projections.insert(name, t);
            }
        }
        Ok(Self {
            model: CdmParameters {
                model: meta.cdm,
                params: model_params,
            },
            projections,
            history: Vec::new(),
            best_epoch: meta.best_epoch,
            config: meta.train,
            alignment: meta.alignment,
        })
    }
}

/// Named RNG streams derived from one seed.
pub(crate) fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

const STREAM_MODEL: u64 = 0;
const STREAM_PROJECTION: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_ALIGN: u64 = 3;

/// Everything the alignment terms need besides the batch.
pub struct AlignContext<'a> {
    pub mode: AlignMode,
    pub cfg: &'a AlignmentConfig,
    pub tables: &'a EmbeddingTables,
    pub student_proj: ProjectionNet,
    pub exercise_proj: ProjectionNet,
    pub neighbors: Option<(NeighborIndex, NeighborIndex)>,
    pub freq: &'a FrequencyTable,
}

pub fn projection_prefix(mode: AlignMode, kind: EntityKind) -> String {
    format!("align.{}.{}", mode.name(), kind.name())
}

impl<'a> AlignContext<'a> {
    pub fn new(
        mode: AlignMode,
        cdm: &Cdm,
        cfg: &'a AlignmentConfig,
        tables: &'a EmbeddingTables,
        freq: &'a FrequencyTable,
    ) -> Result<Self> {
        if mode == AlignMode::None {
            return Err(Error::contract("alignment context needs an alignment mode"));
        }
        cfg.validate()?;
        for (table, n) in [
            (&tables.students, cdm.dims.students),
            (&tables.exercises, cdm.dims.exercises),
        ] {
            if table.len() != n {
                return Err(Error::config(format!(
                    "{} embedding table has {} rows for {n} entities",
                    table.kind,
                    table.len()
                )));
            }
        }
        let proj = |kind: EntityKind, table: &EmbeddingTable, beh_dim: usize| {
            let prefix = projection_prefix(mode, kind);
            match mode {
                AlignMode::Beh => ProjectionNet::new(
                    prefix,
                    Direction::SemanticToBehavioral,
                    table.dim(),
                    cfg.projection_hidden,
                    beh_dim,
                ),
                _ => ProjectionNet::new(
                    prefix,
                    Direction::BehavioralToSemantic,
                    beh_dim,
                    cfg.projection_hidden,
                    table.dim(),
                ),
            }
        };
        let neighbors = match mode {
            AlignMode::Beh => Some((
                topk_neighbors(&tables.students, cfg.k)?,
                topk_neighbors(&tables.exercises, cfg.k)?,
            )),
            _ => None,
        };
        Ok(Self {
            mode,
            cfg,
            tables,
            student_proj: proj(EntityKind::Student, &tables.students, cdm.student_dim()),
            exercise_proj: proj(EntityKind::Exercise, &tables.exercises, cdm.exercise_dim()),
            neighbors,
            freq,
        })
    }

    pub fn init_projections(&self, rng: &mut impl Rng) -> Params {
        let mut params = Params::new();
        self.student_proj.init(rng, &mut params);
        self.exercise_proj.init(rng, &mut params);
        params
    }

    /// Weighted alignment terms over the batch's distinct students and
    /// exercises.
    pub fn loss(
        &self,
        tape: &mut Tape,
        nodes: &ParamNodes,
        cdm: &Cdm,
        batch: &Batch,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let students = batch.unique_students();
        let exercises = batch.unique_exercises();
        let cs = cdm.student_embedding(tape, nodes, &students)?;
        let ce = cdm.exercise_embedding(tape, nodes, &exercises)?;
        let sb = BatchEmbeddings {
            kind: EntityKind::Student,
            node: cs,
            ids: &students,
        };
        let eb = BatchEmbeddings {
            kind: EntityKind::Exercise,
            node: ce,
            ids: &exercises,
        };
        match self.mode {
            AlignMode::Beh => {
                let (ns, ne) = self.neighbors.as_ref().expect("neighbors built for beh");
                let ts = behavioral_alignment_loss(
                    tape,
                    sb,
                    &self.tables.students,
                    &self.student_proj,
                    nodes,
                    ns,
                    self.cfg,
                    rng,
                )?;
                let te = behavioral_alignment_loss(
                    tape,
                    eb,
                    &self.tables.exercises,
                    &self.exercise_proj,
                    nodes,
                    ne,
                    self.cfg,
                    rng,
                )?;
                let global = tape.add(ts.global, te.global)?;
                let local = tape.add(ts.local, te.local)?;
                let g = tape.scale(global, self.cfg.alpha)?;
                let l = tape.scale(local, self.cfg.beta)?;
                tape.add(g, l)
            }
            AlignMode::Sem => {
                let rs = semantic_alignment_loss(
                    tape,
                    sb,
                    &self.tables.students,
                    &self.student_proj,
                    nodes,
                    &self.freq.students,
                    self.cfg,
                    rng,
                )?;
                let re = semantic_alignment_loss(
                    tape,
                    eb,
                    &self.tables.exercises,
                    &self.exercise_proj,
                    nodes,
                    &self.freq.exercises,
                    self.cfg,
                    rng,
                )?;
                let r = tape.add(rs, re)?;
                tape.scale(r, self.cfg.lambda)
            }
            AlignMode::None => Err(Error::contract("no alignment mode")),
        }
    }
}

fn valid_score(model: &CdmParameters, valid: Option<&Batch>) -> Result<Option<f64>> {
    let Some(batch) = valid else { return Ok(None) };
    let scores = model.predict(batch)?;
    match auc(&scores, &batch.labels) {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Trains a model on `split.train`, selecting the epoch with the best
/// validation AUC.
pub fn train(
    cfg: &TrainConfig,
    split: &DatasetSplit,
    q: &QMatrix,
    embeddings: Option<&EmbeddingTables>,
    align: &AlignmentConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if split.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let cdm = Cdm::new(cfg.model.clone(), ModelDims::of(&split.indices))?;
    let freq = FrequencyTable::from_train(&split.train, &split.indices)?;
    let ctx = match (cfg.align, embeddings) {
        (AlignMode::None, _) => None,
        (mode, Some(tables)) => Some(AlignContext::new(mode, &cdm, align, tables, &freq)?),
        (mode, None) => {
            return Err(Error::config(format!(
                "alignment mode {} needs semantic embeddings",
                mode.name()
            )))
        }
    };

    let mut params = cdm.init_params(&mut stream(cfg.seed, STREAM_MODEL));
    if let Some(ctx) = &ctx {
        params.extend(ctx.init_projections(&mut stream(cfg.seed, STREAM_PROJECTION)));
    }
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE);
    let mut align_rng = stream(cfg.seed, STREAM_ALIGN);
    let mut opt = OptimizerState::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let valid = if split.valid.is_empty() {
        None
    } else {
        Some(Batch::from_logs(&split.valid, &split.indices, q)?)
    };

    let split_params = |params: &Params| {
        let (mut model, mut proj) = (Params::new(), Params::new());
        for (k, v) in params {
            if k.starts_with(cdm.kind().name()) {
                model.insert(k.clone(), v.clone());
            } else {
                proj.insert(k.clone(), v.clone());
            }
        }
        (model, proj)
    };

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Params)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = Batch::from_logs(chunk.iter().map(|&i| &split.train[i]), &split.indices, q)?;
            let (loss, grads) = value_and_grad(&params, |tape, nodes| {
                let base = cdm.loss(tape, nodes, &batch)?;
                match &ctx {
                    None => Ok(base),
                    Some(ctx) => {
                        let extra = ctx.loss(tape, nodes, &cdm, &batch, &mut align_rng)?;
                        tape.add(base, extra)
                    }
                }
            })?;
            opt.step(&mut params, &grads)?;
            project_nonneg(cdm.kind(), &mut params);
            total += loss;
        }
        let current = CdmParameters {
            model: cdm.clone(),
            params: split_params(&params).0,
        };
        let valid_auc = valid_score(&current, valid.as_ref())?;
        let train_loss = total / split.train.len() as f64;
        log::debug!("epoch {epoch}: train loss {train_loss:.5}, valid auc {valid_auc:?}");
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_auc,
        });
        let score = valid_auc.unwrap_or(-train_loss);
        if best.as_ref().is_none_or(|(b, _, _)| score > *b) {
            best = Some((score, epoch, params.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let (model_params, projections) = split_params(&best_params);
    Ok(TrainOutcome {
        model: CdmParameters {
            model: cdm,
            params: model_params,
        },
        projections,
        history,
        best_epoch,
        config: cfg.clone(),
        alignment: align.clone(),
    })
}
