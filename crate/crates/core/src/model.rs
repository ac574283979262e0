//! Multi-head models: a staged backbone with the final classifier `C1` and
//! auxiliary classifiers attached after intermediate stages.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    build_stage, count_downsamples, stage_output_shape, BlockKind, BlockSpec, ForwardCtx,
    ParamBuilder, Stage,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{HeadId, Owner, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// An auxiliary classifier branch: its own stages, attached after
/// `stage_index` of the backbone. The GAP + FC classifier is appended
/// automatically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AuxAttachment {
    pub stage_index: usize,
    pub head: Vec<BlockSpec>,
}

/// Declarative description of a multi-head network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// `C x H x W` of one input sample.
    pub input_shape: [usize; 3],
    pub stem: BlockSpec,
    pub stages: Vec<BlockSpec>,
    pub num_classes: usize,
    #[serde(default)]
    pub aux: Vec<AuxAttachment>,
    /// Dropout ratio inside every residual block (after its first layer).
    #[serde(default)]
    pub dropout: f64,
}

pub const PRESETS: &[&str] = &["cifar-mini", "tiny-imagenet-mini"];

impl ModelSpec {
    /// Three residual stages at roughly a quarter of the CIFAR ResNet widths,
    /// with heads after the first (`C3`) and second (`C2`) stage.
    pub fn cifar_mini(num_classes: usize, image_size: usize) -> Self {
        Self {
            input_shape: [3, image_size, image_size],
            stem: BlockSpec::plain(4, 1, 1),
            stages: vec![
                BlockSpec::residual(4, 2, 1),
                BlockSpec::residual(8, 2, 2),
                BlockSpec::residual(16, 2, 2),
            ],
            num_classes,
            aux: vec![
                AuxAttachment {
                    stage_index: 1,
                    head: vec![BlockSpec::residual(32, 2, 2)],
                },
                AuxAttachment {
                    stage_index: 0,
                    head: vec![BlockSpec::residual(8, 2, 2), BlockSpec::residual(16, 1, 2)],
                },
            ],
            dropout: 0.0,
        }
    }

    /// A four-stage ResNet-18 analogue at a quarter width, heads after the
    /// third (`C2`) and second (`C3`) stage.
    pub fn tiny_imagenet_mini(num_classes: usize, image_size: usize) -> Self {
        Self {
            input_shape: [3, image_size, image_size],
            stem: BlockSpec::plain(16, 1, 2),
            stages: vec![
                BlockSpec::residual(16, 2, 1),
                BlockSpec::residual(32, 2, 2),
                BlockSpec::residual(64, 2, 2),
                BlockSpec::residual(128, 2, 2),
            ],
            num_classes,
            aux: vec![
                AuxAttachment {
                    stage_index: 2,
                    head: vec![BlockSpec::residual(256, 2, 2)],
                },
                AuxAttachment {
                    stage_index: 1,
                    head: vec![
                        BlockSpec::residual(64, 1, 2),
                        BlockSpec::residual(128, 2, 2),
                    ],
                },
            ],
            dropout: 0.0,
        }
    }

    pub fn preset(name: &str, num_classes: usize, image_size: usize) -> Result<Self> {
        match name {
            "cifar-mini" => Ok(Self::cifar_mini(num_classes, image_size)),
            "tiny-imagenet-mini" => Ok(Self::tiny_imagenet_mini(num_classes, image_size)),
            other => Err(Error::config(format!(
                "unknown model preset {other:?}; known presets: {}",
                PRESETS.join(", ")
            ))),
        }
    }

    /// Auxiliary attachments ordered by head id (`C2` first, deepest first).
    pub fn aux_by_head(&self) -> Vec<(HeadId, &AuxAttachment)> {
        let mut v: Vec<&AuxAttachment> = self.aux.iter().collect();
        v.sort_by_key(|a| std::cmp::Reverse(a.stage_index));
        v.into_iter()
            .enumerate()
            .map(|(i, a)| (HeadId::from_index(i + 1), a))
            .collect()
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        (0..=self.aux.len()).map(HeadId::from_index).collect()
    }

    /// Same backbone, no auxiliary heads.
    pub fn without_aux(&self) -> Self {
        Self {
            aux: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        if self.input_shape.contains(&0) {
            return Err(Error::config(format!(
                "input shape {:?} has a zero extent",
                self.input_shape
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::config("model needs at least one backbone stage"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        let lists = std::iter::once(&self.stem)
            .chain(&self.stages)
            .chain(self.aux.iter().flat_map(|a| &a.head));
        for spec in lists {
            spec.validate()?;
            if spec.kind == BlockKind::ClassifierHead {
                return Err(Error::config(
                    "classifier heads are appended automatically; remove classifier-head entries from stage lists",
                ));
            }
        }

        let mut seen = std::collections::HashSet::new();
        for a in &self.aux {
            if a.stage_index + 1 >= self.stages.len() {
                return Err(Error::config(format!(
                    "auxiliary head attached at stage {} but only stages 0..{} are intermediate",
                    a.stage_index,
                    self.stages.len().saturating_sub(2)
                )));
            }
            if !seen.insert(a.stage_index) {
                return Err(Error::config(format!(
                    "two auxiliary heads attached at stage {}",
                    a.stage_index
                )));
            }
        }

        let backbone_path = std::iter::once(&self.stem).chain(&self.stages);
        let target = count_downsamples(backbone_path);
        for (id, a) in self.aux_by_head() {
            let path = std::iter::once(&self.stem)
                .chain(&self.stages[..=a.stage_index])
                .chain(&a.head);
            let n = count_downsamples(path);
            if n != target {
                return Err(Error::config(format!(
                    "head {id} (attached after stage {}) has {n} down-sampling layers on its path, \
                     the final classifier has {target}",
                    a.stage_index
                )));
            }
        }

        // Shape propagation catches stride-2 stages on maps that are too small.
        let mut shape = self.input_shape.to_vec();
        let mut cin = self.input_shape[0];
        let mut feats = Vec::new();
        for spec in std::iter::once(&self.stem).chain(&self.stages) {
            shape = stage_output_shape(spec, cin, &shape)?;
            cin = spec.out_channels;
            feats.push(shape.clone());
        }
        for a in &self.aux {
            let mut s = feats[a.stage_index + 1].clone();
            let mut c = s[0];
            for spec in &a.head {
                s = stage_output_shape(spec, c, &s)?;
                c = spec.out_channels;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct HeadInfo {
    pub id: HeadId,
    /// Backbone stage the head reads from; `None` for `C1`.
    pub stage_index: Option<usize>,
}

#[derive(Debug, Clone)]
struct AuxHead {
    id: HeadId,
    stage_index: usize,
    stages: Vec<Stage>,
    classifier: Stage,
}

/// A built multi-head network together with its parameters.
#[derive(Debug, Clone)]
pub struct MultiHeadModel<T> {
    spec: ModelSpec,
    stem: Stage,
    stages: Vec<Stage>,
    classifier: Stage,
    heads: Vec<AuxHead>,
    params: ParamStore<T>,
}

impl<T: Scalar> MultiHeadModel<T> {
    /// Builds and initializes the model. The backbone is initialized first
    /// from the seeded stream, so models that differ only in their heads
    /// share identical backbone weights for a given seed.
    pub fn build(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let mut pb = ParamBuilder::new(&mut params, &mut rng, Owner::Backbone);
        let (stem, stages, classifier) = pb.scope("backbone", |pb| -> Result<_> {
            let stem = pb.scope("stem", |pb| {
                build_stage(&spec.stem, spec.input_shape[0], pb)
            })?;
            let mut cin = spec.stem.out_channels;
            let mut stages = Vec::with_capacity(spec.stages.len());
            for (i, s) in spec.stages.iter().enumerate() {
                stages.push(pb.scope(&format!("stage{i}"), |pb| build_stage(s, cin, pb))?);
                cin = s.out_channels;
            }
            let classifier = pb.scope("classifier", |pb| {
                build_stage(&BlockSpec::classifier(spec.num_classes), cin, pb)
            })?;
            Ok((stem, stages, classifier))
        })?;

        let mut heads = Vec::with_capacity(spec.aux.len());
        for (id, a) in spec.aux_by_head() {
            let mut pb = ParamBuilder::new(&mut params, &mut rng, Owner::Aux(id));
            let head = pb.scope(&format!("aux.{id}"), |pb| -> Result<AuxHead> {
                let mut cin = spec.stages[a.stage_index].out_channels;
                let mut hs = Vec::with_capacity(a.head.len());
                for (i, s) in a.head.iter().enumerate() {
                    hs.push(pb.scope(&format!("stage{i}"), |pb| build_stage(s, cin, pb))?);
                    cin = s.out_channels;
                }
                let classifier = pb.scope("classifier", |pb| {
                    build_stage(&BlockSpec::classifier(spec.num_classes), cin, pb)
                })?;
                Ok(AuxHead {
                    id,
                    stage_index: a.stage_index,
                    stages: hs,
                    classifier,
                })
            })?;
            heads.push(head);
        }

        Ok(Self {
            spec: spec.clone(),
            stem,
            stages,
            classifier,
            heads,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len() + 1
    }

    pub fn heads(&self) -> Vec<HeadInfo> {
        std::iter::once(HeadInfo {
            id: HeadId::FINAL,
            stage_index: None,
        })
        .chain(self.heads.iter().map(|h| HeadInfo {
            id: h.id,
            stage_index: Some(h.stage_index),
        }))
        .collect()
    }

    pub fn head_ids(&self) -> Vec<HeadId> {
        self.heads().into_iter().map(|h| h.id).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Evaluates the shared trunk once and every head on top of it.
    /// Returns one `N x K` logit tensor per head, `C1` first.
    pub fn forward_all(
        &self,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var>> {
        self.forward_all_with(&self.params, g, x, ctx)
    }

    /// [`forward_all`](Self::forward_all) reading parameters from `store`,
    /// which must have this model's layout.
    pub fn forward_all_with(
        &self,
        store: &ParamStore<T>,
        g: &mut Graph<T>,
        x: Var,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<Vec<Var>> {
        let shape = g.shape(x);
        if shape.len() != 4 || shape[1..] != self.spec.input_shape {
            return Err(Error::config(format!(
                "model expects input N x {:?}, got {:?}",
                self.spec.input_shape, shape
            )));
        }
        let mut h = self.stem.forward(g, store, x, ctx)?;
        let mut feats = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            h = s.forward(g, store, h, ctx)?;
            feats.push(h);
        }
        let mut logits = vec![self.classifier.forward(g, store, h, ctx)?];
        for head in &self.heads {
            let mut a = feats[head.stage_index];
            for s in &head.stages {
                a = s.forward(g, store, a, ctx)?;
            }
            logits.push(head.classifier.forward(g, store, a, ctx)?);
        }
        Ok(logits)
    }

    /// Eval-mode logits of every head for a batch.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let xv = g.input(x.clone(), false);
        let out = self.forward_all(&mut g, xv, &mut ForwardCtx::eval())?;
        Ok(out.into_iter().map(|v| g.value(v).clone()).collect())
    }

    /// Single-head model carrying only the backbone and `C1`.
    pub fn strip_aux(&self) -> Result<Self> {
        let mut stripped = Self::build(&self.spec.without_aux(), 0)?;
        let copied = stripped.params.copy_matching(&self.params);
        if copied != stripped.params.len() {
            return Err(Error::config(format!(
                "stripping copied {copied} of {} backbone parameters",
                stripped.params.len()
            )));
        }
        Ok(stripped)
    }
}
