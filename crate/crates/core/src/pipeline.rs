//! End-to-end panoptic inference from dense predictions.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::fields::{PanopticMap, Predictions, GLOBAL_STRIDE};
use crate::maskcons::{construct_masks, fuse_panoptic, BoxSource, FusionParams, InstanceMask, DEFAULT_SIGMA};
use crate::selection::{assemble_global_boxes, select_queries, LevelBoxStack, NmsConfig, QuerySet};

/// How per-pixel boxes are gathered from the pyramid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Assembly {
    /// Take the level picked by the levelness argmax.
    #[default]
    Levelness,
    /// Ignore levelness and take the best IoU over all levels.
    MaxIou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub sigma: f32,
    pub nms: NmsConfig,
    pub assembly: Assembly,
    pub stuff_area_min: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            sigma: DEFAULT_SIGMA,
            nms: NmsConfig::default(),
            assembly: Assembly::Levelness,
            stuff_area_min: FusionParams::default().stuff_area_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutput {
    pub queries: QuerySet,
    pub masks: Vec<InstanceMask>,
    pub panoptic: PanopticMap,
}

/// Query selection, mask construction and fusion. Parallel stages run on the
/// current rayon pool; the output does not depend on its size.
pub fn run_pipeline(preds: &Predictions, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let queries = select_queries(&preds.levels, &preds.layout, &cfg.nms);
    let (h, w) = preds.global_dims();
    let masks = match cfg.assembly {
        Assembly::Levelness => {
            let boxes = assemble_global_boxes(&preds.levels, &preds.levelness)?;
            construct_masks(BoxSource::Assembled(&boxes), &preds.semantics, &preds.layout, &queries, cfg.sigma)?
        }
        Assembly::MaxIou => {
            let stack = LevelBoxStack::new(&preds.levels, h, w);
            construct_masks(BoxSource::MaxLevel(&stack), &preds.semantics, &preds.layout, &queries, cfg.sigma)?
        }
    };
    let params = FusionParams {
        stuff_area_min: cfg.stuff_area_min,
        upsample: GLOBAL_STRIDE as usize,
    };
    let panoptic = fuse_panoptic(&masks, &preds.semantics, &preds.layout, &params)?;
    Ok(PipelineOutput {
        queries,
        masks,
        panoptic,
    })
}
