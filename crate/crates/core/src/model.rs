//! The assembled pipeline: features → seeds → proposals → MRF inference →
//! refinement.

use std::time::Instant;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::cost::{CostVolume, LabelSeeds, SeedEncoder};
use crate::data::{crop_map, images_to_tensor, RgbImage};
use crate::features::{FeatureExtractor, FeaturePyramid};
use crate::nmrf::{DisparityField, NmrfInference};
use crate::nn::{to_f32_vec, ParamStore};
use crate::proposal::{CandidateLabels, ProposalNetwork};
use crate::refine::Refinement;
use crate::{Error, Result};

/// Wall-clock seconds per pipeline stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTimings {
    pub feature_extraction: f64,
    pub disparity_proposal: f64,
    pub mrf_inference: f64,
    pub refinement: f64,
}

impl StageTimings {
    pub fn total(&self) -> f64 {
        self.feature_extraction + self.disparity_proposal + self.mrf_inference + self.refinement
    }

    pub fn stages(&self) -> [(&'static str, f64); 4] {
        [
            ("feature extraction", self.feature_extraction),
            ("disparity proposal", self.disparity_proposal),
            ("mrf inference", self.mrf_inference),
            ("refinement", self.refinement),
        ]
    }
}

/// Everything one forward pass produces, at padded resolution.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub pyramid: FeaturePyramid,
    pub volume: CostVolume,
    pub seeds: LabelSeeds,
    pub candidates: CandidateLabels,
    pub field: DisparityField,
    /// Winner-takes-all map of the coarse stage, `(B, H, W)`.
    pub coarse: Vec<f32>,
    /// Refined disparity `(B, H, W)`.
    pub refined: Tensor,
    pub timings: StageTimings,
}

/// Host-side result for one image pair, cropped to the input size.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub height: usize,
    pub width: usize,
    pub disparity: Vec<f32>,
    pub coarse: Vec<f32>,
    /// Coarse grid size and `k` candidate disparities per coarse pixel.
    pub grid: (usize, usize),
    pub k: usize,
    pub candidates: Vec<f32>,
    pub timings: StageTimings,
}

pub struct NmrfModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub features: FeatureExtractor,
    pub seed_encoder: SeedEncoder,
    pub proposal: ProposalNetwork,
    pub inference: NmrfInference,
    pub refinement: Refinement,
}

impl NmrfModel {
    pub fn new(config: &ModelConfig, dtype: DType, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let mut root = store.root();
        let features = FeatureExtractor::new(&mut root.sub("features"), config)?;
        let seed_encoder = SeedEncoder::new(&mut root.sub("seeds"), config)?;
        let proposal = ProposalNetwork::new(&mut root.sub("proposal"), config)?;
        let inference = NmrfInference::new(&mut root.sub("inference"), config)?;
        let refinement = Refinement::new(&mut root.sub("refinement"), config)?;
        Ok(Self {
            config: config.clone(),
            store,
            features,
            seed_encoder,
            proposal,
            inference,
            refinement,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// `left`, `right`: `(B, 3, H, W)` in `[0, 1]`.
    pub fn forward(&self, left: &Tensor, right: &Tensor) -> Result<ModelOutput> {
        let mut timings = StageTimings::default();
        let t = Instant::now();
        let pyramid = self.features.extract(left, right)?;
        timings.feature_extraction = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let volume = CostVolume::build(&pyramid.coarse_left, &pyramid.coarse_right, self.config.max_disparity)?;
        let seeds = LabelSeeds::extract(&volume, self.config.k)?;
        let seed_features = self.seed_encoder.forward(&volume, &seeds)?;
        let candidates = self.proposal.forward(&seed_features, &seeds)?;
        timings.disparity_proposal = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let field = self.inference.forward(&pyramid, &candidates.disparities)?;
        let coarse = field.winner_takes_all()?;
        timings.mrf_inference = t.elapsed().as_secs_f64();

        let t = Instant::now();
        let refined = self.refinement.forward(&pyramid, &coarse)?;
        timings.refinement = t.elapsed().as_secs_f64();
        Ok(ModelOutput {
            pyramid,
            volume,
            seeds,
            candidates,
            field,
            coarse,
            refined,
            timings,
        })
    }

    /// Runs one pair and crops every output back to the input size.
    pub fn predict(&self, left: &RgbImage, right: &RgbImage) -> Result<Prediction> {
        if (left.height, left.width) != (right.height, right.width) {
            return Err(Error::Shape(format!(
                "left {}x{} and right {}x{} differ",
                left.height, left.width, right.height, right.width
            )));
        }
        let dt = self.dtype();
        let out = self.forward(&images_to_tensor(&[left], dt)?, &images_to_tensor(&[right], dt)?)?;
        let pad = out.pyramid.padding;
        let (h, w) = (left.height, left.width);
        let refined = to_f32_vec(&out.refined)?;
        let (_, gh, gw, k) = out.candidates.disparities.dims4()?;
        Ok(Prediction {
            height: h,
            width: w,
            disparity: crop_map(&refined, pad.padded_width, 0, 0, h, w),
            coarse: crop_map(&out.coarse, pad.padded_width, 0, 0, h, w),
            grid: (gh, gw),
            k,
            candidates: to_f32_vec(&out.candidates.disparities)?,
            timings: out.timings,
        })
    }
}
