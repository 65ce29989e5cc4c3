//! Self-supervised stereo scene flow.
//!
//! Four images (left/right at two time steps) relate to a dense 4-channel
//! scene-flow field per reference view through three pairwise displacements.
//! The library evaluates an occlusion-aware census-based reconstruction
//! energy over those pairs, estimates occlusions by forward-backward
//! consistency of flipping-derived bidirectional displacements, and
//! minimizes the energy directly with a coarse-to-fine first-order solver.
//!
//! Entry points: [`solver::solve`] for end-to-end estimation,
//! [`loss::total_loss`] / [`loss::grad_total_loss`] for energy evaluation,
//! [`kitti`] for benchmark file formats and metrics. The `examples/`
//! directory demonstrates each capability on constructed scenes.

pub mod census;
pub mod costvol;
pub mod error;
pub mod geometry;
pub mod grid;
pub mod imageio;
pub mod kitti;
pub mod loss;
pub mod occlusion;
pub mod solver;
pub mod synth;
pub mod viz;

pub use census::{
    census_distance, census_transform, charbonnier, photometric_residual, CensusConfig,
    CensusDescriptorGrid, CensusMode, CharbonnierParams,
};
pub use error::{Error, Result};
pub use geometry::{
    assemble_reference_inputs, displacements_from_sceneflow, inverse_displacement,
    mirror_sceneflow, pair_displacement, unflip_displacement, DisplacementField, PairKind,
    SceneFlowField, Side, StereoQuadruplet, Time, ViewId,
};
pub use grid::{bilinear_sample, build_pyramid, hflip_image, warp, ImageGrid, Pyramid, ScalarField, VectorField};
pub use loss::{
    all_visible_masks, finite_diff_check, finite_diff_gradient, grad_total_loss, pair_loss,
    pairs_loss, smoothness_loss, total_loss, FiniteDiffReport, GradientField, LossBreakdown,
    LossConfig, LossWeights, PairMasks,
};
pub use occlusion::{
    bounds_only_mask, consistency_occlusion, occlusion_masks_for_reference, ConsistencyParams,
    OcclusionMask,
};
pub use kitti::{
    epe, koe, read_kitti_disparity, read_kitti_flow, write_kitti_disparity, write_kitti_flow,
    GroundTruthSceneFlow, MetricReport,
};
pub use solver::{
    estimate_masks, solve, solve_with_progress, FieldInit, ProgressRecord, SolveResult,
    SolverConfig,
};
pub use viz::{disparity_to_gray, flow_to_color};
