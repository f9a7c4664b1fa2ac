"""endomap: mosaic and shaded 3D depth reconstruction from monocular
endoscopic-style image sequences."""

__version__ = "0.1.0"

from .errors import (ConfigError, DegenerateGeometry, DisconnectedGraph,
                     EmptyOverlap, EndomapError, InsufficientMatches,
                     NothingToAnchor, StageError, TooManyLevels)
from .flow import FlowField, FlowParams, farneback_flow, lucas_kanade_track, \
    mean_flow_magnitude
from .keyframes import KeyframeSelection, select_keyframes
from .pipeline import PipelineConfig, PipelineResult, run_ablation, run_pipeline
from .preprocess import (CameraIntrinsics, PreprocessConfig, detect_specular_mask,
                         devignette, inpaint, preprocess_frame, undistort)
from .register import (Correspondences, MosaicLayer, PairEstimate, PatchWeights,
                       Transform2D, bundle_adjust, emse_cost, flow_to_correspondences,
                       gain_compensate, gauss_newton_affine, multiband_blend,
                       ransac_homography, register_pair, warp_layers)
from .sfs import (DepthMap, LightParams, SfsConfig, depth_to_pointcloud,
                  estimate_light_params, reflectance, tsai_shah_depth)
from .synth import (DegradationConfig, SyntheticScene, bumps_scene, degrade,
                    generate_sequence, hemisphere_scene, render_lambertian)
from .evaluate import Trajectory, ade_rmse, ate_rmse, icp_align, reprojection_error
