"""Geometry-then-appearance novel view synthesis at desk scale.

Modules: camera, scene, warp, latent, diffusion, pipeline, evaluation, store,
estimator and the ``gta`` command line.
"""

from .camera import Intrinsics, Pose, Trajectory, generate_trajectory
from .estimator import GTAGenerator, JointGenerator
from .evaluation import Report, depth_abs_rel, evaluate_run, psnr, ssim
from .pipeline import GtaModels, SceneOutput, build_models, infer, test_time_scaling
from .scene import DatasetConfig, RenderedView, SceneSample, generate_samples, make_dataset
from .store import load_checkpoint, read_tensor, save_checkpoint, write_tensor
from .warp import PartialSequence, masked_warp, warp_sequence

__version__ = "0.1.0"
