"""Fit an articulated body model to stereo keypoints and LiDAR returns.

Sequences are fitted with one shared body shape via ADMM consensus. The
package also ships a synthetic scene generator, MPJPE metrics and the
triangulation / disparity baselines used to evaluate the fits.
"""
from .body_model import BodyParams, PosedBody, SkeletonTemplate, default_template, forward_kinematics
from .energies import EnergyWeights, FrameObservation, e_total
from .kernels import BACKEND
from .priors import GmmModel, Priors, fit_gmm
from .solver import AdmmConfig, FitResult, SolverConfig, fit_frame, fit_sequence
from .stereo import StereoRig

__version__ = "0.1.0"

__all__ = [
    "AdmmConfig", "BACKEND", "BodyParams", "EnergyWeights", "FitResult", "FrameObservation", "GmmModel",
    "PosedBody", "Priors", "SkeletonTemplate", "SolverConfig", "StereoRig", "default_template", "e_total",
    "fit_frame", "fit_gmm", "fit_sequence", "forward_kinematics",
]
