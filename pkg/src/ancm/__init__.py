"""Adaptive neural contraction metrics for control of uncertain nonlinear systems."""
from .controllers import ControllerConfig, GainCertificate, check_gain_condition, tracking_error_bound
from .dynamics import CartPole, ParametricSystem, SystemModel, cartpole_model, cartpole_parametric, sdc_matrix
from .lmi import LmiProblem, solve_sdp
from .ncm import MetricNet, TrainConfig, train
from .sim import SimConfig, simulate
from .synthesis import Grid, SynthesisConfig, build_dataset

__version__ = "0.1.0"
