"""Prescribed-time boundary stabilisation of a reaction-diffusion plant by
backstepping, with neural-operator approximations of the gain kernel."""
from .backstepping_control import StateVector, control_U, forward_transform, inverse_transform
from .core_grid import CoeffSpec, GainSchedule, SpaceGrid, TimeGrid, TriGrid
from .kernel_solver import solve_inverse_kernel_trajectory, solve_kernel_trajectory
from .neural_operator import DeepOperator, load_operator, save_operator
from .plant_sim import AnalyticKernel, NOFeedback, NOKernel, OpenLoop, PerturbedExact, simulate

__version__ = "0.1.0"

__all__ = [
    "AnalyticKernel", "CoeffSpec", "DeepOperator", "GainSchedule", "NOFeedback", "NOKernel", "OpenLoop",
    "PerturbedExact", "SpaceGrid", "StateVector", "TimeGrid", "TriGrid", "control_U", "forward_transform",
    "inverse_transform", "load_operator", "save_operator", "simulate", "solve_inverse_kernel_trajectory",
    "solve_kernel_trajectory",
]
