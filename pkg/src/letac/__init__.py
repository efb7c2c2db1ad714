"""Learned tactile-reactive grasping MPC: differentiable QP layer, simulator, baselines."""

__version__ = "0.1.0"
