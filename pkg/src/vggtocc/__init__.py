"""Occupancy-head mechanisms on a numpy autodiff core: projection-aware
deformable attention, coarse-guided gated fusion, the loss stack, FLOP
accounting, and a synthetic multi-camera harness."""

__version__ = "0.1.0"
