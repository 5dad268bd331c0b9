"""Orbit determination by fitting rendered streaks directly to image pixels."""

from .camera import CameraIntrinsics, FrameSequence, Pointing
from .observer import ExposureWindow, ObserverSite
from .optimizer import FitConfig, FitResult, ObservationSet, fit, total_loss
from .orbit import KeplerianElements, OrbitState, elements_to_state, propagate_kepler, state_to_elements
from .synth import StreakImage, render_streak

__all__ = [
    "CameraIntrinsics", "ExposureWindow", "FitConfig", "FitResult", "FrameSequence", "KeplerianElements",
    "ObservationSet", "ObserverSite", "OrbitState", "Pointing", "StreakImage", "elements_to_state", "fit",
    "propagate_kepler", "render_streak", "state_to_elements", "total_loss",
]
