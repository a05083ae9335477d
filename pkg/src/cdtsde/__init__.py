"""Spatially varying domain-mixture diffusion for paired image translation."""

from cdtsde.errors import (
    CDTError,
    ConfigError,
    ConstraintError,
    DimensionError,
    FormatError,
    ParameterError,
    ScheduleError,
    SingularityError,
    TrainingError,
)
from cdtsde.forward import DomainPair
from cdtsde.mixfield import MixField
from cdtsde.schedules import NoiseSchedule, TimeGrid, make_spaced_grid, make_vp_schedule

__all__ = [
    "CDTError",
    "ConfigError",
    "ConstraintError",
    "DimensionError",
    "DomainPair",
    "FormatError",
    "MixField",
    "NoiseSchedule",
    "ParameterError",
    "ScheduleError",
    "SingularityError",
    "TimeGrid",
    "TrainingError",
    "make_spaced_grid",
    "make_vp_schedule",
]
