"""Robust drive-cycle-aware design of the rotor magnet of a PM synchronous machine."""
import json
import os

with open(os.path.join(os.path.dirname(__file__), "manifest.json"), encoding="utf-8") as _fh:
    __version__ = json.load(_fh)["version"]

from .config import ConfigError, RunConfig, parse_config, parse_config_text
from .cycle import CycleError, DrivingCycle, VehicleParams, CycleScenarioParams, udc_reference
from .fem import FemError, GeometryError, PoleGeometry, build_reference_mesh, precompute_affine
from .machine import DqParams, MachineError, cycle_efficiency, extract_dq
from .robust import MachineModel, RobustError, RobustSpec, make_scenario, optimize
from .sparsegrid import SparseGridError, smolyak
from .sqp import SqpError, SqpOptions, sqp_solve
