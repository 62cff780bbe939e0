"""Command line entry point: pm-robopt <command> --config <path> [--out] [--seed] [--workers]."""
import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import replace

import numpy as np

from . import __version__
from .const import *
from .config import CONF_SOLVER, ConfigError, parse_config, resolve_output_dir, validate_section, write_snapshot
from .cycle import (
    CycleError,
    apply_sample,
    heatmap_bins,
    nominal_sample,
    udc_reference,
    write_cycle_csv,
    write_heatmap_csv,
)
from .fem import FemError, write_mesh_csv
from .machine import (
    MachineError,
    efficiency_difference,
    efficiency_map,
    trajectory_overlay,
    write_efficiency_map_csv,
    write_trajectory_csv,
)
from .robust import (
    MachineModel,
    RobustError,
    RobustSpec,
    cross_validate,
    default_targets,
    make_scenario,
    monte_carlo_validate,
    optimize,
    write_crossval_csv,
    write_validation_csv,
)
from .sparsegrid import SparseGridError, table1_rows
from .sqp import SqpError, SqpOptions, write_trace_csv

_LOGGER = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
DOMAIN_ERRORS = (ConfigError, CycleError, FemError, MachineError, SparseGridError, SqpError, RobustError)

HEATMAP_BINS = 20
HEATMAP_DT = 0.1


class RunManifest:
    """Снимок конфигурации, время этапов и контрольные суммы файлов"""

    def __init__(self, command, config, out_dir):
        self.command = command
        self.config = config
        self.out_dir = out_dir
        self.stages = []
        self.files = []
        self.failed_stage = None
        self.error = None

    def add_file(self, path):
        if path not in self.files:
            self.files.append(path)
        return path

    def fail(self, stage, seconds, error):
        self.stages.append({"name": stage, "seconds": seconds, "status": "failed"})
        self.failed_stage = stage
        self.error = error

    def as_dict(self):
        inventory = []
        for path in self.files:
            with open(path, "rb") as fh:
                digest = hashlib.sha256(fh.read()).hexdigest()
            inventory.append({"path": os.path.relpath(path, self.out_dir), "sha256": digest})
        return {
            "version": __version__,
            "command": self.command,
            "config": {name: self.config.section(name) for name in ("geometry", "materials", "vehicle",
                                                                    "scenario", "solver", "output")},
            "stages": self.stages,
            "files": inventory,
            "failed_stage": self.failed_stage,
            "error": self.error,
        }

    def write(self):
        path = os.path.join(self.out_dir, MANIFEST_NAME)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2, sort_keys=True)
        return path


class Pipeline:
    """Этапы расчёта с общими моделью и целями"""

    def __init__(self, config, out_dir, manifest):
        self.config = config
        self.out_dir = out_dir
        self.manifest = manifest
        self.cycle = udc_reference()
        self.vehicle = config.vehicle_params
        self.params = config.scenario_params
        self._model = None
        self._spec = None
        self.designs = {}

    @property
    def seed(self):
        return self.config.solver["seed"]

    @property
    def workers(self):
        return self.config.solver["workers"]

    def _path(self, name):
        return self.manifest.add_file(os.path.join(self.out_dir, name))

    @property
    def model(self):
        if self._model is None:
            m = self.config.materials
            self._model = MachineModel(self.config.pole_geometry, self.config.fem_materials,
                                       refinement=self.config.refinement, rst=m["rst"],
                                       i_max=m["i_max"], i_test=m["i_test"])
            if m["i_max"] == 0:
                self._model.calibrate(self.cycle, self.vehicle, m["i_max_margin"], self.config.p_init, self.params)
        return self._model

    @property
    def spec(self):
        if self._spec is None:
            s = self.config.solver
            e_d, m_max_d = s["e_d"], s["m_max_d"]
            if e_d == 0 or m_max_d == 0:
                e_auto, m_auto = default_targets(self.model, self.cycle, self.vehicle, self.config.p_init,
                                                 s["quad_order"], s["efficiency_mode"])
                e_d = e_d or e_auto
                m_max_d = m_max_d or m_auto
            p_min, p_max = self.config.p_bounds
            self._spec = RobustSpec(
                e_d=e_d, m_max_d=m_max_d, lam=s["lambda"], p_min=p_min, p_max=p_max,
                delta_p=(self.config.scenario["delta_p"],) * 3, quad_order=s["quad_order"],
                mode=s["efficiency_mode"], sg_level=s["sg_level"], fd_step=s["fd_step"],
            )
        return self._spec

    def scenario(self, kind):
        return make_scenario(kind, self.cycle, self.vehicle, self.params, self.config.scenario["delta_p"])

    def stage_cycle(self):
        write_cycle_csv(self.cycle, self._path("udc.csv"))
        rng = np.random.default_rng(self.seed)
        for kind in (SCENARIO_A, SCENARIO_B, SCENARIO_AB):
            scenario = self.scenario(kind)
            sample = nominal_sample(self.params)
            sample = sample._replace(
                v_shifts=tuple(rng.uniform(-1, 1, len(sample.v_shifts))),
                t_shifts=tuple(rng.uniform(-1, 1, len(sample.t_shifts))),
            )
            perturbed = apply_sample(self.cycle, self.params, sample, scenario.vertical, scenario.horizontal)
            write_cycle_csv(perturbed, self._path(f"cycle_{kind.replace('+', '')}.csv"))
        heatmap = heatmap_bins(self.cycle, self.vehicle, self.vehicle.crr_dry, self.vehicle.cd_dry,
                               HEATMAP_BINS, HEATMAP_BINS, HEATMAP_DT)
        write_heatmap_csv(heatmap, self._path("heatmap.csv"))

    def stage_table1(self):
        path = self._path("table1.csv")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("d,full,sparse\n")
            for row in table1_rows():
                fh.write(f"{row.dimension},{row.full},{row.sparse}\n")

    def stage_solve_machine(self):
        model = self.model
        write_mesh_csv(model.mesh, self.out_dir)
        self._path("nodes.csv")
        self._path("tris.csv")
        dq = model.dq(self.config.p_init)
        with open(self._path("dq.json"), "w", encoding="utf-8") as fh:
            json.dump({k: FLOAT_FORMAT.format(v) if isinstance(v, float) else v for k, v in dq.as_dict().items()},
                      fh, indent=2, sort_keys=True)
        write_efficiency_map_csv(efficiency_map(dq), self._path("efficiency_map.csv"))
        rows = trajectory_overlay(dq, self.cycle, self.vehicle, self.vehicle.crr_dry, self.vehicle.cd_dry)
        write_trajectory_csv(rows, self._path("trajectory.csv"))

    def _options(self):
        s = self.config.solver
        return SqpOptions(tol=s["sqp_tol"], feas_tol=s["sqp_feas_tol"], max_iter=s["sqp_max_iter"])

    def _optimize(self, kind):
        result = optimize(self.spec, self.scenario(kind), self.model, self.config.p_init,
                          self._options(), workers=self.workers)
        self.designs[kind] = tuple(float(v) for v in result.x_star)
        return result

    def stage_optimize(self):
        kind = self.config.scenario["kind"]
        result = self._optimize(kind)
        write_trace_csv(result.trace, self._path("trace.csv"))
        optimum = {
            "scenario": kind,
            "p": [FLOAT_FORMAT.format(v) for v in result.x_star],
            "area": FLOAT_FORMAT.format(result.x_star[0] * result.x_star[1]),
            "f_star": FLOAT_FORMAT.format(result.f_star),
            "status": result.status,
            "iterations": result.iterations,
            "e_d": FLOAT_FORMAT.format(self.spec.e_d),
            "m_max_d": FLOAT_FORMAT.format(self.spec.m_max_d),
        }
        with open(self._path("optimum.json"), "w", encoding="utf-8") as fh:
            json.dump(optimum, fh, indent=2, sort_keys=True)
        # eps_opt - eps_0 на карте (I, omega)
        diff = efficiency_difference(self.model.dq(result.x_star), self.model.dq(self.config.p_init))
        write_efficiency_map_csv(diff, self._path("efficiency_diff.csv"), column="deff")

    def stage_validate(self):
        kind = self.config.scenario["kind"]
        label = kind if kind in self.designs else "initial"
        p_bar = self.designs.get(kind, self.config.p_init)
        report = monte_carlo_validate(p_bar, self.spec, self.scenario(kind), self.model,
                                      self.config.solver["n_mc"], self.seed, self.workers, design=label)
        write_validation_csv([report], self._path("validation.csv"))

    def stage_crossval(self):
        for kind in SCENARIOS:
            if kind not in self.designs:
                self._optimize(kind)
        uncertain = [self.scenario(kind) for kind in SCENARIOS if kind != SCENARIO_NOMINAL]
        matrix = cross_validate(self.designs, uncertain, self.spec, self.model,
                                self.config.solver["n_mc"], self.seed, self.workers)
        write_crossval_csv(matrix, self.designs, self._path("crossval.csv"))
        reports = [report for row in matrix.values() for report in row.values()]
        write_validation_csv(reports, self._path("crossval_reports.csv"))


STAGES = {
    "cycle": ("cycle",),
    "table1": ("table1",),
    "solve-machine": ("solve_machine",),
    "optimize": ("optimize",),
    "validate": ("validate",),
    "crossval": ("crossval",),
    "all": ("cycle", "table1", "solve_machine", "optimize", "validate", "crossval"),
}


def run_command(config, command, out_dir):
    """Выполнение команды; манифест пишется всегда. Возвращает код выхода"""
    if command not in STAGES:
        raise ConfigError(f"Unknown command '{command}', expected one of {list(STAGES)}")
    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(command, config, out_dir)
    manifest.add_file(write_snapshot(config, out_dir))
    pipeline = Pipeline(config, out_dir, manifest)
    status = 0
    for stage in STAGES[command]:
        started = time.perf_counter()
        _LOGGER.info(f"▶️ Run: stage {stage}")
        try:
            getattr(pipeline, f"stage_{stage}")()
        except DOMAIN_ERRORS as ex:
            _LOGGER.error(f"❌ Run: stage {stage} failed: {ex}")
            manifest.fail(stage, time.perf_counter() - started, str(ex))
            status = 1
            break
        except Exception as ex:
            _LOGGER.exception(f"❌ Run: stage {stage} crashed: {ex}")
            manifest.fail(stage, time.perf_counter() - started, f"{type(ex).__name__}: {ex}")
            status = 1
            break
        manifest.stages.append({"name": stage, "seconds": time.perf_counter() - started, "status": "ok"})
    manifest.files = [path for path in manifest.files if os.path.exists(path)]
    manifest.write()
    if status == 0:
        _LOGGER.info(f"✅ Run: {command} finished, outputs in {out_dir}")
    return status


def build_parser():
    parser = argparse.ArgumentParser(prog="pm-robopt", description="Robust drive-cycle-aware PM machine design")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", required=True, help="INI configuration file")
    parser.add_argument("--out", help=f"output directory (overrides ${ENV_OUTPUT_DIR} and [output] dir)")
    parser.add_argument("--seed", type=int, help="random seed")
    parser.add_argument("--workers", type=int, help="worker threads")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        config = parse_config(args.config)
        solver = dict(config.solver)
        if args.seed is not None:
            solver["seed"] = args.seed
        if args.workers is not None:
            solver["workers"] = args.workers
        if solver != config.solver:
            config = replace(config, solver=validate_section(CONF_SOLVER, solver))
    except ConfigError as ex:
        print(f"pm-robopt: {ex}", file=sys.stderr)
        return 2
    out_dir = resolve_output_dir(config, args.out)
    return run_command(config, args.command, out_dir)
