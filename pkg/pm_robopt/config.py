"""Run configuration: sectioned INI file validated with voluptuous."""
import configparser
import logging
import os
from dataclasses import dataclass

import voluptuous as vol

from .const import *
from .cycle import CycleError, CycleScenarioParams, VehicleParams
from .fem import FemError, PoleGeometry, default_materials

_LOGGER = logging.getLogger(__name__)

CONF_GEOMETRY = "geometry"
CONF_MATERIALS = "materials"
CONF_VEHICLE = "vehicle"
CONF_SCENARIO = "scenario"
CONF_SOLVER = "solver"
CONF_OUTPUT = "output"
SECTIONS = (CONF_GEOMETRY, CONF_MATERIALS, CONF_VEHICLE, CONF_SCENARIO, CONF_SOLVER, CONF_OUTPUT)

SNAPSHOT_NAME = "config.snapshot.ini"

_positive = vol.All(vol.Coerce(float), vol.Range(min=0, min_included=False))
_non_negative = vol.All(vol.Coerce(float), vol.Range(min=0))
_count = vol.All(vol.Coerce(int), vol.Range(min=1))
_fraction = vol.All(vol.Coerce(float), vol.Range(min=0, max=1, min_included=False, max_included=False))
_factor = vol.All(vol.Coerce(float), vol.Range(min=1))

GEOMETRY_SCHEMA = vol.Schema({
    vol.Required("shaft_radius", default=DEFAULT_SHAFT_RADIUS): _positive,
    vol.Required("rotor_radius", default=DEFAULT_ROTOR_RADIUS): _positive,
    vol.Required("air_gap", default=DEFAULT_AIR_GAP): _positive,
    vol.Required("slot_depth", default=DEFAULT_SLOT_DEPTH): _positive,
    vol.Required("stator_outer_radius", default=DEFAULT_STATOR_OUTER_RADIUS): _positive,
    vol.Required("npp", default=DEFAULT_NPP): _count,
    vol.Required("slot_fill", default=DEFAULT_SLOT_FILL): _fraction,
    vol.Required("length", default=DEFAULT_LENGTH): _positive,
    vol.Required("turns", default=DEFAULT_TURNS): _count,
    vol.Required("window_half_width", default=DEFAULT_WINDOW_HALF_WIDTH): _positive,
    vol.Required("window_bottom", default=DEFAULT_WINDOW_BOTTOM): _positive,
    vol.Required("window_top_bridge", default=DEFAULT_WINDOW_TOP_BRIDGE): _positive,
    vol.Required("fit_margin", default=DEFAULT_FIT_MARGIN): _non_negative,
    vol.Required("mesh_step", default=DEFAULT_MESH_STEP): _positive,
    vol.Required("block_cells", default=DEFAULT_BLOCK_CELLS): _count,
    vol.Required("refinement", default=DEFAULT_REFINEMENT): vol.All(vol.Coerce(int), vol.Range(min=0, max=4)),
    vol.Required("p1", default=DEFAULT_P[0]): _positive,
    vol.Required("p2", default=DEFAULT_P[1]): _positive,
    vol.Required("p3", default=DEFAULT_P[2]): _positive,
})

MATERIALS_SCHEMA = vol.Schema({
    vol.Required("mu_iron", default=DEFAULT_MU_IRON): _positive,
    vol.Required("mu_pm", default=DEFAULT_MU_PM): _positive,
    vol.Required("br", default=DEFAULT_BR): _positive,
    vol.Required("rst", default=DEFAULT_RST): _non_negative,
    vol.Required("i_test", default=DEFAULT_I_TEST): _positive,
    # 0 - подобрать по пику момента цикла
    vol.Required("i_max", default=0.0): _non_negative,
    vol.Required("i_max_margin", default=DEFAULT_I_MAX_MARGIN): _positive,
})

VEHICLE_SCHEMA = vol.Schema({
    vol.Required("mass", default=DEFAULT_MASS): _positive,
    vol.Required("wheel_radius", default=DEFAULT_WHEEL_RADIUS): _positive,
    vol.Required("gear_ratio", default=DEFAULT_GEAR_RATIO): _positive,
    vol.Required("frontal_area", default=DEFAULT_FRONTAL_AREA): _positive,
    vol.Required("air_density", default=DEFAULT_AIR_DENSITY): _positive,
    vol.Required("gravity", default=DEFAULT_GRAVITY): _positive,
    vol.Required("crr_dry", default=DEFAULT_CRR_DRY): _positive,
    vol.Required("cd_dry", default=DEFAULT_CD_DRY): _positive,
})

SCENARIO_SCHEMA = vol.Schema({
    vol.Required("kind", default=SCENARIO_C): vol.In(SCENARIOS),
    vol.Required("delta_v", default=DEFAULT_DELTA_V): vol.All(
        vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)),
    vol.Required("alpha", default=DEFAULT_ALPHA): _fraction,
    vol.Required("delta_rr", default=DEFAULT_DELTA_RR): _factor,
    vol.Required("delta_d", default=DEFAULT_DELTA_D): _factor,
    vol.Required("delta_p", default=DEFAULT_DELTA_P): _positive,
})

SOLVER_SCHEMA = vol.Schema({
    vol.Required("lambda", default=DEFAULT_LAMBDA): _non_negative,
    # 0 - цели по начальной геометрии и пику момента цикла
    vol.Required("e_d", default=0.0): vol.All(vol.Coerce(float), vol.Range(min=0, max=1, max_included=False)),
    vol.Required("m_max_d", default=0.0): _non_negative,
    vol.Required("sqp_tol", default=DEFAULT_SQP_TOL): _positive,
    vol.Required("sqp_feas_tol", default=DEFAULT_SQP_FEAS_TOL): _positive,
    vol.Required("sqp_max_iter", default=DEFAULT_SQP_MAX_ITER): _count,
    vol.Required("sg_level", default=DEFAULT_SG_LEVEL): vol.All(vol.Coerce(int), vol.Range(min=0, max=6)),
    vol.Required("quad_order", default=DEFAULT_QUAD_ORDER): vol.All(vol.Coerce(int), vol.Range(min=1, max=64)),
    vol.Required("n_mc", default=DEFAULT_N_MC): _count,
    vol.Required("seed", default=DEFAULT_SEED): vol.All(vol.Coerce(int), vol.Range(min=0, max=2 ** 64 - 1)),
    vol.Required("workers", default=DEFAULT_WORKERS): _count,
    vol.Required("efficiency_mode", default=EFFICIENCY_SIGNED): vol.In((EFFICIENCY_SIGNED, EFFICIENCY_MOTORING)),
    vol.Required("fd_step", default=DEFAULT_FD_STEP): _positive,
    vol.Required("p1_min", default=DEFAULT_P_MIN[0]): _positive,
    vol.Required("p2_min", default=DEFAULT_P_MIN[1]): _positive,
    vol.Required("p3_min", default=DEFAULT_P_MIN[2]): _positive,
    vol.Required("p1_max", default=DEFAULT_P_MAX[0]): _positive,
    vol.Required("p2_max", default=DEFAULT_P_MAX[1]): _positive,
    vol.Required("p3_max", default=DEFAULT_P_MAX[2]): _positive,
})

OUTPUT_SCHEMA = vol.Schema({
    vol.Required("dir", default="out"): vol.All(str, vol.Length(min=1)),
})

SCHEMAS = {
    CONF_GEOMETRY: GEOMETRY_SCHEMA,
    CONF_MATERIALS: MATERIALS_SCHEMA,
    CONF_VEHICLE: VEHICLE_SCHEMA,
    CONF_SCENARIO: SCENARIO_SCHEMA,
    CONF_SOLVER: SOLVER_SCHEMA,
    CONF_OUTPUT: OUTPUT_SCHEMA,
}


@dataclass(frozen=True)
class RunConfig:
    """Проверенная конфигурация запуска"""

    geometry: dict
    materials: dict
    vehicle: dict
    scenario: dict
    solver: dict
    output: dict

    def section(self, name):
        return getattr(self, name)

    @property
    def pole_geometry(self):
        g = dict(self.geometry)
        g.pop("refinement")
        p = (g.pop("p1"), g.pop("p2"), g.pop("p3"))
        return PoleGeometry(p=p, **g)

    @property
    def refinement(self):
        return self.geometry["refinement"]

    @property
    def fem_materials(self):
        m = self.materials
        return default_materials(mu_iron=m["mu_iron"], mu_pm=m["mu_pm"], br=m["br"])

    @property
    def vehicle_params(self):
        return VehicleParams(**self.vehicle)

    @property
    def scenario_params(self):
        s = self.scenario
        return CycleScenarioParams(delta_v=s["delta_v"], alpha=s["alpha"], delta_rr=s["delta_rr"], delta_d=s["delta_d"])

    @property
    def p_init(self):
        return (self.geometry["p1"], self.geometry["p2"], self.geometry["p3"])

    @property
    def p_bounds(self):
        s = self.solver
        return (s["p1_min"], s["p2_min"], s["p3_min"]), (s["p1_max"], s["p2_max"], s["p3_max"])

    @property
    def output_dir(self):
        return self.output["dir"]


def validate_section(name, values):
    try:
        return SCHEMAS[name](values)
    except vol.MultipleInvalid as ex:
        error = ex.errors[0]
        key = ".".join(str(part) for part in error.path) or "?"
        _LOGGER.error(f"❌ Config: [{name}] {key}: {error.msg}")
        raise ConfigError(f"[{name}] {key}: {error.msg}") from ex


def parse_config_text(text, source="<string>"):
    """Разбор текста конфигурации; все значения проверяются, неизвестные ключи запрещены"""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as ex:
        raise ConfigError(f"Cannot parse {source}: {ex}") from ex
    unknown = [name for name in parser.sections() if name not in SECTIONS]
    if unknown:
        raise ConfigError(f"Unknown config section(s) {unknown}, expected {list(SECTIONS)}")
    sections = {}
    for name in SECTIONS:
        values = dict(parser.items(name)) if parser.has_section(name) else {}
        sections[name] = validate_section(name, values)
    config = RunConfig(**sections)
    _check_invariants(config)
    return config


def _check_invariants(config):
    """Проверка ограничений модулей, которым принадлежат значения"""
    try:
        config.pole_geometry
        config.vehicle_params
        config.scenario_params
    except (FemError, CycleError) as ex:
        raise ConfigError(f"Invalid configuration: {ex}") from ex
    lower, upper = config.p_bounds
    for k, (lo, hi) in enumerate(zip(lower, upper)):
        if lo >= hi:
            raise ConfigError(f"[solver] p{k + 1}_min must be below p{k + 1}_max, got {lo} >= {hi}")


def parse_config(path):
    """Чтение и проверка файла конфигурации"""
    if not os.path.isfile(path):
        _LOGGER.error(f"❌ Config: file not found: {path}")
        raise ConfigError(f"Config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    config = parse_config_text(text, source=path)
    _LOGGER.info(f"✅ Config: loaded {path}")
    return config


def _format_value(value):
    if isinstance(value, float):
        return FLOAT_FORMAT.format(value)
    return str(value)


def config_to_ini(config):
    """Снимок конфигурации, который разбирается обратно в ту же RunConfig"""
    lines = []
    for name in SECTIONS:
        lines.append(f"[{name}]")
        for key, value in config.section(name).items():
            lines.append(f"{key} = {_format_value(value)}")
        lines.append("")
    return "\n".join(lines)


def write_snapshot(config, directory):
    path = os.path.join(directory, SNAPSHOT_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config_to_ini(config))
    return path


def resolve_output_dir(config, override=None):
    """Каталог результатов: --out, затем PM_ROBOPT_OUT, затем [output] dir"""
    if override:
        return override
    return os.environ.get(ENV_OUTPUT_DIR) or config.output_dir


class ConfigError(Exception):
    """Ошибка конфигурации"""
    pass
