"""Constants for PM-RobOpt."""
from math import pi, sqrt

DOMAIN = "pm_robopt"
FRIENDLY_NAME = "PM-RobOpt"

# Переменная окружения для каталога результатов
ENV_OUTPUT_DIR = "PM_ROBOPT_OUT"

MU0 = 4e-7 * pi
NU0 = 1.0 / MU0

# Опорный цикл UDC: (t, v) в с и м/с
UDC_POINTS = (
    (0.0, 0.0), (11.0, 0.0), (15.0, 4.16), (23.0, 4.16),
    (28.0, 0.0), (49.0, 0.0), (61.0, 8.88), (85.0, 8.88),
    (96.0, 0.0), (117.0, 0.0), (143.0, 13.88), (155.0, 13.88),
    (163.0, 9.72), (176.0, 9.72), (188.0, 0.0), (195.0, 0.0),
)

# Индексы контрольных точек (с нуля) для сценариев A и B
VERTICAL_INDICES = (2, 3, 6, 7, 10, 11, 12, 13)
HORIZONTAL_INDICES = (2, 6, 10, 12)

# Отклонения по умолчанию
DEFAULT_DELTA_V = 0.2
DEFAULT_ALPHA = 0.78
DEFAULT_DELTA_RR = 1.3
DEFAULT_DELTA_D = 1.2
DEFAULT_DELTA_P = 0.2  # мм

# Калиброванное транспортное средство: omega_m / v = 79.66 об/мин на м/с
DEFAULT_MASS = 8.0
DEFAULT_WHEEL_RADIUS = 0.3
DEFAULT_GEAR_RATIO = 2.5026
DEFAULT_FRONTAL_AREA = 0.4434
DEFAULT_AIR_DENSITY = 1.2
DEFAULT_GRAVITY = 9.81
DEFAULT_CRR_DRY = 0.01654
DEFAULT_CD_DRY = 0.3

RPM_PER_RAD_S = 30.0 / pi

# Шаблон полюса (развёрнутый), размеры в метрах
DEFAULT_NPP = 3
DEFAULT_PHASES = 3
DEFAULT_SHAFT_RADIUS = 0.015
DEFAULT_ROTOR_RADIUS = 0.045
DEFAULT_AIR_GAP = 0.001
DEFAULT_SLOT_DEPTH = 0.012
DEFAULT_STATOR_OUTER_RADIUS = 0.071
DEFAULT_SLOT_FILL = 0.5
DEFAULT_LENGTH = 0.05
DEFAULT_TURNS = 10

# Пазы одного полюса: (фаза, направление)
DEFAULT_SLOT_LAYOUT = (("u", 1), ("w", -1), ("v", 1))

# Окно деформации вокруг магнита (м)
DEFAULT_WINDOW_HALF_WIDTH = 0.010
DEFAULT_WINDOW_BOTTOM = 0.003
DEFAULT_WINDOW_TOP_BRIDGE = 0.001
DEFAULT_FIT_MARGIN = 0.5  # мм

# Начальная геометрия магнита (мм), S0 = 133 мм^2
DEFAULT_P = (10.0, 13.3, 3.0)
DEFAULT_P_MIN = (2.0, 1.0, 1.6)
DEFAULT_P_MAX = (18.0, 24.0, 12.0)

# Материалы
DEFAULT_MU_IRON = 1000.0
DEFAULT_MU_PM = 1.05
DEFAULT_BR = 1.2
DEFAULT_RST = 0.02
DEFAULT_I_TEST = 1.0
DEFAULT_I_MAX_MARGIN = 1.25

# Теги областей сетки
REGION_ROTOR = "rotor"
REGION_STATOR = "stator"
REGION_AIR = "air"
REGION_BARRIER = "barrier"
REGION_PM = "pm"
REGION_SLOT = "slot"

# Теги границ
BOUNDARY_STATOR = "stator"
BOUNDARY_SHAFT = "shaft"
BOUNDARY_LEFT = "left"
BOUNDARY_RIGHT = "right"

PHASES = ("u", "v", "w")

# Уровень измельчения и базовый шаг сетки
DEFAULT_REFINEMENT = 0
DEFAULT_MESH_STEP = 0.002
DEFAULT_BLOCK_CELLS = 3
SOLVER_RESIDUAL_TOL = 1e-10

# Решатели
DEFAULT_SG_LEVEL = 3
DEFAULT_QUAD_ORDER = 4
DEFAULT_LAMBDA = 1.0
DEFAULT_N_MC = 10000
DEFAULT_SEED = 20190101
DEFAULT_WORKERS = 1
DEFAULT_DQ_CACHE_SIZE = 4096
DEFAULT_GRID_BUDGET = 1_000_000
DEFAULT_FD_STEP = 1e-4  # мм

DEFAULT_SQP_TOL = 1e-8
DEFAULT_SQP_FEAS_TOL = 1e-8
DEFAULT_SQP_MAX_ITER = 200
DEFAULT_ARMIJO_FACTOR = 0.5
ARMIJO_ETA = 1e-4
POWELL_DAMPING = 0.2

# Режимы КПД
EFFICIENCY_SIGNED = "signed"
EFFICIENCY_MOTORING = "motoring"

# Сценарии
SCENARIO_NOMINAL = "nominal"
SCENARIO_A = "A"
SCENARIO_B = "B"
SCENARIO_AB = "A+B"
SCENARIO_C = "C"
SCENARIOS = (SCENARIO_NOMINAL, SCENARIO_A, SCENARIO_B, SCENARIO_AB, SCENARIO_C)

# Статусы SQP
STATUS_CONVERGED = "converged"
STATUS_MAX_ITER = "max-iter"
STATUS_INFEASIBLE = "infeasible"
STATUS_LINE_SEARCH_FAILURE = "line-search-failure"
STATUS_QP_FAILURE = "qp-failure"

# Команды CLI
COMMANDS = ("cycle", "table1", "solve-machine", "optimize", "validate", "crossval", "all")

# Размерности таблицы числа вычислений
TABLE1_DIMENSIONS = (5, 7, 11, 15)
TABLE1_POINTS_PER_DIM = 5

# Формат чисел в CSV (17 значащих цифр)
FLOAT_FORMAT = "{:.17g}"

SQRT2 = sqrt(2.0)
