import os
from pathlib import Path

from django.conf import settings

DATA_DIR = Path(__file__).resolve().parent / "data"

OUTPUT_DIR_ENV = "DJ_PROBATION_SIM_OUTPUT_DIR"

DEFAULTS = {
    "OUTPUT_DIR": "probation_runs",
    "WORKERS": 1,
    "REPLICATIONS": 20,
    "COEFFICIENTS_PATH": str(DATA_DIR / "coefficients.csv"),
    "COHORT_PATH": str(DATA_DIR / "cohort.csv"),
    # Numeric bounds (years) used when drawing an initial age inside a category.
    "AGE_CATEGORY_BOUNDS": {
        1: (16.0, 20.0),
        2: (20.0, 25.0),
        3: (25.0, 30.0),
        4: (30.0, 40.0),
        5: (40.0, 50.0),
        6: (50.0, 65.0),
    },
    "POLICY_MAP": None,
    "POLICY_EXTENSIONS": {},
    "CI_LEVEL": 0.95,
    "MIN_REPLICATIONS_FOR_CI": 2,
    "SHORT_WINDOW": 30,
    "LONG_WINDOW": 20,
    "STATIONARITY_EPISODES": 100,
}


def get_config(key=None):
    # Worker processes may import the simulation without a configured project.
    if settings.configured or os.environ.get("DJANGO_SETTINGS_MODULE"):
        user_config = getattr(settings, "DJ_PROBATION_SIM_SETTINGS", {})
    else:
        user_config = {}
    if key is None:
        return user_config
    return user_config.get(key, DEFAULTS[key])


def get_output_dir(override=None):
    """
    Resolve the directory run artifacts are written to.

    Precedence: explicit override, the DJ_PROBATION_SIM_OUTPUT_DIR environment
    variable, then the OUTPUT_DIR setting.
    """
    if override:
        return Path(override)
    env_value = os.environ.get(OUTPUT_DIR_ENV)
    if env_value:
        return Path(env_value)
    return Path(get_config("OUTPUT_DIR"))
