#
# config.py
# Numeric tolerances and run defaults shared by every module.

from dataclasses import dataclass, field, asdict
from typing import Optional

import numpy as np

VERSION = "0.3.0"

DEFAULT_HORIZON = 1.0
DEFAULT_STEPS = 1024
DEFAULT_PATHS = 100_000
DEFAULT_SEED = 0
DEFAULT_TAU = 1e-2
DEFAULT_CHUNK = 512
DEFAULT_DB_PATH = "./db/ibp_runs.sqlite3"

# step for central differences: eps^(1/3) balances truncation and rounding
FD_STEP = float(np.finfo(float).eps ** (1.0 / 3.0))
# outer step for nested differences (curvature)
FD_OUTER_STEP = float(np.finfo(float).eps ** (1.0 / 4.0))

CHECKS = (
    "eq4",
    "eq5",
    "eq9",
    "girsanov",
    "tau-derivative",
    "conditional",
    "geometry-ricci",
    "geometry-connection",
    "compose",
)


@dataclass(frozen=True)
class Tolerances:
    projector: float = 1e-10
    tangency: float = 1e-9
    membership: float = 1e-9
    section_residual: float = 1e-6
    rank_threshold: float = 1e-8
    # singular values in (rank_threshold, rank_gap] * s_max are ambiguous
    rank_gap: float = 1e-5
    pseudo_inverse: float = 1e-10
    analytic_override: float = 1e-6
    gradient_oracle: float = 1e-6
    z_threshold: float = 3.0
    closed_form_allowance: float = 0.01
    bias_allowance: float = 0.01
    ricci: float = 1e-3
    connection: float = 1e-5
    compose_ratio: float = 1.3


TOLERANCES = Tolerances()


@dataclass
class RunConfig:
    scenario: str
    check: str
    # None means "not given": resolved from the check defaults, then DEFAULT_*
    horizon: Optional[float] = None
    steps: Optional[int] = None
    paths: Optional[int] = None
    seed: Optional[int] = None
    tau: Optional[float] = None
    functional: Optional[str] = None
    path: Optional[str] = None
    variant: str = "eq8"
    curvature: str = "christoffel"
    workers: int = 1
    chunk_size: int = DEFAULT_CHUNK
    out: Optional[str] = None
    dump_samples: Optional[str] = None
    db: Optional[str] = None
    freeze_clock: bool = False
    defaults_applied: list = field(default_factory=list)

    def params(self):
        """Parameters echoed into the report."""
        data = asdict(self)
        for key in ("scenario", "check", "out", "dump_samples", "db", "freeze_clock", "defaults_applied"):
            data.pop(key)
        data["defaults_applied"] = sorted(self.defaults_applied)
        return data
