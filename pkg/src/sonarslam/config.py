"""Pipeline tunables and their plain-text ``key = value`` file format."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .posegraph import SolverConfig
from .registration import RegConfig

__all__ = ["PipelineConfig", "ConfigError", "parse_config", "load_config", "format_config"]


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    # oriented surface points / registration
    r: float = 0.5
    reg_tol: float = 1e-4
    reg_max_iters: int = 50
    reg_min_match: float = 0.3
    reg_epsilon: float = 1e-3
    reg_degeneracy_ratio: float = 1e-3
    # information attached to registration factors
    reg_min_sigma_trans: float = 0.02
    reg_sigma_rot_deg: float = 0.5
    # odometry-only fallback edges
    odom_sigma_trans: float = 0.05
    odom_sigma_rot_deg: float = 1.0
    # anchoring priors
    prior_sigma_trans: float = 1e-4
    prior_sigma_rot_deg: float = 1e-3
    # submaps
    overlap_thresh: float = 0.3
    max_submap_frames: int = 400
    # frames between refreshes of the submap's registration target features
    submap_target_refresh: int = 5
    voxel_size: float = 0.1
    truncation: float = 0.3
    # loop closures
    lc_overlap: float = 0.5
    lc_overlap_query: str = "new"
    lc_error_thresh: float = 0.0  # 0 selects the adaptive threshold
    lc_error_factor: float = 4.0
    lc_error_floor: float = 1e-4
    # pose graph solver
    solver_lambda_init: float = 1e-4
    solver_max_iters: int = 100
    solver_step_tol: float = 1e-8
    # global map
    global_voxel_size: float = 0.1
    interpolation: str = "trilinear"
    reprocess_trans: float = 0.01
    reprocess_rot_deg: float = 0.1

    def __post_init__(self):
        for name in ("r", "voxel_size", "truncation", "global_voxel_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.overlap_thresh <= 1 or not 0 <= self.lc_overlap <= 1:
            raise ConfigError("overlap thresholds must lie in [0, 1]")
        if self.interpolation not in ("trilinear", "nearest"):
            raise ConfigError("interpolation must be 'trilinear' or 'nearest'")
        if self.lc_overlap_query not in ("new", "old"):
            raise ConfigError("lc_overlap_query must be 'new' or 'old'")
        if self.submap_target_refresh < 1:
            raise ConfigError("submap_target_refresh must be at least 1")
        if self.max_submap_frames < 2:
            raise ConfigError("max_submap_frames must be at least 2")

    @property
    def registration(self) -> RegConfig:
        return RegConfig(self.reg_tol, self.reg_max_iters, self.reg_min_match, self.reg_epsilon, self.reg_degeneracy_ratio)

    @property
    def solver(self) -> SolverConfig:
        return SolverConfig(lambda_init=self.solver_lambda_init, max_iters=self.solver_max_iters,
                            step_tol=self.solver_step_tol)

    def with_overrides(self, **kw) -> "PipelineConfig":
        unknown = set(kw) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return replace(self, **kw)


def parse_config(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    types = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        try:
            values[key] = types[key](val)
        except ValueError:
            raise ConfigError(f"line {lineno}: bad value for {key}: {val!r}") from None
    return replace(base, **values)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    try:
        return parse_config(text)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def format_config(cfg: PipelineConfig) -> str:
    """Resolved configuration in the same format :func:`parse_config` reads."""
    return "".join(f"{k} = {v!r}\n" if isinstance(v, float) else f"{k} = {v}\n" for k, v in asdict(cfg).items())
