"""Run configuration: a flat INI file with one section per concern.

Every key is known in advance; unknown sections or keys are rejected, and
``dumps(loads(text))`` reproduces a canonical file byte for byte.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from importlib import resources

from .optimize import ConvergenceRule, MultiresSchedule, PipelineConfig

MODALITIES = ("darkfield", "attenuation")
BAND_RULES = ("equal-rows",)


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.replace(",", " ").split())


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.replace(",", " ").split())


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# field name -> (section, key, parser)
_SCHEMA = {
    "modality": ("run", "modality", str),
    "seed": ("run", "seed", int),
    "output_dir": ("run", "output_dir", str),
    "workers": ("run", "workers", int),
    "pad_size": ("preprocessing", "pad_size", int),
    "target_size": ("preprocessing", "target_size", int),
    "shift_px": ("preprocessing", "shift_px", int),
    "pyramid_levels": ("preprocessing", "pyramid_levels", int),
    "smoothing_sigma": ("preprocessing", "smoothing_sigma", float),
    "normalize": ("preprocessing", "normalize", _bool),
    "stride": ("registration", "stride", int),
    "alpha": ("registration", "alpha", float),
    "kernels": ("registration", "kernels", _ints),
    "learning_rate": ("registration", "learning_rate", float),
    "max_steps": ("registration", "max_steps", int),
    "window": ("registration", "window", int),
    "threshold_factor": ("registration", "threshold_factor", float),
    "epsilon_var": ("registration", "epsilon_var", float),
    "sweep_alphas": ("registration", "sweep_alphas", _floats),
    "sweep_strides": ("registration", "sweep_strides", _ints),
    "affine_steps": ("affine", "steps", _ints),
    "affine_learning_rate": ("affine", "learning_rate", float),
    "roi_dilation": ("affine", "roi_dilation", int),
    "roi_concavity": ("affine", "roi_concavity", float),
    "metric_overlap": ("metrics", "overlap", _bool),
    "metric_surface": ("metrics", "surface", _bool),
    "metric_landmarks": ("metrics", "landmarks", _bool),
    "metric_jacobian": ("metrics", "jacobian", _bool),
    "ratio_floor": ("analysis", "floor", float),
    "huber_delta": ("analysis", "huber_delta", float),
    "band_rule": ("analysis", "band_rule", str),
    "weighted_cc": ("analysis", "weighted_cc", _bool),
}


@dataclass(frozen=True)
class RunConfig:
    modality: str = "darkfield"
    seed: int = 0
    output_dir: str = ""
    workers: int = 1
    pad_size: int = 0
    target_size: int = 256
    shift_px: int = 0
    pyramid_levels: int = 4
    smoothing_sigma: float = 1.0
    normalize: bool = True
    stride: int = 10
    alpha: float = 100.0
    kernels: tuple[int, ...] = (11, 21, 41, 81)
    learning_rate: float = 1e-4
    max_steps: int = 3500
    window: int = 200
    threshold_factor: float = 1e-3
    epsilon_var: float = 1e-5
    sweep_alphas: tuple[float, ...] = (1.0, 100.0, 200.0, 500.0)
    sweep_strides: tuple[int, ...] = (8, 9, 10)
    affine_steps: tuple[int, ...] = (800, 50, 50, 50)
    affine_learning_rate: float = 1e-3
    roi_dilation: int = 25
    roi_concavity: float = 300.0
    metric_overlap: bool = True
    metric_surface: bool = True
    metric_landmarks: bool = True
    metric_jacobian: bool = True
    ratio_floor: float = 1e-15
    huber_delta: float = 1.35
    band_rule: str = "equal-rows"
    weighted_cc: bool = False

    def validate(self) -> "RunConfig":
        problems = []
        if self.modality not in MODALITIES:
            problems.append(f"modality must be one of {MODALITIES}")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        if self.pyramid_levels < 1:
            problems.append("pyramid_levels must be >= 1")
        if self.target_size % 2 ** (self.pyramid_levels - 1):
            problems.append("target_size must be divisible by 2**(pyramid_levels - 1)")
        if self.pad_size < 0:
            problems.append("pad_size must be >= 0 (0 means the larger image side)")
        if self.smoothing_sigma < 0:
            problems.append("smoothing_sigma must be >= 0")
        if self.stride < 1 or any(s < 1 for s in self.sweep_strides):
            problems.append("strides must be >= 1")
        if self.alpha < 0 or any(a < 0 for a in self.sweep_alphas):
            problems.append("alpha must be >= 0")
        if len(self.kernels) != self.pyramid_levels:
            problems.append("one LNCC kernel per pyramid level required")
        if any(k < 1 or k % 2 == 0 for k in self.kernels):
            problems.append("LNCC kernels must be positive odd integers")
        if any(k > self.target_size // 2 ** (self.pyramid_levels - 1 - i)
               for i, k in enumerate(self.kernels)):
            problems.append("an LNCC kernel exceeds its pyramid level size")
        if len(self.affine_steps) != self.pyramid_levels or any(s < 0 for s in self.affine_steps):
            problems.append("one non-negative affine step count per pyramid level required")
        for name in ("learning_rate", "affine_learning_rate", "threshold_factor", "epsilon_var",
                     "ratio_floor", "huber_delta", "roi_concavity"):
            if not getattr(self, name) > 0:
                problems.append(f"{name} must be positive")
        if self.window < 1 or self.max_steps < 1:
            problems.append("window and max_steps must be >= 1")
        if self.roi_dilation < 0:
            problems.append("roi_dilation must be >= 0")
        if self.band_rule not in BAND_RULES:
            problems.append(f"band_rule must be one of {BAND_RULES}")
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def schedule(self) -> MultiresSchedule:
        return MultiresSchedule(
            levels=self.pyramid_levels, kernels=self.kernels,
            learning_rates=(self.learning_rate,) * self.pyramid_levels,
            rule=ConvergenceRule(self.window, self.threshold_factor, self.max_steps),
            stride=self.stride, alpha=self.alpha, sigma=self.smoothing_sigma,
            normalize=self.normalize)

    def pipeline(self) -> PipelineConfig:
        sched = self.schedule()
        return PipelineConfig(darkfield=sched, attenuation=sched, affine_steps=self.affine_steps,
                              affine_lr=self.affine_learning_rate, roi_dilation=self.roi_dilation,
                              roi_concavity=self.roi_concavity, epsilon_var=self.epsilon_var)


def loads(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    known = {(sec, key): name for name, (sec, key, _) in _SCHEMA.items()}
    sections = {sec for sec, _ in known}
    values = {}
    for section in parser.sections():
        if section not in sections:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in parser.items(section):
            name = known.get((section, key))
            if name is None:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
            try:
                values[name] = _SCHEMA[name][2](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r}") from exc
    return RunConfig(**values).validate()


def dumps(config: RunConfig) -> str:
    lines = []
    current = None
    for f in fields(RunConfig):
        section, key, _ = _SCHEMA[f.name]
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{key} = {_fmt(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read())


DARKFIELD_DEFAULT = RunConfig()
ATTENUATION_DEFAULT = replace(RunConfig(), modality="attenuation", alpha=80.0, kernels=(5, 11, 21, 41))


def default_config_text(modality: str) -> str:
    """Text of a shipped default configuration file."""
    if modality not in MODALITIES:
        raise ConfigError(f"unknown modality {modality!r}")
    return resources.files("lungwarp").joinpath("configs").joinpath(f"{modality}.ini").read_text(encoding="utf-8")


def default_config(modality: str = "darkfield") -> RunConfig:
    return loads(default_config_text(modality))
