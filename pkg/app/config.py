# app/config.py
import configparser
import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import Any, Dict, Mapping, Optional, Sequence, Tuple

from .services.contact_field import THETA_HIT_DEFAULT, ContactFieldParams
from .services.contact_optimizer import OptimizerParams
from .services.errors import ConfigError
from .services.kinematics import IkParams
from .services.pipeline import PlacementSpec
from .services.wrench_stability import StabilityParams

LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


@dataclass(frozen=True)
class RunConfig:
    # [assets]
    hand: str = ""
    object: str = ""
    object_scale: float = 1.0
    out: str = "output"
    cache_dir: str = ".grasp_cache"
    # [sampling]
    object_density: float = 40.0
    hand_density: float = 20.0
    probe_half_width: float = 0.01
    probe_depth: float = 0.005
    object_region_min: Optional[Tuple[float, float, float]] = None
    object_region_max: Optional[Tuple[float, float, float]] = None
    # [contact_field]
    n_configs: int = 4096
    box_width: float = 0.01
    patch_radius: float = 0.008
    codebook_size: int = 256
    theta_hit: float = THETA_HIT_DEFAULT
    points_per_patch: int = 16
    leaf_size: int = 4
    contact_links: Tuple[str, ...] = ()
    # [placement]
    placement: str = "canonical"
    canonical_center: Tuple[float, float, float] = (0.0, 0.0, 0.06)
    canonical_size: Tuple[float, float, float] = (0.08, 0.08, 0.08)
    static_probability: float = 0.3
    # [optimizer]
    k: int = 3
    outer: int = 8
    inner: int = 32
    sigma: float = 0.01
    # [stability]
    torque_weight: float = 10.0
    friction: float = 0.0
    epsilon: float = 0.05
    cold_iters: int = 64
    warm_iters: int = 8
    # [kinematics]
    beta: float = 0.01
    damping: float = 1e-4
    ik_iters: int = 30
    step_clamp: float = 0.2
    ik_tolerance: float = 1e-4
    finetune_iters: int = 3
    contact_tolerance: float = 0.003
    # [collision]
    margin: float = 0.002
    # [run]
    seed: int = 0
    batch: int = 64
    passes: int = 1
    workers: int = 1
    cache: bool = True
    export_obj: bool = False
    log_level: str = "INFO"

    def contact_field_params(self) -> ContactFieldParams:
        return ContactFieldParams(
            n_configs=self.n_configs,
            box_width=self.box_width,
            patch_radius=self.patch_radius,
            codebook_size=self.codebook_size,
            theta_hit=self.theta_hit,
            points_per_patch=self.points_per_patch,
            leaf_size=self.leaf_size,
            hand_density=self.hand_density,
        )

    def placement_spec(self) -> PlacementSpec:
        return PlacementSpec(
            mode=self.placement,
            box_center=self.canonical_center,
            box_size=self.canonical_size,
            static_probability=self.static_probability,
        )

    def optimizer_params(self) -> OptimizerParams:
        return OptimizerParams(
            outer=self.outer,
            inner=self.inner,
            sigma=self.sigma,
            torque_weight=self.torque_weight,
            friction=self.friction,
            epsilon=self.epsilon,
            cold_iters=self.cold_iters,
            warm_iters=self.warm_iters,
        )

    def stability_params(self) -> StabilityParams:
        return StabilityParams(
            torque_weight=self.torque_weight,
            friction=self.friction,
            epsilon=self.epsilon,
            cold_iters=self.cold_iters,
            warm_iters=self.warm_iters,
        )

    def ik_params(self) -> IkParams:
        return IkParams(
            beta=self.beta,
            damping=self.damping,
            iters=self.ik_iters,
            step_clamp=self.step_clamp,
            tolerance=self.ik_tolerance,
        )

    def to_flask(self) -> Dict[str, Any]:
        """Flask app.config 용 대문자 키"""
        return {name.upper(): value for name, value in dataclasses.asdict(self).items()}


# ========= Schema =========
SECTIONS: Dict[str, Tuple[str, ...]] = {
    "assets": ("hand", "object", "object_scale", "out", "cache_dir"),
    "sampling": ("object_density", "hand_density", "probe_half_width", "probe_depth",
                 "object_region_min", "object_region_max"),
    "contact_field": ("n_configs", "box_width", "patch_radius", "codebook_size", "theta_hit",
                      "points_per_patch", "leaf_size", "contact_links"),
    "placement": ("placement", "canonical_center", "canonical_size", "static_probability"),
    "optimizer": ("k", "outer", "inner", "sigma"),
    "stability": ("torque_weight", "friction", "epsilon", "cold_iters", "warm_iters"),
    "kinematics": ("beta", "damping", "ik_iters", "step_clamp", "ik_tolerance",
                   "finetune_iters", "contact_tolerance"),
    "collision": ("margin",),
    "run": ("seed", "batch", "passes", "workers", "cache", "export_obj", "log_level"),
}
FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
DEFAULTS = RunConfig()

# (하한, 상한, 하한 포함 여부)
RANGES: Dict[str, Tuple[float, float, bool]] = {
    "object_scale": (0.0, math.inf, False),
    "object_density": (0.0, math.inf, False),
    "hand_density": (0.0, math.inf, False),
    "probe_half_width": (0.0, math.inf, True),
    "probe_depth": (0.0, math.inf, True),
    "n_configs": (1, math.inf, True),
    "box_width": (0.0, math.inf, False),
    "patch_radius": (0.0, math.inf, False),
    "codebook_size": (1, 65536, True),
    "theta_hit": (-1.0, 1.0, True),
    "points_per_patch": (1, math.inf, True),
    "leaf_size": (1, math.inf, True),
    "static_probability": (0.0, 1.0, True),
    "k": (2, 5, True),
    "outer": (0, math.inf, True),
    "inner": (0, math.inf, True),
    "sigma": (0.0, math.inf, False),
    "torque_weight": (0.0, math.inf, True),
    "friction": (0.0, math.inf, True),
    "epsilon": (0.0, math.inf, False),
    "cold_iters": (1, math.inf, True),
    "warm_iters": (1, math.inf, True),
    "beta": (0.0, math.inf, False),
    "damping": (0.0, math.inf, True),
    "ik_iters": (0, math.inf, True),
    "step_clamp": (0.0, math.inf, False),
    "ik_tolerance": (0.0, math.inf, False),
    "finetune_iters": (0, math.inf, True),
    "contact_tolerance": (0.0, math.inf, False),
    "margin": (0.0, math.inf, True),
    "batch": (1, math.inf, True),
    "passes": (1, math.inf, True),
    "workers": (1, math.inf, True),
}
CHOICES = {
    "placement": ("canonical", "exhaustive"),
    "log_level": LOG_LEVELS,
}


def _convert(key: str, value: Any) -> Any:
    """문자열/파이썬 값을 필드 타입으로 변환"""
    default = getattr(DEFAULTS, key)
    try:
        if key in ("object_region_min", "object_region_max", "canonical_center", "canonical_size"):
            if value is None or (isinstance(value, str) and not value.strip()):
                if default is None:
                    return None
                raise ValueError("값이 비어 있습니다")
            items = value.replace(",", " ").split() if isinstance(value, str) else list(value)
            triple = tuple(float(v) for v in items)
            if len(triple) != 3:
                raise ValueError("3개의 숫자가 필요합니다")
            return triple
        if key == "contact_links":
            if isinstance(value, str):
                return tuple(v.strip() for v in value.split(",") if v.strip())
            return tuple(str(v) for v in value)
        if isinstance(default, bool):
            if isinstance(value, bool):
                return value
            lowered = str(value).strip().lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError("true/false 값이 필요합니다")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError("정수가 필요합니다")
            return int(value)
        if isinstance(default, float):
            return float(value)
        return str(value).strip()
    except (TypeError, ValueError) as e:
        raise ConfigError(f"설정 값 오류: {key} = {value!r} ({e})") from e


def _validate(config: RunConfig, require: Sequence[str]) -> None:
    for key, (lo, hi, inclusive) in RANGES.items():
        value = getattr(config, key)
        below = value < lo if inclusive else value <= lo
        if below or value > hi or (isinstance(value, float) and math.isnan(value)):
            raise ConfigError(f"설정 범위 오류: {key} = {value}")
    for key, options in CHOICES.items():
        if getattr(config, key) not in options:
            raise ConfigError(f"설정 값 오류: {key} = {getattr(config, key)} (허용: {', '.join(options)})")
    if any(s < 0 for s in config.canonical_size):
        raise ConfigError(f"설정 범위 오류: canonical_size = {config.canonical_size}")
    if (config.object_region_min is None) != (config.object_region_max is None):
        raise ConfigError("object_region_min / object_region_max 는 함께 지정해야 합니다.")
    if config.object_region_min is not None and any(
            a > b for a, b in zip(config.object_region_min, config.object_region_max)):
        raise ConfigError("object_region_min 이 object_region_max 보다 큽니다.")
    for key in require:
        path = getattr(config, key)
        if not path:
            raise ConfigError(f"{key} 경로가 지정되지 않았습니다.")
        if not os.path.isfile(path):
            raise ConfigError(f"{key} 파일을 찾을 수 없습니다: {path}")


def read_config_file(path: str) -> Dict[str, Any]:
    """INI 파일을 평탄한 key -> 문자열 dict 로 읽기"""
    if not os.path.isfile(path):
        raise ConfigError(f"설정 파일을 읽을 수 없습니다: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as e:
        raise ConfigError(f"설정 파일 파싱 실패: {path}: {e}") from e

    values: Dict[str, Any] = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"알 수 없는 설정 섹션: [{section}]")
        for key, value in parser.items(section, raw=True):
            if key not in SECTIONS[section]:
                raise ConfigError(f"알 수 없는 설정 키: [{section}] {key}")
            values[key] = value

    # 에셋 경로는 설정 파일 기준 상대경로
    base = os.path.dirname(os.path.abspath(path))
    for key in ("hand", "object"):
        if values.get(key) and not os.path.isabs(values[key]):
            values[key] = os.path.join(base, values[key])
    return values


def parse_overrides(items: Sequence[str]) -> Dict[str, str]:
    """--set key=value 목록 파싱"""
    values = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"key=value 형식이 아닙니다: {item}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def parse_config(path: Optional[str] = None, flags: Optional[Mapping[str, Any]] = None,
                 overrides: Optional[Mapping[str, Any]] = None,
                 require: Sequence[str] = ()) -> RunConfig:
    """
    기본값 < 설정 파일 < CLI 플래그 < --set 순으로 병합 후 검증

    Returns:
        RunConfig
    """
    merged: Dict[str, Any] = {}
    if path:
        merged.update(read_config_file(path))
    for layer in (flags or {}, overrides or {}):
        for key, value in layer.items():
            if key not in FIELDS:
                raise ConfigError(f"알 수 없는 설정 키: {key}")
            if value is not None:
                merged[key] = value

    config = dataclasses.replace(DEFAULTS, **{key: _convert(key, value) for key, value in merged.items()})
    _validate(config, require)
    return config


def configure_logging(level: str) -> None:
    logging.getLogger("app").setLevel(getattr(logging, level, logging.INFO))
