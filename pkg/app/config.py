from __future__ import annotations

import os
from configparser import ConfigParser
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional

from dotenv import load_dotenv

ENV_PREFIX = "CAPTURE_"
CONFIG_SECTION = "capture"


@dataclass(frozen=True)
class Settings:
    # graph-cut refinement
    graphcut_lambda: float = 10.0
    graphcut_sigma: float = 5.0
    probability_epsilon: float = 1e-6
    connectivity: int = 4
    # cropping
    crop_size: int = 128
    bbox_margin: float = 0.2
    # keyframes and the identity/focal solve
    keyframe_alpha: float = 1.0
    keyframe_threshold: float = 0.3
    max_keyframes: int = 20
    identity_tolerance: float = 1e-3
    identity_workers: int = 1
    # solver budgets
    qn_iterations: int = 3
    qn_memory: int = 8
    fit_rounds: int = 3
    fit_qn_iterations: int = 30
    pnp_iterations: int = 20
    identity_bound: float = 3.0
    focal_min_ratio: float = 0.25
    focal_max_ratio: float = 8.0
    focal_grid_size: int = 24
    alternation_tolerance: float = 1e-6
    max_alternations: int = 20
    # cascade regressor
    stages: int = 10
    ferns: int = 300
    fern_depth: int = 5
    shrinkage: float = 1000.0
    feature_points: int = 400
    feature_sigma: float = 0.25
    # probability source: net | dir | all-face
    prob_source: str = "net"
    prob_dir: Optional[str] = None
    segnet_checkpoint: Optional[str] = None
    log_level: str = "INFO"

    @classmethod
    def load(cls, config_path: Optional[str] = None) -> "Settings":
        """
        Defaults, overridden by a key/value config file, overridden by CAPTURE_* environment
        variables. A .env file is honoured so local runs pick up the same knobs as containers.
        """
        load_dotenv()
        overrides: Dict[str, str] = {}

        path = config_path or os.getenv(f"{ENV_PREFIX}CONFIG")
        if path:
            config_file = Path(path)
            if not config_file.exists():
                raise RuntimeError(f"Config file {config_file} not found")
            overrides.update(read_key_values(config_file))

        known = {f.name for f in fields(cls)}
        for name in known:
            value = os.getenv(f"{ENV_PREFIX}{name.upper()}")
            if value is not None:
                overrides[name] = value

        unknown = sorted(set(overrides) - known)
        if unknown:
            raise ValueError(f"Unknown config keys: {', '.join(unknown)}")

        base = cls()
        coerced = {name: coerce_value(getattr(base, name), raw) for name, raw in overrides.items()}
        return replace(base, **coerced)

    def as_dict(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def read_key_values(path: Path, section: str = CONFIG_SECTION) -> Dict[str, str]:
    text = Path(path).read_text()
    # the section header is optional for plain key/value files
    if not text.lstrip().startswith("["):
        text = f"[{section}]\n{text}"
    config = ConfigParser()
    config.read_string(text, source=str(path))
    if section not in config:
        raise ValueError(f"{path} missing [{section}] section")
    return {key.replace("-", "_"): value for key, value in config[section].items()}


def coerce_value(default: Any, raw: str) -> Any:
    if raw.strip().lower() in ("", "none") and not isinstance(default, (int, float)):
        return None
    if isinstance(default, bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


settings = Settings.load()
