import os
from pathlib import Path
from typing import Dict, Any
from dotenv import load_dotenv

load_dotenv()

CONFIG_VERSION_LINE = "CORLD-CFG v1"


class Config:
    """Application configuration"""

    # Logging
    DEBUG = os.getenv("DEBUG", "False").lower() == "true"
    LOG_LEVEL = os.getenv("LOG_LEVEL", "INFO")

    # Numerics
    FLOAT_MODE = os.getenv("CORLD_FLOAT_MODE", "f32")

    # Harness parallelism (processes per sweep)
    THREADS = os.getenv("CORLD_THREADS", "1")

    # Default output root for runs
    OUT_ROOT = os.getenv("CORLD_OUT", "runs")

    @classmethod
    def threads(cls) -> int:
        try:
            return max(1, int(cls.THREADS))
        except ValueError:
            return 1

    @classmethod
    def validate_config(cls):
        """Validate configuration"""
        problems = []

        if cls.FLOAT_MODE not in ("f32", "f64"):
            problems.append(f"CORLD_FLOAT_MODE={cls.FLOAT_MODE!r} (expected f32 or f64)")

        if not str(cls.THREADS).isdigit() or int(cls.THREADS) < 1:
            problems.append(f"CORLD_THREADS={cls.THREADS!r} (expected a positive integer)")

        if problems:
            from logger import logger
            logger.warning(f"Invalid configuration: {', '.join(problems)}; falling back to defaults")

        return len(problems) == 0


def _parse_value(raw: str) -> Any:
    value = raw.strip()
    if value.lower() in ("true", "yes"):
        return True
    if value.lower() in ("false", "no"):
        return False
    return value


def load_train_config(path):
    """Read a TrainConfig from a versioned key=value text file"""
    from pydantic import ValidationError as PydanticValidationError

    from models import TrainConfig
    from validators import ValidationError

    path = Path(path)
    lines = [
        line.strip() for line in path.read_text(encoding="utf-8").splitlines()
        if line.strip() and not line.strip().startswith("#")
    ]
    if not lines or lines[0] != CONFIG_VERSION_LINE:
        raise ValidationError(f"{path}: expected first line {CONFIG_VERSION_LINE!r}")

    fields: Dict[str, Any] = {}
    weights: Dict[str, Any] = {}
    for line in lines[1:]:
        if "=" not in line:
            raise ValidationError(f"{path}: malformed line {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key.startswith("weights."):
            weights[key[len("weights."):]] = _parse_value(raw)
        else:
            fields[key] = _parse_value(raw)
    if weights:
        fields["weights"] = weights
    try:
        return TrainConfig.model_validate(fields)
    except PydanticValidationError as e:
        raise ValidationError(f"{path}: {e}") from e


def dump_train_config(cfg, path) -> None:
    """Write a TrainConfig as a versioned key=value text file"""
    lines = [CONFIG_VERSION_LINE]
    for key, value in cfg.model_dump(mode="json").items():
        if key == "weights":
            for wkey, wvalue in value.items():
                lines.append(f"weights.{wkey}={wvalue}")
        elif value is not None:
            lines.append(f"{key}={value}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
