from pydantic import BaseModel
from dotenv import load_dotenv
from pathlib import Path
from typing import Optional
import json
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from pydantic import ValidationError

from app.errors import ConfigError
from app.schemas import RunConfig

load_dotenv()

class Settings(BaseModel):
    # Output root override (takes precedence over the config file's output_dir)
    OUTPUT_ROOT: Optional[str] = os.getenv("OUTPUT_ROOT") or None

    # Logging
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")

    # Bounded worker pool for per-pair work
    WORKERS: int = int(os.getenv("WORKERS", "4"))

    # Run manifest (SQLite file inside the output directory)
    MANIFEST_DB: str = os.getenv("MANIFEST_DB", "manifest.db")

    # Floor applied to affine metric values before use / inversion
    CLAMP_EPS: float = float(os.getenv("CLAMP_EPS", "1e-6"))

settings = Settings()


def load_run_config(path: Optional[str]) -> RunConfig:
    """Read a TOML (or JSON snapshot) run config; no path means all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        if p.suffix == ".json":
            raw = json.loads(p.read_text())
        else:
            with p.open("rb") as fh:
                raw = tomllib.load(fh)
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"Could not parse {path}: {e}")
    return RunConfig.model_validate(raw)


def resolve_output_dir(config: RunConfig, cli_out: Optional[str] = None) -> Path:
    """--out wins, then OUTPUT_ROOT, then the config's output_dir."""
    root = cli_out or settings.OUTPUT_ROOT or config.output_dir
    out = Path(root)
    out.mkdir(parents=True, exist_ok=True)
    return out


def describe_validation_error(err: ValidationError) -> str:
    lines = []
    for item in err.errors():
        field = ".".join(str(part) for part in item["loc"])
        lines.append(f"{field}: {item['msg']}")
    return "; ".join(lines)
