"""
Run manifest service
Records every artifact a command writes, with the content hashes of its inputs.
"""

import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional

from sqlalchemy import select

from app import __version__
from app.database import get_db, make_engine, make_session_factory
from app.errors import GeometryError, MissingArtifactError
from app.models import Artifact, ArtifactInput, Run
from app.schemas import RunConfig
from app.utils import sha256_file

logger = logging.getLogger(__name__)


class ManifestService:
    def __init__(self, output_dir: str | Path):
        self.output_dir = Path(output_dir)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.engine = make_engine(self.output_dir)
        self.SessionLocal = make_session_factory(self.engine)

    def _rel(self, path: str | Path) -> str:
        p = Path(path)
        try:
            return p.resolve().relative_to(self.output_dir.resolve()).as_posix()
        except ValueError:
            return p.resolve().as_posix()

    def _abs(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.output_dir / p

    def start_run(self, command: str, config: RunConfig, seed: int) -> int:
        with get_db(self.SessionLocal) as db:
            run = Run(command=command, config_json=config.model_dump_json(), tool_version=__version__, seed=seed)
            db.add(run)
            db.commit()
            db.refresh(run)
            logger.info(f"📒 Run {run.id} started: {command} (seed {seed})")
            return run.id

    def require(self, path: str | Path, producer: str) -> Path:
        """Return the artifact path, or fail naming the command that produces it."""
        p = Path(path)
        if not p.exists():
            raise MissingArtifactError(self._rel(p), producer)
        return p

    def record(self, run_id: int, path: str | Path, kind: str, command: str, inputs: Iterable[str | Path] = ()) -> str:
        """Hash and register an output file together with the hashes of its inputs."""
        digest = sha256_file(path)
        rel = self._rel(path)
        with get_db(self.SessionLocal) as db:
            artifact = Artifact(run_id=run_id, path=rel, kind=kind, sha256=digest, command=command)
            for inp in inputs:
                artifact.inputs.append(ArtifactInput(path=self._rel(inp), sha256=sha256_file(inp)))
            db.add(artifact)
            db.commit()
            logger.info(f"💾 Wrote {kind} artifact {rel} ({digest[:12]})")
            return digest

    def artifacts(self) -> List[Dict[str, object]]:
        with get_db(self.SessionLocal) as db:
            rows = db.scalars(select(Artifact).order_by(Artifact.id)).all()
            return [
                {
                    "path": a.path,
                    "kind": a.kind,
                    "sha256": a.sha256,
                    "command": a.command,
                    "inputs": [(i.path, i.sha256) for i in a.inputs],
                }
                for a in rows
            ]

    def latest_hash(self, path: str | Path) -> Optional[str]:
        rel = self._rel(path)
        with get_db(self.SessionLocal) as db:
            row = db.scalars(select(Artifact).where(Artifact.path == rel).order_by(Artifact.id.desc())).first()
            return row.sha256 if row else None

    def validate_dag(self) -> List[str]:
        """Every recorded input must itself be a recorded artifact written earlier."""
        problems: List[str] = []
        seen: Dict[str, set] = {}
        for entry in self.artifacts():
            for path, digest in entry["inputs"]:
                if digest not in seen.get(path, set()):
                    problems.append(f"{entry['path']} depends on unrecorded input {path} ({digest[:12]})")
            seen.setdefault(entry["path"], set()).add(entry["sha256"])
        if problems:
            for p in problems:
                logger.warning(f"⚠️  Manifest: {p}")
        return problems

    def assert_dag(self) -> None:
        problems = self.validate_dag()
        if problems:
            raise GeometryError(f"Manifest is not a valid DAG: {problems[0]}")

    def close(self) -> None:
        self.engine.dispose()
