from contextlib import contextmanager
from pathlib import Path
from typing import Iterator

from sqlalchemy import create_engine
from sqlalchemy.engine import Engine
from sqlalchemy.orm import sessionmaker, DeclarativeBase, Session

from app.config import settings


class Base(DeclarativeBase):
    pass


def manifest_url(output_dir: str | Path) -> str:
    return f"sqlite:///{Path(output_dir) / settings.MANIFEST_DB}"


def make_engine(output_dir: str | Path) -> Engine:
    engine = create_engine(manifest_url(output_dir), connect_args={"check_same_thread": False})
    Base.metadata.create_all(bind=engine)
    return engine


def make_session_factory(engine: Engine) -> sessionmaker:
    return sessionmaker(autocommit=False, autoflush=False, bind=engine)


@contextmanager
def get_db(factory: sessionmaker) -> Iterator[Session]:
    db = factory()
    try:
        yield db
    finally:
        db.close()
