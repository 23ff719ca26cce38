from sqlalchemy import Column, Integer, String, DateTime, ForeignKey, Text
from sqlalchemy.sql import func
from sqlalchemy.orm import relationship
from app.database import Base


class Run(Base):
    __tablename__ = "runs"
    id = Column(Integer, primary_key=True, index=True)
    command = Column(String, nullable=False)
    config_json = Column(Text, nullable=False)
    tool_version = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)

    artifacts = relationship("Artifact", back_populates="run")


class Artifact(Base):
    __tablename__ = "artifacts"
    id = Column(Integer, primary_key=True, index=True)
    run_id = Column(Integer, ForeignKey("runs.id", ondelete="CASCADE"), index=True, nullable=False)
    path = Column(String, index=True, nullable=False)
    kind = Column(String, nullable=False)
    sha256 = Column(String, nullable=False)
    command = Column(String, nullable=False)
    created_at = Column(DateTime(timezone=True), server_default=func.now(), nullable=False)

    run = relationship("Run", back_populates="artifacts")
    inputs = relationship("ArtifactInput", back_populates="artifact", cascade="all, delete-orphan")


class ArtifactInput(Base):
    __tablename__ = "artifact_inputs"
    id = Column(Integer, primary_key=True)
    artifact_id = Column(Integer, ForeignKey("artifacts.id", ondelete="CASCADE"), index=True, nullable=False)
    path = Column(String, nullable=False)
    sha256 = Column(String, nullable=False)

    artifact = relationship("Artifact", back_populates="inputs")
