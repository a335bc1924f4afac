from sqlalchemy import Column, Integer, String, Float, DateTime, ForeignKey, Text, create_engine
from sqlalchemy.orm import declarative_base, relationship, sessionmaker
from pathlib import Path
import datetime

Base = declarative_base()

class Run(Base):
    __tablename__ = "runs"
    id = Column(Integer, primary_key=True)
    mode = Column(String, nullable=False)
    config_hash = Column(String, nullable=False)
    seed = Column(Integer)
    status = Column(String, default="running")   # running | ok | failed
    started_at = Column(DateTime, default=datetime.datetime.now)
    finished_at = Column(DateTime)
    final_objective = Column(Float)
    versions = Column(Text)                      # JSON
    summary = Column(Text)                       # JSON
    artifacts = relationship("Artifact", back_populates="run", cascade="all, delete-orphan")

class Artifact(Base):
    __tablename__ = "artifacts"
    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey("runs.id"))
    kind = Column(String)                        # tensor, context, checkpoint, report, ...
    path = Column(String)
    run = relationship("Run", back_populates="artifacts")


def make_session_factory(db_path):
    """Create the registry tables in ``db_path`` (SQLite) and return a session factory."""
    db_path = Path(db_path)
    db_path.parent.mkdir(parents=True, exist_ok=True)
    engine = create_engine(f"sqlite:///{db_path}", echo=False)
    Base.metadata.create_all(engine)
    return sessionmaker(bind=engine)
