from database.models import Run, Artifact, make_session_factory
from pathlib import Path
import datetime
import json
import logging

logger = logging.getLogger(__name__)

REGISTRY_FILE = "runs.db"


class DatabaseService:
    """Run registry kept next to the outputs (``<output_dir>/runs.db``)."""

    def __init__(self, output_dir):
        self.db_path = Path(output_dir) / REGISTRY_FILE
        self.session = make_session_factory(self.db_path)()

    # ------------------ Runs ------------------

    def record_run(self, mode, config_hash, seed, versions=None):
        """Open a registry row for a run that is starting."""
        run = Run(
            mode=mode, config_hash=config_hash, seed=seed, status="running",
            versions=json.dumps(versions, sort_keys=True) if versions else None,
        )
        self.session.add(run)
        self.session.commit()
        logger.debug("registry: run %d (%s) started", run.id, mode)
        return run

    def add_artifact(self, run, kind, path):
        """Attach an output file to a run."""
        artifact = Artifact(run_id=run.id, kind=kind, path=str(path))
        self.session.add(artifact)
        self.session.commit()
        return artifact

    def finish_run(self, run, status, final_objective=None, summary=None):
        """Close a run with its status, final objective and JSON summary."""
        run.status = status
        run.finished_at = datetime.datetime.now()
        run.final_objective = final_objective
        run.summary = json.dumps(summary, sort_keys=True, default=str) if summary is not None else None
        self.session.commit()
        logger.debug("registry: run %d finished with status %s", run.id, status)
        return run

    def list_runs(self, mode=None):
        """All runs, newest first, optionally for one mode."""
        query = self.session.query(Run)
        if mode is not None:
            query = query.filter(Run.mode == mode)
        return query.order_by(Run.id.desc()).all()

    def runs_with_hash(self, config_hash):
        """Earlier runs with the same configuration, oldest first."""
        return self.session.query(Run).filter(Run.config_hash == config_hash).order_by(Run.id).all()

    def close(self):
        """Close the database session cleanly."""
        self.session.close()
