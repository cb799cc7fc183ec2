from sqlalchemy import Column, String, Text

from db import Base

RUNNING = "running"
DONE = "done"
FAILED = "failed"


class RunModel(Base):
    __tablename__ = "runs"

    run_id = Column(String(255), primary_key=True)
    kind = Column(String(32), nullable=False)
    status = Column(String(32), nullable=False, default=RUNNING)
    # Digest of everything that determines the run's probes; rows under another digest are stale
    config_hash = Column(String(64), nullable=True)
    message = Column(Text, nullable=True)

    def __repr__(self):
        return f"<RunModel run_id={self.run_id} status={self.status} config_hash={self.config_hash}>"
