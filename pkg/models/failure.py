from sqlalchemy import Column, Integer, String, Text

from db import Base


class FailureModel(Base):
    __tablename__ = "probe_failures"

    id = Column(Integer, primary_key=True)
    run_id = Column(String(255), nullable=False, index=True)
    step = Column(Integer, nullable=True)
    path = Column(Text, nullable=True)
    message = Column(Text, nullable=False)

    def __repr__(self):
        return f"<FailureModel run_id={self.run_id} step={self.step}>"
