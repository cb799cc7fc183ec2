from sqlalchemy import Column, Float, Integer, String, UniqueConstraint

from db import Base


class ProbeModel(Base):
    __tablename__ = "probes"

    id = Column(Integer, primary_key=True)
    run_id = Column(String(255), nullable=False, index=True)
    step = Column(Integer, nullable=False)
    ppl_fp32 = Column(Float, nullable=False)
    ppl_int4 = Column(Float, nullable=True)
    gap_int4_pct = Column(Float, nullable=True)
    ppl_int8 = Column(Float, nullable=True)
    gap_int8_pct = Column(Float, nullable=True)
    lr = Column(Float, nullable=True)
    lr_frac = Column(Float, nullable=True)
    kurtosis = Column(Float, nullable=True)
    phase = Column(Integer, nullable=True)
    status = Column(String(16), nullable=False, default="ok")

    # One probe per checkpoint step within a run
    __table_args__ = (UniqueConstraint("run_id", "step", name="uq_probe_run_step"),)

    def __repr__(self):
        return f"<ProbeModel(run_id={self.run_id}, step={self.step}, ppl_fp32={self.ppl_fp32})>"
