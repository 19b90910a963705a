from datetime import datetime, timezone
from sqlalchemy import Column, Integer, String, Float, Boolean, DateTime, ForeignKey
from sqlalchemy.ext.declarative import declarative_base
from sqlalchemy.orm import relationship

Base = declarative_base()


class BenchmarkRun(Base):
    __tablename__ = 'benchmark_runs'

    id = Column(Integer, primary_key=True)
    suite_name = Column(String, nullable=False)
    out_dir = Column(String, nullable=False)
    seed = Column(Integer, nullable=False)
    n_trials = Column(Integer, nullable=False)
    workers = Column(Integer, default=1)
    manifest_sha256 = Column(String, nullable=True)
    status = Column(String, default="running")  # running, completed, partial
    created_at = Column(DateTime, default=lambda: datetime.now(timezone.utc))
    finished_at = Column(DateTime, nullable=True)

    # Отношения
    trials = relationship("TrialRecord", back_populates="run", cascade="all, delete-orphan")


class TrialRecord(Base):
    __tablename__ = 'trial_records'

    id = Column(Integer, primary_key=True)
    run_id = Column(Integer, ForeignKey('benchmark_runs.id'), nullable=False)
    system = Column(String, nullable=False)
    method = Column(String, nullable=False)  # vanilla, svmpc, filter
    horizon = Column(Integer, nullable=False)
    trial_index = Column(Integer, nullable=False)
    safe = Column(Boolean, nullable=False)
    n_steps = Column(Integer, default=0)
    # Средние по шагам значения метрик одного испытания
    avg_dist_goal = Column(Float, nullable=True)
    avg_dist_obs = Column(Float, nullable=True)
    avg_active_ctrl = Column(Float, nullable=True)
    avg_scp_iters = Column(Float, nullable=True)
    avg_plan_ms = Column(Float, nullable=True)
    failed_steps = Column(Integer, default=0)
    clamped_steps = Column(Integer, default=0)
    failure_cause = Column(String, nullable=True)  # terminal_before_state, state_only, state_without_terminal
    error = Column(String, nullable=True)
    csv_path = Column(String, nullable=True)

    # Отношения
    run = relationship("BenchmarkRun", back_populates="trials")
