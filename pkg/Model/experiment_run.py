"""SQLAlchemy model for pipeline runs."""

from typing import Optional, Dict, Any
import json
from sqlalchemy import Column, Integer, String, DateTime, Text, Index
from sqlalchemy.orm import relationship, validates
from Model.base import Base, Seed, utc_now


class ExperimentRun(Base):
    """One invocation of a pipeline phase or an evaluation scenario.

    Artifacts on disk carry the same config hash and seed, so a row can be
    matched to the files it produced.
    """

    __tablename__ = 'ExperimentRun'

    id = Column(Integer, primary_key=True, autoincrement=True)

    # What ran
    phase = Column(String(50), nullable=False, index=True)
    scenario = Column(String(50), nullable=True)
    config_hash = Column(String(64), nullable=False, index=True)
    seed = Column(Seed, nullable=False)
    output_dir = Column(Text, nullable=False)

    # 'running' on creation, then 'done' or 'failed'
    status = Column(String(20), default='running', nullable=False, index=True)
    summary = Column(Text, nullable=True)  # JSON string

    started_at = Column(DateTime, default=utc_now, nullable=False)
    finished_at = Column(DateTime, nullable=True)

    episodes = relationship('EpisodeRecord', back_populates='run', cascade='all, delete-orphan')

    __table_args__ = (
        Index('ix_phase_config_hash', 'phase', 'config_hash'),
    )

    @validates('summary')
    def validate_summary(self, key, value):
        """Validate that summary is valid JSON."""
        if value is not None and isinstance(value, str):
            try:
                json.loads(value)
            except json.JSONDecodeError:
                raise ValueError(f"Invalid JSON for summary: {value}")
        return value

    @validates('seed')
    def validate_seed(self, key, value):
        """Validate that the seed is an unsigned 64-bit integer.

        Raises:
            ValueError: If the seed is negative or at least 2**64
        """
        value = int(value)
        if not 0 <= value < 2 ** 64:
            raise ValueError(f"Seed out of unsigned 64-bit range: {value}")
        return value

    @validates('status')
    def validate_status(self, key, value):
        """Validate that status is running, done or failed."""
        if value not in ('running', 'done', 'failed'):
            raise ValueError(f"Invalid run status: {value}")
        return value

    def get_summary(self) -> Optional[Dict[str, Any]]:
        """Parse summary JSON.

        Returns:
            Summary dictionary, or None if unset or unparseable
        """
        if self.summary:
            try:
                return json.loads(self.summary)
            except json.JSONDecodeError:
                return None
        return None

    def set_summary(self, summary: Optional[Dict[str, Any]]) -> None:
        """Store summary as JSON with sorted keys.

        Args:
            summary: Dictionary to store, or None to clear
        """
        self.summary = json.dumps(summary, sort_keys=True) if summary is not None else None

    def to_dict(self) -> Dict[str, Any]:
        """Convert model to dictionary.

        Returns:
            Dictionary representation of the model
        """
        return {
            'id': self.id,
            'phase': self.phase,
            'scenario': self.scenario,
            'config_hash': self.config_hash,
            'seed': self.seed,
            'output_dir': self.output_dir,
            'status': self.status,
            'summary': self.get_summary(),
            'started_at': self.started_at.isoformat() if self.started_at else None,
            'finished_at': self.finished_at.isoformat() if self.finished_at else None,
        }

    def __repr__(self) -> str:
        return f"<ExperimentRun(id={self.id}, phase='{self.phase}', scenario='{self.scenario}', status='{self.status}')>"
