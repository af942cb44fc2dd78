"""SQLAlchemy model for evaluated episodes."""

from typing import Dict, Any
from sqlalchemy import Column, Integer, String, Float, ForeignKey, Index
from sqlalchemy.orm import relationship, validates
from Model.base import Base

OUTCOMES = ('collision', 'reach', 'timeout')


class EpisodeRecord(Base):
    """Outcome of one evaluated episode, keyed by run and episode index."""

    __tablename__ = 'EpisodeRecord'

    id = Column(Integer, primary_key=True, autoincrement=True)
    run_id = Column(Integer, ForeignKey('ExperimentRun.id', ondelete='CASCADE'), nullable=False, index=True)
    episode_index = Column(Integer, nullable=False)
    mode = Column(String(20), nullable=False)

    classification = Column(String(20), nullable=False, index=True)
    steps = Column(Integer, nullable=False)
    v_peak = Column(Float, nullable=False)
    recovery_fraction = Column(Float, nullable=False)
    min_ra_value = Column(Float, nullable=True)
    max_ra_value = Column(Float, nullable=True)

    run = relationship('ExperimentRun', back_populates='episodes')

    __table_args__ = (
        Index('ix_run_episode_mode', 'run_id', 'episode_index', 'mode', unique=True),
    )

    @validates('classification')
    def validate_classification(self, key, value):
        """Validate that classification is one of the episode outcomes.

        Raises:
            ValueError: If the value is not collision, reach or timeout
        """
        if value not in OUTCOMES:
            raise ValueError(f"Invalid classification: {value}")
        return value

    def to_dict(self) -> Dict[str, Any]:
        """Convert model to dictionary.

        Returns:
            Dictionary representation of the model
        """
        return {
            'id': self.id,
            'run_id': self.run_id,
            'episode_index': self.episode_index,
            'mode': self.mode,
            'classification': self.classification,
            'steps': self.steps,
            'v_peak': self.v_peak,
            'recovery_fraction': self.recovery_fraction,
            'min_ra_value': self.min_ra_value,
            'max_ra_value': self.max_ra_value,
        }

    def __repr__(self) -> str:
        return (f"<EpisodeRecord(run_id={self.run_id}, episode_index={self.episode_index}, "
                f"mode='{self.mode}', classification='{self.classification}')>")
