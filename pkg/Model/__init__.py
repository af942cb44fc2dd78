"""Run registry models."""

from Model.base import Base
from Model.experiment_run import ExperimentRun
from Model.episode_record import EpisodeRecord
from Model.db_context import DBContext

__all__ = ['Base', 'ExperimentRun', 'EpisodeRecord', 'DBContext']
