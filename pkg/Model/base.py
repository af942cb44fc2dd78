"""Declarative base and shared helpers for the run registry models."""

from datetime import datetime, timezone

from sqlalchemy import MetaData, String, event
from sqlalchemy.engine import Engine
from sqlalchemy.types import TypeDecorator
from sqlalchemy.orm import declarative_base

# Constraint names stay stable across SQLite rebuilds of the registry
convention = {
    "ix": "ix_%(column_0_label)s",
    "uq": "uq_%(table_name)s_%(column_0_name)s",
    "ck": "ck_%(table_name)s_%(constraint_name)s",
    "fk": "fk_%(table_name)s_%(column_0_name)s_%(referred_table_name)s",
    "pk": "pk_%(table_name)s"
}

metadata = MetaData(naming_convention=convention)
Base = declarative_base(metadata=metadata)


class Seed(TypeDecorator):
    """Unsigned 64-bit root seed stored as decimal text.

    SQLite integers are signed 64-bit, so seeds at or above 2**63 do not fit
    an INTEGER column.
    """

    impl = String(20)
    cache_ok = True

    def process_bind_param(self, value, dialect):
        if value is None:
            return None
        return str(int(value))

    def process_result_value(self, value, dialect):
        return int(value) if value is not None else None


def utc_now() -> datetime:
    """Get current UTC time in a timezone-aware manner."""
    return datetime.now(timezone.utc)


def enable_foreign_keys(engine: Engine) -> None:
    """Turn on SQLite foreign-key enforcement for every new connection.

    EpisodeRecord rows reference their ExperimentRun with ON DELETE CASCADE,
    which SQLite ignores unless the pragma is set per connection.
    """
    @event.listens_for(engine, "connect")
    def _set_pragma(dbapi_connection, connection_record):
        cursor = dbapi_connection.cursor()
        cursor.execute("PRAGMA foreign_keys=ON")
        cursor.close()
