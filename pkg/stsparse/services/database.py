"""
Database service for experiment records.

This module provides the SQLAlchemy ORM models and the operations the
experiment controller uses to persist plan cells. Only the orchestrating
process writes; every finished cell is one committed session.
"""

import json
import logging
from typing import Dict, List, Optional, Set

from sqlalchemy import (
    Column,
    DateTime,
    Float,
    Integer,
    String,
    Text,
    UniqueConstraint,
    create_engine,
    func,
)
from sqlalchemy.orm import declarative_base, sessionmaker

from stsparse.models.records import CellKey, RunRecord

Base = declarative_base()


class RunRecordModel(Base):
    """SQLAlchemy model for plan cells."""

    __tablename__ = "run_records"
    __table_args__ = (
        UniqueConstraint("dataset", "defender", "attacker", "rate", "seed", name="uq_cell"),
    )

    id = Column(Integer, primary_key=True)
    dataset = Column(String(100), nullable=False)
    defender = Column(String(100), nullable=False)
    attacker = Column(String(50), nullable=False)
    rate = Column(Float, nullable=False)
    seed = Column(Integer, nullable=False)
    clean_ref_acc = Column(Float, nullable=True)
    acc = Column(Float, nullable=True)
    dr = Column(Float, nullable=True)
    wall_time = Column(Float, default=0.0)
    activation_trace = Column(Text, nullable=True)  # JSON list of floats
    status = Column(String(20), default="ok")  # ok, failed
    error = Column(Text, nullable=True)
    created_at = Column(DateTime, default=func.now())


class ConfigModel(Base):
    """SQLAlchemy model for run-level settings such as pinned clean references."""

    __tablename__ = "config"

    id = Column(Integer, primary_key=True)
    key = Column(String(100), nullable=False, unique=True)
    value = Column(String(500), nullable=False)
    created_at = Column(DateTime, default=func.now())
    updated_at = Column(DateTime, default=func.now(), onupdate=func.now())


class DatabaseService:
    """Service class for record persistence."""

    def __init__(self, db_url: str = "sqlite:///records.db"):
        """Initialize the database service."""
        try:
            logging.info(f"Initializing database with URL: {db_url}")
            self.engine = create_engine(db_url, echo=False)
            self.Session = sessionmaker(bind=self.engine)
            Base.metadata.create_all(self.engine)
        except Exception as e:
            logging.error(f"Failed to initialize database: {e}", exc_info=True)
            raise

    def get_session(self):
        """Get database session."""
        return self.Session()

    def save_record(self, record: RunRecord) -> RunRecord:
        """Insert or replace the record of one cell in a single commit."""
        from stsparse.services.adapters import (
            run_record_dataclass_to_model,
            run_record_model_to_dataclass,
        )

        with self.get_session() as session:
            existing = self._query_cell(session, record.key)
            if existing is not None:
                session.delete(existing)
                session.flush()
            db_record = run_record_dataclass_to_model(record)
            session.add(db_record)
            session.commit()
            session.refresh(db_record)
            return run_record_model_to_dataclass(db_record)

    def get_records(
        self,
        dataset: Optional[str] = None,
        defender: Optional[str] = None,
        attacker: Optional[str] = None,
        include_failed: bool = True,
    ) -> List[RunRecord]:
        """Get records, optionally filtered, in stable cell order."""
        from stsparse.services.adapters import convert_run_record_list

        with self.get_session() as session:
            query = session.query(RunRecordModel)
            if dataset:
                query = query.filter(RunRecordModel.dataset == dataset)
            if defender:
                query = query.filter(RunRecordModel.defender == defender)
            if attacker:
                query = query.filter(RunRecordModel.attacker == attacker)
            if not include_failed:
                query = query.filter(RunRecordModel.status == "ok")
            query = query.order_by(
                RunRecordModel.dataset,
                RunRecordModel.defender,
                RunRecordModel.attacker,
                RunRecordModel.rate,
                RunRecordModel.seed,
            )
            return convert_run_record_list(query.all())

    def get_record(self, key: CellKey) -> Optional[RunRecord]:
        from stsparse.services.adapters import run_record_model_to_dataclass

        with self.get_session() as session:
            db_record = self._query_cell(session, key)
            return run_record_model_to_dataclass(db_record) if db_record else None

    def completed_keys(self) -> Set[CellKey]:
        """Keys of cells that finished successfully."""
        with self.get_session() as session:
            rows = (
                session.query(
                    RunRecordModel.dataset,
                    RunRecordModel.defender,
                    RunRecordModel.attacker,
                    RunRecordModel.rate,
                    RunRecordModel.seed,
                )
                .filter(RunRecordModel.status == "ok")
                .all()
            )
            return {tuple(row) for row in rows}

    def _query_cell(self, session, key: CellKey) -> Optional[RunRecordModel]:
        dataset, defender, attacker, rate, seed = key
        return (
            session.query(RunRecordModel)
            .filter(
                RunRecordModel.dataset == dataset,
                RunRecordModel.defender == defender,
                RunRecordModel.attacker == attacker,
                RunRecordModel.rate == rate,
                RunRecordModel.seed == seed,
            )
            .first()
        )

    def get_config(self, key: str, default: str = "") -> str:
        """Get a configuration value by key."""
        with self.get_session() as session:
            config = session.query(ConfigModel).filter(ConfigModel.key == key).first()
            return config.value if config else default

    def set_config(self, key: str, value: str) -> bool:
        """Set a configuration value by key."""
        with self.get_session() as session:
            config = session.query(ConfigModel).filter(ConfigModel.key == key).first()
            if config:
                config.value = value
                config.updated_at = func.now()
            else:
                config = ConfigModel(key=key, value=value)
                session.add(config)
            session.commit()
            return True

    def get_all_config(self) -> Dict[str, str]:
        with self.get_session() as session:
            configs = session.query(ConfigModel).all()
            return {config.key: config.value for config in configs}

    def pin_clean_reference(self, dataset: str, acc: float):
        """Store the seed-averaged clean GCN accuracy of a dataset."""
        self.set_config(f"clean_ref:{dataset}", json.dumps(acc))
        logging.info(f"Pinned clean reference accuracy for {dataset}: {acc:.4f}")

    def clean_reference(self, dataset: str) -> Optional[float]:
        value = self.get_config(f"clean_ref:{dataset}")
        return json.loads(value) if value else None
