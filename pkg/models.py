# models.py
from datetime import datetime
import logging

from sqlalchemy import JSON, Column, DateTime, Float, Index, Integer, String, Text
from sqlalchemy.orm import declarative_base

logger = logging.getLogger(__name__)
Base = declarative_base()

SCHEMA_VERSION = 1


class EvaluationRecord(Base):
    """评分或排序的一次后端调用结果；cache_key 唯一，重复插入被忽略。"""
    __tablename__ = "evaluation_record"
    id             = Column(Integer, primary_key=True, autoincrement=True)
    cache_key      = Column(String(64), nullable=False, unique=True)
    kind           = Column(String(10), nullable=False)     # score | rank
    source_id      = Column(String(120), nullable=False)    # pair_id 或 group_id
    brief_id       = Column(String(20), nullable=False)
    profile_ids    = Column(JSON, nullable=False)
    run_index      = Column(Integer, nullable=False)
    raw_text       = Column(Text, nullable=False, default="")
    score          = Column(Float)
    ranks          = Column(JSON)
    justification  = Column(Text, default="")
    status         = Column(String(20), nullable=False)    # ok | parse_error | backend_error
    model_name     = Column(String(100), nullable=False)
    template_hash  = Column(String(32), nullable=False)
    created_at     = Column(DateTime, default=datetime.utcnow)
    latency_ms     = Column(Float)
    schema_version = Column(Integer, nullable=False, default=SCHEMA_VERSION)
    __table_args__ = (Index("ix_record_kind_source_run", "kind", "source_id", "run_index"),)

    def to_dict(self) -> dict:
        return {c.name: getattr(self, c.name) for c in self.__table__.columns if c.name != "id"}
