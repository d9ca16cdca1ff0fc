# storage.py
import json
import logging
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

from sqlalchemy import create_engine
from sqlalchemy.dialects.postgresql import insert as pg_insert
from sqlalchemy.dialects.sqlite import insert as sqlite_insert
from sqlalchemy.orm import Session as SessionType
from sqlalchemy.orm import sessionmaker

from config import settings
from models import SCHEMA_VERSION, Base, EvaluationRecord

logger = logging.getLogger(__name__)

# SQLite 对单条语句的参数个数有限制，按块查询缓存键
_KEY_CHUNK = 500

# --- 1. 数据库连接 ---
_SESSION_FACTORIES: Dict[str, sessionmaker] = {}


def database_url(workspace_dir: Union[str, Path, None] = None) -> str:
    """DATABASE_URL 优先；否则使用工作区内的 SQLite 文件 scores/store.db。"""
    if settings.DATABASE_URL:
        return settings.DATABASE_URL
    root = Path(workspace_dir or settings.WORKSPACE_DIR)
    (root / "scores").mkdir(parents=True, exist_ok=True)
    return f"sqlite:///{(root / 'scores' / 'store.db').resolve()}"


def get_session_factory(url: str) -> sessionmaker:
    factory = _SESSION_FACTORIES.get(url)
    if factory is None:
        engine = create_engine(url, echo=False, pool_pre_ping=True)
        Base.metadata.create_all(engine)
        factory = _SESSION_FACTORIES[url] = sessionmaker(bind=engine)
        logger.info("存储已就绪: %s", engine.url.render_as_string(hide_password=True))
    return factory


def dispose_all():
    for factory in _SESSION_FACTORIES.values():
        factory.kw["bind"].dispose()
    _SESSION_FACTORIES.clear()


# --- 2. 数据操作函数 (接收 session) ---
def _insert_for(session: SessionType):
    return pg_insert if session.bind.dialect.name == "postgresql" else sqlite_insert


def insert_records(rows: Sequence[dict], session: SessionType) -> None:
    """按 cache_key 幂等插入；调用方负责提交。"""
    if not rows:
        return
    stmt = _insert_for(session)(EvaluationRecord).on_conflict_do_nothing(index_elements=["cache_key"])
    session.execute(stmt, [dict(row, schema_version=SCHEMA_VERSION) for row in rows])


def existing_keys(session: SessionType, keys: Iterable[str]) -> Set[str]:
    keys = list(keys)
    found: Set[str] = set()
    for start in range(0, len(keys), _KEY_CHUNK):
        chunk = keys[start:start + _KEY_CHUNK]
        found.update(k for (k,) in session.query(EvaluationRecord.cache_key)
                     .filter(EvaluationRecord.cache_key.in_(chunk)))
    return found


def get_record(session: SessionType, cache_key: str) -> Optional[EvaluationRecord]:
    return session.query(EvaluationRecord).filter(EvaluationRecord.cache_key == cache_key).one_or_none()


def fetch_records(session: SessionType, kind: str, keys: Optional[Iterable[str]] = None) -> List[dict]:
    """读取某类记录；给定 keys 时按块在 SQL 中过滤。结果按 (source_id, run_index) 排序。"""
    order = (EvaluationRecord.source_id, EvaluationRecord.run_index, EvaluationRecord.cache_key)
    query = session.query(EvaluationRecord).filter(EvaluationRecord.kind == kind)
    if keys is None:
        return [r.to_dict() for r in query.order_by(*order)]
    keys = list(keys)
    records = []
    for start in range(0, len(keys), _KEY_CHUNK):
        chunk = keys[start:start + _KEY_CHUNK]
        records.extend(r.to_dict() for r in query.filter(EvaluationRecord.cache_key.in_(chunk)))
    return sorted(records, key=lambda r: (r["source_id"], r["run_index"], r["cache_key"]))


def delete_records(session: SessionType, keys: Iterable[str], status: str) -> int:
    """删除给定缓存键中状态为 status 的记录（--retry-errors）。调用方负责提交。"""
    keys = list(keys)
    deleted = 0
    for start in range(0, len(keys), _KEY_CHUNK):
        chunk = keys[start:start + _KEY_CHUNK]
        deleted += (session.query(EvaluationRecord)
                    .filter(EvaluationRecord.cache_key.in_(chunk), EvaluationRecord.status == status)
                    .delete(synchronize_session=False))
    return deleted


def export_jsonl(session: SessionType, path: Union[str, Path], kind: Optional[str] = None) -> int:
    """以确定的顺序导出存储，每行一条记录，带 schema_version。"""
    query = session.query(EvaluationRecord)
    if kind is not None:
        query = query.filter(EvaluationRecord.kind == kind)
    query = query.order_by(EvaluationRecord.kind, EvaluationRecord.source_id,
                           EvaluationRecord.run_index, EvaluationRecord.cache_key)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with path.open("w", encoding="utf-8") as fh:
        for record in query.yield_per(_KEY_CHUNK):
            fh.write(json.dumps(record.to_dict(), ensure_ascii=False, sort_keys=True, default=str) + "\n")
            count += 1
    return count
