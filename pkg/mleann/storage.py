import sqlite3
import os
import json
import time
from typing import Optional, List
from .utils import logger, MleannError


class ResultStore:
    """Finished benchmark cells, keyed by a deterministic cell key"""

    def __init__(self, db_path: str):
        self.db_path = db_path
        self._conn = None
        self._init_db()
        logger.info(f"Using SQLite result store: {db_path}")

    def _get_conn(self):
        if self._conn is None:
            self._conn = sqlite3.connect(self.db_path)
        return self._conn

    def _init_db(self):
        conn = self._get_conn()
        cursor = conn.cursor()
        cursor.execute("""
            CREATE TABLE IF NOT EXISTS cell_results (
                cell_key TEXT PRIMARY KEY,
                payload TEXT NOT NULL,
                recorded_at INTEGER NOT NULL
            )
        """)
        conn.commit()

    def has_result(self, cell_key: str) -> bool:
        cursor = self._get_conn().cursor()
        cursor.execute("SELECT 1 FROM cell_results WHERE cell_key = ?", (cell_key,))
        return cursor.fetchone() is not None

    def save_result(self, cell_key: str, payload: dict):
        conn = self._get_conn()
        conn.execute(
            "INSERT OR REPLACE INTO cell_results (cell_key, payload, recorded_at) VALUES (?, ?, ?)",
            (cell_key, json.dumps(payload, sort_keys=True), int(time.time() * 1000))
        )
        conn.commit()
        logger.debug(f"Stored cell result: {cell_key}")

    def load_result(self, cell_key: str) -> Optional[dict]:
        cursor = self._get_conn().cursor()
        cursor.execute("SELECT payload FROM cell_results WHERE cell_key = ?", (cell_key,))
        row = cursor.fetchone()
        return json.loads(row[0]) if row else None

    def keys(self) -> List[str]:
        cursor = self._get_conn().cursor()
        cursor.execute("SELECT cell_key FROM cell_results ORDER BY cell_key")
        return [row[0] for row in cursor.fetchall()]

    def close(self):
        if self._conn:
            self._conn.close()
            self._conn = None


store_impl: Optional[ResultStore] = None


def init_storage(db_path: Optional[str] = None) -> ResultStore:
    global store_impl
    if store_impl:
        return store_impl

    db_path = db_path or os.getenv('MLEANN_RESULT_STORE', './data/results.db')

    # Ensure data directory exists
    directory = os.path.dirname(db_path)
    if directory:
        os.makedirs(directory, exist_ok=True)

    store_impl = ResultStore(db_path)
    return store_impl


def _require_store() -> ResultStore:
    if not store_impl:
        raise MleannError("Result store not initialized. Call init_storage() first.")
    return store_impl


def has_result(cell_key: str) -> bool:
    return _require_store().has_result(cell_key)


def save_result(cell_key: str, payload: dict):
    _require_store().save_result(cell_key, payload)


def load_result(cell_key: str) -> Optional[dict]:
    return _require_store().load_result(cell_key)


def storage_active() -> bool:
    return store_impl is not None


def close_storage():
    global store_impl
    if store_impl:
        store_impl.close()
        store_impl = None
