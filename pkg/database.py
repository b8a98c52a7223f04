"""SQLite request log for the feed service."""
import os
import sqlite3
from contextlib import contextmanager
from typing import Any, Dict, Optional

import config

# Empty path disables request logging
DB_PATH = config.REQUEST_LOG


@contextmanager
def get_db_connection(db_path: Optional[str] = None):
    """Context manager for database connections."""
    conn = sqlite3.connect(db_path or DB_PATH)
    conn.row_factory = sqlite3.Row  # Enable column access by name
    try:
        yield conn
        conn.commit()
    except Exception:
        conn.rollback()
        raise
    finally:
        conn.close()


def init_database(db_path: Optional[str] = None):
    """Create the request log table if it does not exist."""
    db_path = db_path or DB_PATH
    db_dir = os.path.dirname(db_path)
    if db_dir and not os.path.exists(db_dir):
        os.makedirs(db_dir, exist_ok=True)

    with get_db_connection(db_path) as conn:
        cursor = conn.cursor()
        cursor.execute('''
            CREATE TABLE IF NOT EXISTS api_requests (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                endpoint TEXT NOT NULL,
                method TEXT NOT NULL,
                status_code INTEGER,
                response_time_ms REAL,
                created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
            )
        ''')
        cursor.execute('CREATE INDEX IF NOT EXISTS idx_api_requests_created_at ON api_requests(created_at)')
    print(f"✅ Request log ready at {db_path}")


def log_api_request(endpoint: str, method: str, status_code: int, response_time_ms: float,
                    db_path: Optional[str] = None):
    """Log an API request."""
    with get_db_connection(db_path) as conn:
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO api_requests (endpoint, method, status_code, response_time_ms)
            VALUES (?, ?, ?, ?)
        ''', (endpoint, method, status_code, response_time_ms))


def get_stats(db_path: Optional[str] = None) -> Dict[str, Any]:
    """Request totals, per-status counts and mean latency."""
    with get_db_connection(db_path) as conn:
        cursor = conn.cursor()

        cursor.execute('SELECT COUNT(*) as count, AVG(response_time_ms) as avg_ms FROM api_requests')
        row = cursor.fetchone()
        total_requests = row['count']
        avg_ms = row['avg_ms']

        cursor.execute('''
            SELECT status_code, COUNT(*) as count
            FROM api_requests
            GROUP BY status_code
        ''')
        by_status = {str(r['status_code']): r['count'] for r in cursor.fetchall()}

        return {
            "total_api_requests": total_requests,
            "requests_by_status": by_status,
            "avg_response_time_ms": round(avg_ms, 3) if avg_ms is not None else None,
        }
