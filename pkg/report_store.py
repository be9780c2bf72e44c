#
# report_store.py
# SQLite history of run reports and pass-rate summaries over it.

import json
import logging
import math
import sqlite3
from datetime import datetime
from pathlib import Path

import numpy as np
import pandas as pd

from config import DEFAULT_DB_PATH

logger = logging.getLogger(__name__)

TABLE_NAME = "run_reports"

_SCHEMA = f"""
CREATE TABLE IF NOT EXISTS {TABLE_NAME} (
    recorded_at TEXT NOT NULL,
    scenario TEXT NOT NULL,
    check_id TEXT NOT NULL,
    passed INTEGER NOT NULL,
    z REAL,
    lhs_mean REAL,
    rhs_mean REAL,
    paired_mean REAL,
    threshold REAL,
    wall_ms INTEGER,
    version TEXT,
    report TEXT NOT NULL
)
"""


def json_safe(value):
    """Copy of a report value with non-finite floats replaced by None."""
    if isinstance(value, dict):
        return {key: json_safe(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [json_safe(item) for item in value]
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (float, np.floating)):
        return float(value) if math.isfinite(value) else None
    if isinstance(value, np.integer):
        return int(value)
    return value


def get_connection(db_path=DEFAULT_DB_PATH):
    """Open (and create if needed) the history database."""
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(db_path, check_same_thread=False)
    conn.execute(_SCHEMA)
    return conn


def save_report(conn, report, recorded_at=None):
    """Append one report (a dict with the report key set) to the history."""
    recorded_at = recorded_at or datetime.now()
    conn.execute(
        f"INSERT INTO {TABLE_NAME} VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)",
        (
            recorded_at.isoformat(timespec="seconds"),
            report["scenario"],
            report["check"],
            int(bool(report["pass"])),
            json_safe(report["paired"]["z"]),
            report["lhs"]["mean"],
            report["rhs"]["mean"],
            report["paired"]["mean"],
            report["threshold"],
            report["wall_ms"],
            report["version"],
            json.dumps(json_safe(report), allow_nan=False),
        ),
    )
    conn.commit()
    logger.info("recorded %s/%s in history", report["scenario"], report["check"])


def read_reports(conn, scenario=None, check=None):
    """History as a DataFrame, oldest first, optionally filtered."""
    query = f"SELECT * FROM {TABLE_NAME}"
    clauses, params = [], []
    if scenario:
        clauses.append("scenario = ?")
        params.append(scenario)
    if check:
        clauses.append("check_id = ?")
        params.append(check)
    if clauses:
        query += " WHERE " + " AND ".join(clauses)
    query += " ORDER BY recorded_at, rowid"
    df = pd.read_sql_query(query, conn, params=params)
    df["recorded_at"] = pd.to_datetime(df["recorded_at"], errors="coerce")
    df["passed"] = df["passed"].astype(bool)
    return df


def summarize_reports(df):
    """Pass counts per scenario and check.

    Returns:
        dict: summary_data[scenario][check] with total, pass, fail,
        pass_rate (percent string), last_z and last_run.
    """
    summary_data = {}
    if df.empty:
        return summary_data
    for (scenario, check), group in df.groupby(["scenario", "check_id"], sort=True):
        total = len(group)
        passed = int(group["passed"].sum())
        last = group.iloc[-1]
        summary_data.setdefault(scenario, {})[check] = {
            "total": total,
            "pass": passed,
            "fail": total - passed,
            "pass_rate": f"{passed / total * 100:.1f}%",
            "last_z": None if pd.isna(last["z"]) else float(last["z"]),
            "last_run": last["recorded_at"],
        }
    return summary_data


def summary_frame(summary_data):
    rows = []
    for scenario in sorted(summary_data):
        for check, data in sorted(summary_data[scenario].items()):
            rows.append({"scenario": scenario, "check": check, **data})
    columns = ["scenario", "check", "total", "pass", "fail", "pass_rate", "last_z", "last_run"]
    return pd.DataFrame(rows, columns=columns)
