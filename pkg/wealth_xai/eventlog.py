"""Opt-in JSONL event log.

If WEALTH_XAI_LOG_DIR is set, every completed stage appends one entry
``{ts, stage, input, output}`` to ``$WEALTH_XAI_LOG_DIR/{run_id}.jsonl``.
No-op when the variable is unset or empty. Logging errors are swallowed.
"""
from __future__ import annotations

import datetime
import json
import os
from pathlib import Path
from typing import Any

ENV_LOG_DIR = "WEALTH_XAI_LOG_DIR"


def utc_timestamp() -> str:
    return datetime.datetime.now(datetime.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def log_stage_event(run_id: str, stage: str, input_data: Any, output_data: Any, environ=None) -> Path | None:
    environ = os.environ if environ is None else environ
    log_dir = environ.get(ENV_LOG_DIR, "").strip()
    if not log_dir:
        return None
    try:
        path = Path(log_dir)
        path.mkdir(parents=True, exist_ok=True)
        entry = {"ts": utc_timestamp(), "stage": stage, "input": input_data, "output": output_data}
        target = path / f"{run_id}.jsonl"
        with target.open("a") as f:
            f.write(json.dumps(entry, default=str) + "\n")
        return target
    except Exception:
        return None
