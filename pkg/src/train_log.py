#!/usr/bin/env python3
"""
Training log for QAT runs.

Writes one record per iteration to a JSONL file (append-only, `seq`
numbered) and keeps the same records in memory for analysis.
"""

import json
import time
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np


class TrainLog:
    """
    Per-iteration training records.

    Stores:
    - Loss terms (total, l_out, l_sen)
    - Per-layer gradient norms and sign-flip rates
    - Oscillation fraction and freeze events
    """

    def __init__(self, path: Optional[Path] = None, per_layer: bool = True, append: bool = False):
        """
        Initialize TrainLog

        Args:
            path: JSONL file to write (in-memory only when None)
            per_layer: Keep full per-layer payloads in the file
            append: Continue the sequence of an existing file
        """
        self.path = Path(path) if path is not None else None
        self.per_layer = per_layer
        self.records: List[Dict[str, Any]] = []
        self.summary: Dict[str, Any] = {}

        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append and self.path.exists():
                self.path.unlink()

        # Track record sequence number
        self.seq = self._get_last_seq_number() + 1

    def _get_last_seq_number(self) -> int:
        """
        Get the last sequence number from the log file

        Returns:
            Last sequence number (0 if file empty/doesn't exist)
        """
        if self.path is None or not self.path.exists():
            return 0

        try:
            with open(self.path, 'r', encoding='utf-8') as f:
                lines = f.readlines()
                if not lines:
                    return 0

                last_line = lines[-1].strip()
                if last_line:
                    data = json.loads(last_line)
                    return data.get("seq", 0)
        except (json.JSONDecodeError, FileNotFoundError, KeyError):
            pass

        return 0

    def __len__(self) -> int:
        return len(self.records)

    def record(self, iteration: int, **fields: Any) -> Dict[str, Any]:
        """
        Log one iteration.

        Args:
            iteration: Optimizer step index
            **fields: loss, l_out, l_sen, grad_norm, flip_rate, oscillation_pct, freeze_events, ...

        Returns:
            The in-memory record
        """
        entry = {"seq": self.seq, "iteration": int(iteration)}
        entry.update(fields)
        self.records.append(entry)

        if self.path is not None:
            try:
                with open(self.path, 'a', encoding='utf-8') as f:
                    f.write(json.dumps(self._sanitize(entry), sort_keys=True) + '\n')
            except OSError as e:
                print(f"Warning: Failed to write training log: {e}")

        self.seq += 1
        return entry

    def _sanitize(self, entry: Dict[str, Any]) -> Dict[str, Any]:
        """
        Collapse per-layer payloads to summaries when per-layer logging is off

        Args:
            entry: Original record

        Returns:
            Record safe to write
        """
        if self.per_layer:
            return entry
        sanitized = entry.copy()
        for key, value in entry.items():
            if isinstance(value, dict) and value and all(isinstance(v, (int, float)) for v in value.values()):
                values = list(value.values())
                sanitized[key] = {
                    "layers": len(values),
                    "mean": float(np.mean(values)),
                    "max": float(np.max(values)),
                }
        return sanitized

    # -------------------------------------------------------------------------
    # Analysis
    # -------------------------------------------------------------------------
    def losses(self, key: str = "loss") -> List[float]:
        return [r[key] for r in self.records if key in r]

    def loss_fluctuation(self, window: int = 20) -> float:
        """
        Mean rolling standard deviation of the loss.

        Raises:
            ValueError: window < 2 or fewer records than window
        """
        if window < 2:
            raise ValueError(f"window must be at least 2, got {window}")
        losses = np.asarray(self.losses(), dtype=np.float64)
        if losses.size < window:
            raise ValueError(f"Need {window} logged losses, have {losses.size}")
        windows = np.lib.stride_tricks.sliding_window_view(losses, window)
        return float(windows.std(axis=1).mean())

    def last(self, key: str, default: Any = None) -> Any:
        for entry in reversed(self.records):
            if key in entry:
                return entry[key]
        return default


class OperationTimer:
    """Context manager to time operations"""

    def __init__(self):
        self.start_time = None
        self.duration_ms = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is not None:
            self.duration_ms = (time.perf_counter() - self.start_time) * 1000

    def get_duration(self) -> float:
        """Get duration in milliseconds"""
        return self.duration_ms
