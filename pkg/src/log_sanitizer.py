"""
Log Sanitization and Repetition Control for Point2Insert
Redacts user paths, forces ASCII, and silences warnings that repeat in loops
(scene rejections during synthesis, per-record bench failures)
"""

import logging
import re
import threading
from typing import Dict, Any
from collections import defaultdict


class SanitizedFormatter(logging.Formatter):
    """
    Formatter that redacts home-directory paths, keeps output ASCII, and
    tracks repeated warnings/errors so they can be suppressed
    """

    def __init__(self, fmt=None, datefmt=None):
        super().__init__(fmt, datefmt)

        self.redaction_patterns = [
            (r'(/[uU]sers/)[^\s/]+', r'\1[REDACTED]'),
            (r'(/home/)[^\s/]+', r'\1[REDACTED]'),
            (r'([A-Za-z]:\\[uU]sers\\)[^\s\\]+', r'\1[REDACTED]'),
        ]
        self.compiled_patterns = [(re.compile(pattern), replacement)
                                  for pattern, replacement in self.redaction_patterns]

        self._lock = threading.Lock()
        self.error_counts = defaultdict(int)
        self.max_error_repetitions = 3
        self.suppressed_errors = set()

    def format(self, record):
        formatted = super().format(record)

        sanitized = formatted
        for pattern, replacement in self.compiled_patterns:
            sanitized = pattern.sub(replacement, sanitized)

        return sanitized.encode('ascii', errors='replace').decode('ascii')

    def track_error(self, error_message: str) -> bool:
        """
        Count a warning/error signature.

        Returns:
            True if the message should be logged, False once it has repeated
            more than max_error_repetitions times
        """
        signature = self._normalize_error_message(error_message)
        # Synthesis and bench workers share this formatter
        with self._lock:
            self.error_counts[signature] += 1
            if self.error_counts[signature] > self.max_error_repetitions:
                self.suppressed_errors.add(signature)
                return False
        return True

    def _normalize_error_message(self, message: str) -> str:
        """Strip numbers and quoted strings so retries share one signature."""
        normalized = re.sub(r'\b\d+\.\d+(e[-+]?\d+)?\b', '[NUMBER]', message)
        normalized = re.sub(r'\b\d+\b', '[NUMBER]', normalized)
        normalized = re.sub(r"'[^']*'", '[STRING]', normalized)
        normalized = re.sub(r'"[^"]*"', '[STRING]', normalized)
        normalized = re.sub(r'\s+', ' ', normalized)
        return normalized.strip()

    def get_suppression_summary(self) -> Dict[str, Any]:
        with self._lock:
            return {
                'total_suppressed': len(self.suppressed_errors),
                'suppressed_errors': sorted(self.suppressed_errors),
                'error_counts': dict(self.error_counts),
                'max_repetitions': self.max_error_repetitions
            }

    def reset_tracking(self):
        with self._lock:
            self.error_counts.clear()
            self.suppressed_errors.clear()


# Shared by every handler so suppression counts are global
sanitized_formatter = SanitizedFormatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')


def log_error_with_tracking(logger: logging.Logger, message: str, *args, **kwargs):
    if sanitized_formatter.track_error(message):
        logger.error(message, *args, **kwargs)


def log_warning_with_tracking(logger: logging.Logger, message: str, *args, **kwargs):
    if sanitized_formatter.track_error(message):
        logger.warning(message, *args, **kwargs)
