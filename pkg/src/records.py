"""Record Stream Module for the Retrosynthesis Engine.

Writes line-delimited JSON records (predictions, metrics, training history)
to a file or to stdout for machine consumption.
"""

import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Optional

import pytz

logger = logging.getLogger(__name__)

DEFAULT_TIMEZONE = 'UTC'


def timestamp(timezone: Optional[str] = None) -> str:
    """
    Current time as an ISO-8601 string.

    Uses the TIMEZONE environment variable when no zone is given.
    """
    zone = timezone or os.environ.get('TIMEZONE', DEFAULT_TIMEZONE)
    try:
        tz = pytz.timezone(zone)
    except pytz.exceptions.UnknownTimeZoneError:
        logger.warning(f"Unknown timezone {zone!r}, falling back to {DEFAULT_TIMEZONE}")
        tz = pytz.timezone(DEFAULT_TIMEZONE)
    return datetime.now(tz).isoformat(timespec='seconds')


def encode_record(record: Mapping) -> str:
    """One record as a single JSON line with sorted keys."""
    return json.dumps(record, sort_keys=True, ensure_ascii=False)


def write_records(
    records: Iterable[Mapping],
    path: Optional[str] = None,
    append: bool = False,
) -> bool:
    """
    Write records as JSON lines.

    Args:
        records: Mappings of JSON-compatible values
        path: Output file; stdout when None
        append: Append to an existing file instead of replacing it

    Returns:
        True on success, False on failure

    Note:
        Logs errors but doesn't raise exceptions so a finished run is never lost
        to an output problem.
    """
    try:
        lines = ''.join(encode_record(r) + '\n' for r in records)
    except (TypeError, ValueError) as e:
        logger.error(f"Record is not serializable: {e}")
        return False

    if path is None:
        sys.stdout.write(lines)
        sys.stdout.flush()
        return True

    try:
        target = Path(path)
        target.parent.mkdir(parents=True, exist_ok=True)
        with target.open('a' if append else 'w', encoding='utf-8') as handle:
            handle.write(lines)
        logger.info(f"Wrote records to {target}")
        return True
    except OSError as e:
        logger.error(f"Could not write records to {path}: {e}")
        return False


def read_records(path: str) -> list:
    """
    Read a JSON-lines file back; blank lines are skipped.

    Raises:
        FileNotFoundError: If path does not exist
        ValueError: On a malformed line
    """
    records = []
    with open(path, encoding='utf-8') as handle:
        for number, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise ValueError(f"{path}:{number}: {e}") from e
    return records
