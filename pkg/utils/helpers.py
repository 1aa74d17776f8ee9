"""Helper functions for the application."""

import csv
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

from config import settings


def format_error_response(status_code: int, detail: str) -> Dict[str, Any]:
    """Format an error response.

    Args:
        status_code: HTTP status code
        detail: Error details

    Returns:
        Formatted error response
    """
    return {"status_code": status_code, "detail": detail}


def format_float(value: Optional[float], spec: Optional[str] = None) -> str:
    """Render a float for CSV output; None becomes an empty cell."""
    if value is None:
        return ""
    return format(value, spec or settings.CSV_FLOAT_FORMAT)


class CsvLog:
    """Append-only CSV file with a fixed header, flushed after every row.

    Rows already written survive if the run fails part-way.
    """

    def __init__(self, path: Union[str, Path], header: List[str]):
        self.path = Path(path)
        self.header = list(header)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._handle = self.path.open("w", newline="", encoding="utf-8")
        self._writer = csv.writer(self._handle, lineterminator="\n")
        self._writer.writerow(self.header)
        self._handle.flush()

    def append(self, row: Mapping[str, Any]) -> None:
        cells = []
        for column in self.header:
            value = row.get(column)
            cells.append(format_float(value) if isinstance(value, float) else ("" if value is None else value))
        self._writer.writerow(cells)
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()

    def __enter__(self) -> "CsvLog":
        return self

    def __exit__(self, *exc_info) -> None:
        self.close()


def read_csv_rows(path: Union[str, Path]) -> List[Dict[str, str]]:
    with Path(path).open(newline="", encoding="utf-8") as handle:
        return list(csv.DictReader(handle))


def _toml_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    raise TypeError(f"cannot render {type(value).__name__} as TOML")


def dump_toml(data: Mapping[str, Any], comments: Iterable[str] = ()) -> str:
    """Render nested mappings of scalars as TOML with dotted section headers.

    Floats use ``repr`` so the text parses back to identical values.
    """
    lines = [f"# {comment}" for comment in comments]

    def emit(table: Mapping[str, Any], prefix: str) -> None:
        scalars = {k: v for k, v in table.items() if not isinstance(v, Mapping)}
        nested = {k: v for k, v in table.items() if isinstance(v, Mapping)}
        if prefix and scalars:
            lines.append("")
            lines.append(f"[{prefix}]")
        for key, value in scalars.items():
            if value is not None:
                lines.append(f"{key} = {_toml_value(value)}")
        for key, value in nested.items():
            emit(value, f"{prefix}.{key}" if prefix else key)

    emit(data, "")
    return "\n".join(lines) + "\n"


def write_json(path: Union[str, Path], payload: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
