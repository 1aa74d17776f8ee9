"""Utils package initialization."""

from .binary import decode_arrays, encode_arrays, read_arrays, write_arrays
from .helpers import CsvLog, dump_toml, format_error_response, format_float, read_csv_rows, write_json
from .logging_setup import setup_logging

__all__ = [
    "decode_arrays",
    "encode_arrays",
    "read_arrays",
    "write_arrays",
    "CsvLog",
    "dump_toml",
    "format_error_response",
    "format_float",
    "read_csv_rows",
    "write_json",
    "setup_logging",
]
