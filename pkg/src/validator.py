#!/usr/bin/env python3
"""
Row Validation Module for GGCF dataset ingestion.
Validates raw MovieLens / LastFM rows before they become interactions.
"""

import json
import math
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Set, Tuple

from loguru import logger

from errors import ParseError

# Raw files carry one header line; data starts on line 2
FIRST_DATA_LINE = 2


@dataclass
class ValidationResult:
    """Result of validating a single row."""

    valid: bool
    errors: List[str] = field(default_factory=list)
    record: Optional[Dict[str, Any]] = None


@dataclass
class IngestReport:
    """Summary of validating one raw dataset file."""

    source_file: str
    total_count: int = 0
    valid_count: int = 0
    invalid_count: int = 0
    duplicate_count: int = 0
    errors_by_type: Dict[str, int] = field(default_factory=dict)
    sample_errors: List[Dict[str, Any]] = field(default_factory=list)

    def add_error(self, error_type: str, line_number: int, details: str):
        """Add an error to the report."""
        self.errors_by_type[error_type] = self.errors_by_type.get(error_type, 0) + 1
        if len(self.sample_errors) < 10:
            self.sample_errors.append(
                {
                    "line_number": line_number,
                    "error_type": error_type,
                    "details": details,
                }
            )


# Schema definitions for each raw dataset
MOVIELENS_SCHEMA = {
    "columns": ("userId", "movieId", "rating", "timestamp"),
    "required_fields": {
        "userId": {"type": "int", "validation": "non_negative"},
        "movieId": {"type": "int", "validation": "non_negative"},
        "rating": {"type": "float", "validation": "finite"},
        "timestamp": {"type": "int", "validation": None},
    },
    "key_fields": ("userId", "movieId"),
}

LASTFM_SCHEMA = {
    "columns": ("userID", "artistID", "weight"),
    "required_fields": {
        "userID": {"type": "int", "validation": "non_negative"},
        "artistID": {"type": "int", "validation": "non_negative"},
        "weight": {"type": "float", "validation": "non_negative"},
    },
    "key_fields": ("userID", "artistID"),
}

SCHEMAS = {
    "movielens": MOVIELENS_SCHEMA,
    "lastfm": LASTFM_SCHEMA,
}


class RowValidator:
    """Validates and coerces raw interaction rows."""

    def __init__(self):
        self.schemas = SCHEMAS

    def _is_missing(self, value: Any) -> bool:
        if value is None:
            return True
        if isinstance(value, float) and math.isnan(value):
            return True
        return isinstance(value, str) and value.strip() == ""

    def _coerce(self, value: Any, expected_type: str) -> Tuple[bool, Any, str]:
        """Convert a raw text cell to ``expected_type``."""
        text = str(value).strip()
        if expected_type == "int":
            try:
                return True, int(text), ""
            except ValueError:
                return False, None, f"expected integer, got {text!r}"
        if expected_type == "float":
            try:
                return True, float(text), ""
            except ValueError:
                return False, None, f"expected number, got {text!r}"
        return True, text, ""

    def _check_validation(self, value: Any, validation: Optional[str]) -> Tuple[bool, str]:
        """Check if a coerced value passes its validation rule."""
        if validation == "non_negative":
            if not math.isfinite(value) or value < 0:
                return False, "must be a non-negative number"
        elif validation == "finite":
            if not math.isfinite(value):
                return False, "must be finite"
        return True, ""

    def validate_row(self, row: Dict[str, Any], schema: Dict[str, Any]) -> ValidationResult:
        """Validate a single raw row against a schema, returning coerced values."""
        errors = []
        record = {}
        for field_name, field_spec in schema["required_fields"].items():
            value = row.get(field_name)
            if self._is_missing(value):
                errors.append(f"missing required field: {field_name}")
                continue

            ok, converted, type_error = self._coerce(value, field_spec["type"])
            if not ok:
                errors.append(f"{field_name}: {type_error}")
                continue

            valid_ok, valid_error = self._check_validation(converted, field_spec["validation"])
            if not valid_ok:
                errors.append(f"{field_name}: {valid_error}")
                continue
            record[field_name] = converted

        return ValidationResult(valid=len(errors) == 0, errors=errors, record=record)

    def validate_rows(
        self,
        rows: List[Dict[str, Any]],
        source_type: str,
        source_file: str = "",
        strict: bool = True,
        line_numbers: Optional[Sequence[int]] = None,
    ) -> Tuple[List[Tuple[int, int]], IngestReport]:
        """
        Validate all rows from one raw file.

        Args:
            rows: Row dictionaries keyed by the schema's column names, in file order
            source_type: One of 'movielens', 'lastfm'
            source_file: Path of the raw file (for reporting)
            strict: Raise ParseError on the first invalid row instead of skipping it
            line_numbers: File line of each row (default: consecutive lines after the header)

        Returns:
            Tuple of (unique (original_user_id, original_item_id) pairs, report)
        """
        if source_type not in self.schemas:
            raise ValueError(f"Unknown source type: {source_type}")

        if line_numbers is not None and len(line_numbers) != len(rows):
            raise ValueError(f"{len(line_numbers)} line numbers for {len(rows)} rows")

        schema = self.schemas[source_type]
        user_field, item_field = schema["key_fields"]
        report = IngestReport(source_file=source_file, total_count=len(rows))

        pairs: List[Tuple[int, int]] = []
        seen: Set[Tuple[int, int]] = set()

        for idx, row in enumerate(rows):
            line_number = line_numbers[idx] if line_numbers is not None else idx + FIRST_DATA_LINE
            result = self.validate_row(row, schema)

            if not result.valid:
                if strict:
                    raise ParseError("; ".join(result.errors), path=source_file, line_number=line_number)
                report.invalid_count += 1
                for error in result.errors:
                    error_type = error.split(":")[0] if ":" in error else error
                    report.add_error(error_type, line_number, error)
                continue

            key = (result.record[user_field], result.record[item_field])
            if key in seen:
                report.duplicate_count += 1
                report.add_error("duplicate", line_number, f"duplicate pair: {key}")
                continue

            seen.add(key)
            pairs.append(key)
            report.valid_count += 1

        return pairs, report


def save_report(report: IngestReport, output_path: str) -> None:
    """
    Save an ingest report as JSON.

    Args:
        report: IngestReport to save
        output_path: Path to output JSON file
    """
    report_dict = {
        "timestamp": datetime.now().isoformat(),
        "source_file": report.source_file,
        "total_rows": report.total_count,
        "valid_rows": report.valid_count,
        "invalid_rows": report.invalid_count,
        "duplicate_rows": report.duplicate_count,
        "errors_by_type": report.errors_by_type,
        "sample_errors": report.sample_errors,
    }

    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)

    with open(output_path, "w") as f:
        json.dump(report_dict, f, indent=2)

    logger.info(f"Ingest report saved to: {output_path}")
