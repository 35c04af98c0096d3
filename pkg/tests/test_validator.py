#!/usr/bin/env python3
"""
Unit tests for the raw-row validation module.
"""

import json
import sys
from pathlib import Path

import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from errors import ParseError
from validator import (
    LASTFM_SCHEMA,
    MOVIELENS_SCHEMA,
    IngestReport,
    RowValidator,
    ValidationResult,
    save_report,
)


class TestValidationResult:
    """Tests for ValidationResult dataclass."""

    def test_valid_result(self):
        result = ValidationResult(valid=True, errors=[], record={"userId": 1})
        assert result.valid is True
        assert result.errors == []
        assert result.record == {"userId": 1}

    def test_invalid_result(self):
        result = ValidationResult(valid=False, errors=["error1", "error2"])
        assert result.valid is False
        assert len(result.errors) == 2


class TestIngestReport:
    """Tests for IngestReport dataclass."""

    def test_add_error(self):
        report = IngestReport(source_file="ratings.csv")
        report.add_error("userId", 2, "userId: expected integer, got 'x'")
        report.add_error("userId", 3, "userId: expected integer, got 'y'")
        report.add_error("duplicate", 4, "duplicate pair: (1, 2)")

        assert report.errors_by_type["userId"] == 2
        assert report.errors_by_type["duplicate"] == 1
        assert len(report.sample_errors) == 3

    def test_sample_errors_limit(self):
        """Test that sample_errors is limited to 10 entries."""
        report = IngestReport(source_file="ratings.csv")
        for i in range(15):
            report.add_error("error", i, f"error {i}")

        assert len(report.sample_errors) == 10
        assert report.errors_by_type["error"] == 15


class TestRowValidatorMovielens:
    """Tests for MovieLens row validation."""

    def setup_method(self):
        self.validator = RowValidator()
        self.valid_row = {"userId": "1", "movieId": "31", "rating": "2.5", "timestamp": "1260759144"}

    def test_valid_row(self):
        result = self.validator.validate_row(self.valid_row, MOVIELENS_SCHEMA)
        assert result.valid is True
        assert result.record == {"userId": 1, "movieId": 31, "rating": 2.5, "timestamp": 1260759144}

    def test_missing_field(self):
        row = dict(self.valid_row, movieId="")
        result = self.validator.validate_row(row, MOVIELENS_SCHEMA)
        assert result.valid is False
        assert "missing required field: movieId" in result.errors

    def test_nan_counts_as_missing(self):
        row = dict(self.valid_row, timestamp=float("nan"))
        result = self.validator.validate_row(row, MOVIELENS_SCHEMA)
        assert result.valid is False
        assert "missing required field: timestamp" in result.errors

    def test_non_integer_id(self):
        row = dict(self.valid_row, userId="abc")
        result = self.validator.validate_row(row, MOVIELENS_SCHEMA)
        assert result.valid is False
        assert any("userId" in e and "integer" in e for e in result.errors)

    def test_negative_id(self):
        row = dict(self.valid_row, movieId="-3")
        result = self.validator.validate_row(row, MOVIELENS_SCHEMA)
        assert result.valid is False

    def test_rating_value_is_not_thresholded(self):
        row = dict(self.valid_row, rating="0.5")
        assert self.validator.validate_row(row, MOVIELENS_SCHEMA).valid is True

    def test_infinite_rating(self):
        row = dict(self.valid_row, rating="inf")
        result = self.validator.validate_row(row, MOVIELENS_SCHEMA)
        assert result.valid is False
        assert any("finite" in e for e in result.errors)


class TestRowValidatorLastfm:
    """Tests for LastFM row validation."""

    def setup_method(self):
        self.validator = RowValidator()

    def test_valid_row(self):
        row = {"userID": "2", "artistID": "51", "weight": "13883"}
        result = self.validator.validate_row(row, LASTFM_SCHEMA)
        assert result.valid is True
        assert result.record["artistID"] == 51

    def test_negative_weight(self):
        row = {"userID": "2", "artistID": "51", "weight": "-1"}
        assert self.validator.validate_row(row, LASTFM_SCHEMA).valid is False


class TestValidateRows:
    """Tests for whole-file validation."""

    def setup_method(self):
        self.validator = RowValidator()

    def rows(self, *pairs):
        return [{"userId": str(u), "movieId": str(i), "rating": "4.0", "timestamp": "1"} for u, i in pairs]

    def test_collects_unique_pairs(self):
        pairs, report = self.validator.validate_rows(self.rows((1, 10), (2, 10), (1, 10)), "movielens", "r.csv")
        assert pairs == [(1, 10), (2, 10)]
        assert report.total_count == 3
        assert report.valid_count == 2
        assert report.duplicate_count == 1
        assert report.sample_errors[0]["line_number"] == 4

    def test_strict_raises_with_line_number(self):
        rows = self.rows((1, 10), (2, 10))
        rows[1]["movieId"] = "x"
        with pytest.raises(ParseError) as exc:
            self.validator.validate_rows(rows, "movielens", "r.csv")
        assert exc.value.line_number == 3
        assert exc.value.path == "r.csv"

    def test_lenient_mode_skips_invalid(self):
        rows = self.rows((1, 10), (2, 10))
        rows[0]["userId"] = ""
        pairs, report = self.validator.validate_rows(rows, "movielens", "r.csv", strict=False)
        assert pairs == [(2, 10)]
        assert report.invalid_count == 1
        assert report.errors_by_type["missing required field"] == 1

    def test_explicit_line_numbers(self):
        rows = self.rows((1, 10), (2, 10))
        rows[1]["movieId"] = "x"
        with pytest.raises(ParseError) as exc:
            self.validator.validate_rows(rows, "movielens", "r.csv", line_numbers=[2, 7])
        assert exc.value.line_number == 7
        assert ":7:" in str(exc.value)

    def test_line_numbers_must_match_rows(self):
        with pytest.raises(ValueError):
            self.validator.validate_rows(self.rows((1, 10)), "movielens", "r.csv", line_numbers=[2, 3])

    def test_unknown_source(self):
        with pytest.raises(ValueError):
            self.validator.validate_rows([], "netflix")


class TestSaveReport:
    """Tests for saving ingest reports."""

    def test_save_report(self, tmp_path):
        report = IngestReport(source_file="ratings.csv", total_count=100, valid_count=95, duplicate_count=5)
        report.add_error("duplicate", 7, "duplicate pair: (1, 2)")

        output_path = tmp_path / "nested" / "report.json"
        save_report(report, str(output_path))

        with open(output_path) as f:
            saved = json.load(f)

        assert saved["source_file"] == "ratings.csv"
        assert saved["total_rows"] == 100
        assert saved["valid_rows"] == 95
        assert saved["duplicate_rows"] == 5
        assert saved["errors_by_type"] == {"duplicate": 1}
        assert "timestamp" in saved
