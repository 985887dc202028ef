"""
Artifact writer for experiment runs.

Every CSV has a header row, minimal RFC-4180 quoting, "\\n" line endings and
floats printed with 17 significant digits. Field dumps use the CBF1 binary
format. manifest.json lists every artifact with its size and sha256 and
carries no timestamps, so reruns with the same seed hash identically.
"""

import csv
import hashlib
import json
import logging
import os

import pandas as pd

from bound_diagnostics import REPORT_COLUMNS
from cbf_integrator import RECORD_COLUMNS
from spectral_field import field_to_bytes

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"


class OutputError(OSError):
    """Writing artifacts failed; files from the failing call were removed."""


def _csv_bytes(frame):
    text = frame.to_csv(index=False, float_format=FLOAT_FORMAT, quoting=csv.QUOTE_MINIMAL, lineterminator="\n")
    return text.encode("utf-8")


def reports_frame(reports):
    """One row per BoundReport, in the order given."""
    return pd.DataFrame([report.to_row() for report in reports], columns=list(REPORT_COLUMNS))


def summary_frame(summary):
    if summary is None:
        return pd.DataFrame(columns=["quantity", "value"])
    if isinstance(summary, pd.DataFrame):
        return summary
    return pd.DataFrame(list(summary.items()), columns=["quantity", "value"])


def series_frame(record):
    if isinstance(record, pd.DataFrame):
        return record
    if not len(record):
        return pd.DataFrame(columns=list(RECORD_COLUMNS))
    return record.to_frame()


def _artifacts(records, reports, fields, summary, tables):
    yield "reports.csv", _csv_bytes(reports_frame(reports))
    yield "summary.csv", _csv_bytes(summary_frame(summary))
    for name, record in sorted((records or {}).items()):
        yield f"series_{name}.csv", _csv_bytes(series_frame(record))
    for name, table in sorted((tables or {}).items()):
        yield f"{name}.csv", _csv_bytes(table)
    for name, u in sorted((fields or {}).items()):
        yield f"{name}.cbf", field_to_bytes(u)


def manifest_entries(directory, names):
    entries = []
    for name in sorted(names):
        with open(os.path.join(directory, name), "rb") as f:
            payload = f.read()
        entries.append({"file": name, "bytes": len(payload), "sha256": hashlib.sha256(payload).hexdigest()})
    return entries


def write_outputs(records, reports, directory, fields=None, summary=None, tables=None):
    """
    Write run series, bound reports, summary, extra tables and field dumps
    into `directory`, then the manifest. Returns the list of written paths.

    records: {name: RunRecord or DataFrame}; reports: list of BoundReport;
    fields: {name: SpectralField}; summary: dict or DataFrame;
    tables: {name: DataFrame}.
    """
    if not os.path.isdir(directory):
        raise OutputError(f"output directory {directory!r} does not exist")

    written = []
    try:
        for name, payload in _artifacts(records, reports, fields, summary, tables):
            path = os.path.join(directory, name)
            written.append(path)
            with open(path, "wb") as f:
                f.write(payload)
        manifest = {"artifacts": manifest_entries(directory, [os.path.basename(p) for p in written])}
        path = os.path.join(directory, MANIFEST_NAME)
        written.append(path)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as exc:
        for path in written:
            try:
                os.remove(path)
            except OSError:
                pass
        logger.error("writing %s failed, removed %d partial files: %s", directory, len(written), exc)
        raise OutputError(f"could not write outputs to {directory}: {exc}") from exc

    return written


def read_manifest(directory):
    with open(os.path.join(directory, MANIFEST_NAME), encoding="utf-8") as f:
        return json.load(f)
