"""Delimited-text manifests for corpora and support banks."""

from __future__ import annotations

import csv
from pathlib import Path


class ManifestError(ValueError):
    """Schema violation in a manifest; message carries the file and line number."""


def read_manifest(path: str | Path, columns: tuple[str, ...]) -> list[dict[str, str]]:
    """Rows of a CSV manifest with a header naming at least ``columns``.

    Relative paths in columns ending in ``path`` resolve against the manifest's directory.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"{path}: manifest not found")
    base = path.parent
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ManifestError(f"{path}:1: empty manifest") from None
        missing = [c for c in columns if c not in header]
        if missing:
            raise ManifestError(f"{path}:1: header lacks column(s) {', '.join(missing)}")
        rows = []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not cell.strip() for cell in raw) or raw[0].startswith("#"):
                continue
            if len(raw) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} fields, got {len(raw)}")
            row = {h: cell.strip() for h, cell in zip(header, raw)}
            for c in columns:
                if not row[c]:
                    raise ManifestError(f"{path}:{lineno}: empty {c!r}")
                if c.endswith("path") and not Path(row[c]).is_absolute():
                    row[c] = str(base / row[c])
            row["_line"] = str(lineno)
            rows.append(row)
    if not rows:
        raise ManifestError(f"{path}: manifest has no entries")
    return rows


def write_manifest(path: str | Path, columns: tuple[str, ...], rows) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([row[c] for c in columns])


def read_label_track(path: str | Path) -> list[int]:
    """One label per detection frame: 1 cough, 0 other, -1 unlabeled (ignored in training)."""
    labels = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1", "-1"):
            raise ManifestError(f"{path}:{lineno}: label must be 0, 1 or -1, got {line!r}")
        labels.append(int(line))
    return labels


def write_label_track(path: str | Path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))
