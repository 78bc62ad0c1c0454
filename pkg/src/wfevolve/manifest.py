"""Dataset manifests: one JSONL file of cases plus a JSON split file.

Case rows::

    {"case_id": "c001", "image_ref": "images/c001.jpg", "label": "acne", "query_vector": [...]}

``query_vector`` is optional. The split file holds the label vocabulary and
the case ids of each split::

    {"label_vocabulary": ["acne", ...], "train": [...], "val": [...], "test": [...]}

Relative ``image_ref`` paths are resolved against the manifest's directory.
"""

from __future__ import annotations

import json
import os
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Any

from wfevolve.errors import ParseError, SplitOverlap, UnknownLabel
from wfevolve.execution import CaseRecord

SPLITS = ("train", "val", "test")
_CASE_FIELDS = {"case_id", "image_ref", "label", "query_vector"}
_SPLIT_FIELDS = {"label_vocabulary", *SPLITS}


@dataclass(frozen=True)
class DatasetManifest:
    cases: dict[str, CaseRecord]
    splits: dict[str, tuple[str, ...]]
    label_vocabulary: tuple[str, ...]

    def split(self, name: str) -> list[CaseRecord]:
        if name not in self.splits:
            raise KeyError(f"unknown split {name!r}")
        return [self.cases[cid] for cid in self.splits[name]]

    def class_counts(self, name: str) -> dict[str, int]:
        counts = Counter(c.label for c in self.split(name))
        return {label: counts.get(label, 0) for label in self.label_vocabulary}

    def summary(self) -> dict[str, Any]:
        return {
            "cases": len(self.cases),
            "label_vocabulary": list(self.label_vocabulary),
            "splits": {name: {"size": len(ids), "per_class": self.class_counts(name)} for name, ids in self.splits.items()},
        }


def _resolve_ref(ref: str, base: Path) -> str:
    if re.match(r"^[a-z][a-z0-9+.-]*:", ref, re.I) or os.path.isabs(ref):
        return ref
    return str(base / ref)


def _read_rows(path: Path) -> list[dict[str, Any]]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(row, dict):
                raise ParseError(f"{path}:{lineno}: expected an object")
            unknown = set(row) - _CASE_FIELDS
            missing = {"case_id", "image_ref", "label"} - set(row)
            if unknown or missing:
                detail = ", ".join([f"unknown field {k!r}" for k in sorted(unknown)] + [f"missing {k!r}" for k in sorted(missing)])
                raise ParseError(f"{path}:{lineno}: {detail}")
            rows.append(row)
    return rows


def load_manifest(path: str | os.PathLike, splits_path: str | os.PathLike) -> DatasetManifest:
    path, splits_path = Path(path), Path(splits_path)
    try:
        split_doc = json.loads(splits_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{splits_path}: {exc.msg}") from None
    if not isinstance(split_doc, dict):
        raise ParseError(f"{splits_path}: expected an object")
    unknown = set(split_doc) - _SPLIT_FIELDS
    if unknown:
        raise ParseError(f"{splits_path}: unknown field(s) {', '.join(sorted(unknown))}")
    vocab = split_doc.get("label_vocabulary")
    if not isinstance(vocab, list) or not vocab or not all(isinstance(v, str) for v in vocab):
        raise ParseError(f"{splits_path}: label_vocabulary must be a non-empty list of strings")
    if len(set(vocab)) != len(vocab):
        raise ParseError(f"{splits_path}: label_vocabulary has duplicates")
    vocab = tuple(vocab)

    cases: dict[str, CaseRecord] = {}
    for row in _read_rows(path):
        cid = str(row["case_id"])
        if cid in cases:
            raise ParseError(f"{path}: duplicate case_id {cid!r}")
        label = str(row["label"])
        if label not in vocab:
            raise UnknownLabel(f"{cid}: label {label!r} is not in the vocabulary")
        cases[cid] = CaseRecord(cid, _resolve_ref(str(row["image_ref"]), path.parent), label, vocab, row.get("query_vector"))

    splits: dict[str, tuple[str, ...]] = {}
    owner: dict[str, str] = {}
    for name in SPLITS:
        ids = split_doc.get(name, [])
        if not isinstance(ids, list):
            raise ParseError(f"{splits_path}: {name} must be a list of case ids")
        for cid in ids:
            if cid not in cases:
                raise ParseError(f"{splits_path}: {name} lists unknown case {cid!r}")
            if cid in owner:
                if owner[cid] == name:
                    raise SplitOverlap(f"case {cid!r} is listed twice in {name}")
                raise SplitOverlap(f"case {cid!r} appears in both {owner[cid]} and {name}")
            owner[cid] = name
        splits[name] = tuple(ids)
    return DatasetManifest(cases, splits, vocab)
