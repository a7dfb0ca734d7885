"""File formats: library/pixel/abundance CSV and the bundle JSON.

Lines beginning with ``#`` in any CSV are treated as comments; the CLI uses
them to record provenance. Floats in JSON are written with Python's shortest
round-trip representation, so ``load_bundle(save_bundle(b)) == b`` bit for bit.
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
import warnings
from pathlib import Path
from typing import Any, Iterable, Iterator

import numpy as np

from .core import (
    AbundanceMatrix,
    GaussianComponent,
    GmmBundle,
    PixelBlock,
    ProjectionModel,
    SpectralLibrary,
    ValidationError,
)

FORMAT_VERSION = 1


class ParseError(ValueError):
    """Malformed input file; the message carries the offending line number."""


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    """Write ``text`` to ``path`` through a temp file and an atomic rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _data_rows(path: str | os.PathLike) -> Iterator[tuple[int, list[str]]]:
    with open(path, newline="") as fh:
        lines = ((i, line) for i, line in enumerate(fh, start=1) if not line.startswith("#"))
        for lineno, line in lines:
            if not line.strip():
                continue
            row = next(csv.reader([line]))
            yield lineno, [c.strip() for c in row]


def _parse_float(text: str, lineno: int, column: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(f"line {lineno}: non-numeric value {text!r} in column {column!r}") from None
    if not math.isfinite(value):
        raise ParseError(f"line {lineno}: non-finite value {text!r} in column {column!r}")
    return value


def _warn_reflectance(values: np.ndarray, what: str) -> None:
    if values.size and (values.min() < 0.0 or values.max() > 1.0):
        warnings.warn(
            f"{what}: reflectance outside [0, 1] (min {values.min():.4g}, max {values.max():.4g})",
            stacklevel=3,
        )


def load_library(path: str | os.PathLike) -> SpectralLibrary:
    """Read a library CSV with header ``class,band_0,...,band_{B-1}``.

    Classes keep the order in which they first appear in the file.
    """
    rows = _data_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ParseError(f"{path}: empty library file") from None
    if "class" not in header:
        raise ParseError(f"line {lineno}: header has no 'class' column")
    class_col = header.index("class")
    band_cols = [i for i in range(len(header)) if i != class_col]
    if not band_cols:
        raise ParseError(f"line {lineno}: header names no bands")
    groups: dict[str, list[list[float]]] = {}
    for lineno, row in rows:
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, found {len(row)}")
        name = row[class_col]
        if not name:
            raise ParseError(f"line {lineno}: empty class label")
        groups.setdefault(name, []).append(
            [_parse_float(row[i], lineno, header[i]) for i in band_cols]
        )
    if not groups:
        raise ParseError(f"{path}: library file has a header but no spectra")
    lib = SpectralLibrary(tuple(groups), tuple(np.array(v) for v in groups.values()))
    _warn_reflectance(np.vstack(lib.spectra), str(path))
    return lib


def save_library(lib: SpectralLibrary, path: str | os.PathLike, comments: Iterable[str] = ()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class"] + [f"band_{i}" for i in range(lib.band_count)])
    for name, block in zip(lib.names, lib.spectra):
        for row in block:
            w.writerow([name] + [repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


def _read_matrix(path: str | os.PathLike, what: str) -> tuple[list[str], np.ndarray]:
    rows = _data_rows(path)
    try:
        lineno, header = next(rows)
    except StopIteration:
        raise ParseError(f"{path}: empty {what} file") from None
    data = []
    for lineno, row in rows:
        if len(row) != len(header):
            raise ParseError(f"line {lineno}: expected {len(header)} fields, found {len(row)}")
        data.append([_parse_float(v, lineno, h) for v, h in zip(row, header)])
    if not data:
        raise ParseError(f"{path}: {what} file has no data rows")
    return header, np.array(data)


def load_pixels(path: str | os.PathLike, shape_path: str | os.PathLike | None = None) -> PixelBlock:
    """Read a pixel CSV (header ``band_0,...``) and an optional ``{rows, cols}`` sidecar."""
    _, pixels = _read_matrix(path, "pixel")
    shape = None
    if shape_path is not None:
        with open(shape_path) as fh:
            meta = json.load(fh)
        try:
            shape = (int(meta["rows"]), int(meta["cols"]))
        except (KeyError, TypeError, ValueError):
            raise ParseError(f"{shape_path}: sidecar must hold integer 'rows' and 'cols'") from None
    return PixelBlock(pixels, shape)


def save_pixels(block: PixelBlock, path: str | os.PathLike, comments: Iterable[str] = ()) -> None:
    _write_matrix(path, [f"band_{i}" for i in range(block.band_count)], block.pixels, comments)


def save_shape(shape: tuple[int, int], path: str | os.PathLike) -> None:
    atomic_write_text(path, json.dumps({"rows": shape[0], "cols": shape[1]}) + "\n")


def _write_matrix(path, header: list[str], values: np.ndarray, comments: Iterable[str]) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in values:
        w.writerow([repr(float(v)) for v in row])
    atomic_write_text(path, buf.getvalue())


def save_abundances(A: AbundanceMatrix, path: str | os.PathLike, comments: Iterable[str] = ()) -> None:
    names = A.class_names or tuple(f"class_{j}" for j in range(A.n_classes))
    _write_matrix(path, list(names), A.values, comments)


def load_abundances(path: str | os.PathLike) -> AbundanceMatrix:
    header, values = _read_matrix(path, "abundance")
    return AbundanceMatrix(values, tuple(header))


# -- bundle JSON ---------------------------------------------------------------


def _matrix_json(m: np.ndarray) -> dict[str, Any]:
    return {"rows": int(m.shape[0]), "cols": int(m.shape[1]), "data": [float(v) for v in m.ravel()]}


def _matrix_from_json(obj: dict[str, Any], what: str) -> np.ndarray:
    try:
        rows, cols, data = int(obj["rows"]), int(obj["cols"]), obj["data"]
    except (KeyError, TypeError):
        raise ValidationError(f"{what}: matrix needs 'rows', 'cols' and 'data'") from None
    if len(data) != rows * cols:
        raise ValidationError(f"{what}: {len(data)} entries for a {rows}x{cols} matrix")
    return np.array(data, dtype=np.float64).reshape(rows, cols)


def projection_to_json(p: ProjectionModel) -> dict[str, Any]:
    return {
        "band_count": p.band_count,
        "dim": p.dim,
        "center": [float(v) for v in p.center],
        "basis": _matrix_json(p.basis),
    }


def projection_from_json(obj: dict[str, Any]) -> ProjectionModel:
    p = ProjectionModel(np.array(obj["center"], dtype=np.float64), _matrix_from_json(obj["basis"], "basis"))
    if p.dim != obj.get("dim", p.dim) or p.band_count != obj.get("band_count", p.band_count):
        raise ValidationError("projection: declared dimensions do not match stored arrays")
    return p


def bundle_to_json(bundle: GmmBundle) -> dict[str, Any]:
    return {
        "format_version": FORMAT_VERSION,
        "class_names": list(bundle.class_names),
        "dim": bundle.dim,
        "projection": projection_to_json(bundle.projection),
        "noise_covariance": _matrix_json(bundle.noise_covariance),
        "classes": [
            {
                "name": name,
                "components": [
                    {
                        "weight": c.weight,
                        "mean": [float(v) for v in c.mean],
                        "covariance": _matrix_json(c.covariance),
                    }
                    for c in comps
                ],
            }
            for name, comps in zip(bundle.class_names, bundle.per_class)
        ],
    }


def bundle_from_json(obj: dict[str, Any]) -> GmmBundle:
    version = obj.get("format_version")
    if version != FORMAT_VERSION:
        raise ValidationError(f"unsupported bundle format_version {version!r}")
    names = [c["name"] for c in obj["classes"]]
    if names != list(obj["class_names"]):
        raise ValidationError("class_names do not match the order of 'classes'")
    per_class = tuple(
        tuple(
            GaussianComponent(
                comp["weight"],
                np.array(comp["mean"], dtype=np.float64),
                _matrix_from_json(comp["covariance"], f"covariance of {cls['name']!r}"),
            )
            for comp in cls["components"]
        )
        for cls in obj["classes"]
    )
    bundle = GmmBundle(
        tuple(names),
        per_class,
        projection_from_json(obj["projection"]),
        _matrix_from_json(obj["noise_covariance"], "noise_covariance"),
    )
    if bundle.dim != obj.get("dim", bundle.dim):
        raise ValidationError("declared dim does not match the projection")
    return bundle


def dumps_json(obj: Any) -> str:
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def save_bundle(bundle: GmmBundle, path: str | os.PathLike, provenance: dict | None = None) -> None:
    obj = bundle_to_json(bundle)
    if provenance is not None:
        obj["provenance"] = provenance
    atomic_write_text(path, dumps_json(obj))


def load_bundle(path: str | os.PathLike) -> GmmBundle:
    with open(path) as fh:
        return bundle_from_json(json.load(fh))


def save_projection(p: ProjectionModel, path: str | os.PathLike, provenance: dict | None = None) -> None:
    obj = {"format_version": FORMAT_VERSION, **projection_to_json(p)}
    if provenance is not None:
        obj["provenance"] = provenance
    atomic_write_text(path, dumps_json(obj))


def load_projection(path: str | os.PathLike) -> ProjectionModel:
    with open(path) as fh:
        return projection_from_json(json.load(fh))
