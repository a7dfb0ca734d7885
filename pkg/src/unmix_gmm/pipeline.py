"""End-to-end synthetic experiment: pca -> select -> fit -> synth -> unmix -> eval."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from . import io as uio
from .core import SpectralLibrary
from .evaluate import ClassMerge, bland_altman, report, total_abundance
from .gmm_fit import CvicConfig, fit_bundle, select_components
from .projection import fit_library_projection, project
from .synth import SynthSpec, bimodal_library, generate, make_template
from .unmix import UnmixOptions, unmix

log = logging.getLogger(__name__)

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 0,
    "library": {"synthetic": {"n_classes": 4, "per_class": 200, "bands": 50, "seed": 3}},
    "projection": {"dim": 10},
    "cvic": {"threshold": 0.0, "folds": 5, "candidates": [1, 2, 3, 4], "repeats": 15},
    "force_K": None,
    "compare_gmm1": True,
    "synth": {"n_images": 10, "counts": None, "max_active": 3, "rows": 64, "cols": 64, "noise_sd": 0.0},
    "unmix": {},
    "merge": None,
}


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return "sha256:" + hashlib.sha256(blob).hexdigest()


def provenance(inputs: dict[str, str] | None = None, **extra) -> dict:
    out = {"tool": "unmix-gmm", "version": __version__, "inputs": dict(sorted((inputs or {}).items()))}
    out.update(extra)
    return out


def provenance_comments(prov: dict) -> list[str]:
    return [f"{prov['tool']} {prov['version']}"] + [f"input {k} {v}" for k, v in prov["inputs"].items()]


def merged_config(user: dict) -> dict:
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def load_config(path: str | os.PathLike) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # Python < 3.11
            import tomli as tomllib  # type: ignore[no-redef]
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path) as fh:
        return json.load(fh)


def build_library(cfg: dict, base: Path) -> tuple[SpectralLibrary, dict[str, str]]:
    spec = cfg["library"]
    if "path" in spec:
        path = (base / spec["path"]).resolve()
        return uio.load_library(path), {"library": sha256_file(path)}
    return bimodal_library(**spec["synthetic"]), {}


def unmix_options(cfg: dict, threads: int | None) -> UnmixOptions:
    allowed = {f.name for f in fields(UnmixOptions)}
    opts = {k: v for k, v in cfg.get("unmix", {}).items() if k in allowed}
    opts["threads"] = threads
    return UnmixOptions(**opts)


def run_pipeline(config: dict, out_dir: str | os.PathLike, threads: int | None = None, base_dir: str | os.PathLike = ".") -> dict:
    """Run the full synthetic experiment and write every artifact under ``out_dir``.

    Returns the report dictionary (also written to ``report.json``).
    """
    cfg = merged_config(config)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seed = int(cfg["seed"])
    digest = config_digest(cfg)
    log.info("pipeline config %s seed %d", digest, seed)

    library, inputs = build_library(cfg, Path(base_dir))
    inputs["config"] = digest
    prov = provenance(inputs, seed=seed)
    uio.save_library(library, out / "library.csv", provenance_comments(prov))

    projection = fit_library_projection(library, int(cfg["projection"]["dim"]), seed=seed)
    uio.save_projection(projection, out / "projection.json", prov)

    blocks = [project(projection, b) for b in library.spectra]
    force = cfg.get("force_K")
    configs: dict[str, tuple[int, ...]] = {}
    if force is not None:
        configs[f"force_K={int(force)}"] = (int(force),) * library.n_classes
    else:
        cvic_cfg = CvicConfig(seed=seed, **{k: (tuple(v) if k == "candidates" else v) for k, v in cfg["cvic"].items()})
        result = select_components(blocks, cvic_cfg, library.names, threads=threads or 1)
        uio.atomic_write_text(out / "cvic.json", uio.dumps_json({**result.to_json(), "provenance": prov}))
        configs["gmm"] = result.chosen
        if cfg.get("compare_gmm1"):
            configs["gmm1"] = (1,) * library.n_classes

    bundles = {}
    for name, counts in configs.items():
        bundles[name] = fit_bundle(library, projection, counts, seed=seed)
        uio.save_bundle(bundles[name], out / f"bundle_{name}.json", prov)

    synth_cfg = dict(cfg["synth"])
    n_images = int(synth_cfg.pop("n_images"))
    counts = synth_cfg.pop("counts", None) or [max(1, n // 20) for n in library.counts]
    opts = unmix_options(cfg, threads)
    merge_map = ClassMerge(cfg["merge"]) if cfg.get("merge") else None

    truths: list[np.ndarray] = []
    estimates: dict[str, list[np.ndarray]] = {name: [] for name in bundles}
    for i in range(n_images):
        spec = SynthSpec(counts=tuple(counts), seed=seed * 1000 + i, **synth_cfg)
        template = make_template(library, spec.rows, spec.cols, seed=seed * 1000 + 500 + i)
        scene = generate(spec, library, template)
        tag = f"image_{i:03d}"
        uio.save_pixels(scene.pixels, out / "images" / f"{tag}.csv", provenance_comments(prov))
        uio.save_abundances(scene.truth, out / "truth" / f"{tag}.csv", provenance_comments(prov))
        truths.append(total_abundance(scene.truth))
        for name, bundle in bundles.items():
            A, diag = unmix(scene.pixels, bundle, opts)
            uio.save_abundances(A, out / f"est_{name}" / f"{tag}.csv", provenance_comments(prov))
            estimates[name].append(total_abundance(A))
            log.info("%s %s: %d iterations, converged=%s", tag, name, diag.n_iter, diag.converged)

    result_report = {"provenance": prov, "component_counts": {k: list(v) for k, v in configs.items()}, "configs": {}}
    for name in bundles:
        rep = report(np.array(estimates[name]), np.array(truths), library.names, merge_map)
        if n_images >= 2:
            ba = bland_altman(np.array(estimates[name]), np.array(truths))
            rep["bland_altman"] = {
                "mean_diff": ba.mean_diff.tolist(),
                "sd_diff": ba.sd_diff.tolist(),
                "lower": ba.lower.tolist(),
                "upper": ba.upper.tolist(),
            }
        result_report["configs"][name] = rep
    uio.atomic_write_text(out / "report.json", uio.dumps_json(result_report))
    return result_report
