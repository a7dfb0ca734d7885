"""Command line entry point ``unmix-gmm``.

Exit codes: 0 success, 1 invalid input or usage, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import io as uio
from ._backend import BACKEND
from .core import NumericalError, ValidationError
from .evaluate import ClassMerge, bland_altman, report, total_abundance
from .gmm_fit import CvicConfig, fit_bundle, select_components
from .pipeline import (
    config_digest,
    load_config,
    provenance,
    provenance_comments,
    run_pipeline,
    sha256_file,
)
from .projection import fit_library_projection, fit_pixel_projection, project
from .synth import SynthSpec, generate, make_template
from .unmix import UnmixOptions, resolve_threads, unmix

log = logging.getLogger("unmix_gmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _inputs(**paths) -> dict[str, str]:
    return {k: sha256_file(v) for k, v in paths.items() if v is not None}


def cmd_pca(args) -> None:
    library = uio.load_library(args.library)
    inputs = {"library": args.library}
    if args.pixels:
        model = fit_pixel_projection(uio.load_pixels(args.pixels).pixels, args.dim)
        inputs["pixels"] = args.pixels
    else:
        model = fit_library_projection(library, args.dim, seed=args.seed)
    uio.save_projection(model, args.out, provenance(_inputs(**inputs), seed=args.seed))


def cmd_select(args) -> None:
    library = uio.load_library(args.library)
    projection = uio.load_projection(args.projection)
    config = CvicConfig(
        folds=args.folds,
        candidates=args.candidates,
        threshold=args.threshold,
        repeats=args.repeats,
        seed=args.seed,
    )
    blocks = [project(projection, b) for b in library.spectra]
    result = select_components(blocks, config, library.names, threads=args.threads)
    prov = provenance(_inputs(library=args.library, projection=args.projection), seed=args.seed)
    uio.atomic_write_text(args.out, uio.dumps_json({**result.to_json(), "provenance": prov}))


def cmd_fit(args) -> None:
    library = uio.load_library(args.library)
    projection = uio.load_projection(args.projection)
    if args.force_k is not None:
        counts = (args.force_k,) * library.n_classes
    elif args.counts is not None:
        counts = args.counts
    elif args.cvic is not None:
        with open(args.cvic) as fh:
            counts = tuple(json.load(fh)["chosen"])
    else:
        raise UsageError("fit: one of --counts, --cvic or --force-k is required")
    bundle = fit_bundle(library, projection, counts, seed=args.seed, threads=args.threads)
    prov = provenance(
        _inputs(library=args.library, projection=args.projection, cvic=args.cvic), seed=args.seed
    )
    uio.save_bundle(bundle, args.out, prov)


def cmd_unmix(args) -> None:
    bundle = uio.load_bundle(args.bundle)
    pixels = uio.load_pixels(args.pixels, args.shape)
    opts = UnmixOptions(
        max_outer_iters=args.max_iters, tol=args.tol, threads=args.threads, max_combinations=args.max_combinations
    )
    A, diag = unmix(pixels, bundle, opts)
    prov = provenance(_inputs(bundle=args.bundle, pixels=args.pixels, shape=args.shape))
    comments = provenance_comments(prov)
    if pixels.shape is not None:
        comments.append(f"shape {pixels.shape[0]} {pixels.shape[1]}")
    uio.save_abundances(A, args.out, comments)
    if args.diagnostics:
        uio.atomic_write_text(args.diagnostics, uio.dumps_json({**diag.to_json(), "provenance": prov}))
    if diag.warning:
        log.warning(diag.warning)


def cmd_synth(args) -> None:
    library = uio.load_library(args.library)
    with open(args.spec) as fh:
        spec = SynthSpec.from_json(json.load(fh))
    template = None
    if spec.source == "template":
        if args.template:
            template = uio.load_pixels(args.template, args.template_shape)
        else:
            template = make_template(library, spec.rows, spec.cols, seed=spec.seed)
    scene = generate(spec, library, template)
    prov = provenance(
        _inputs(library=args.library, spec=args.spec, template=args.template), seed=spec.seed
    )
    comments = provenance_comments(prov)
    uio.save_pixels(scene.pixels, args.out_pixels, comments)
    if scene.pixels.shape is not None:
        uio.save_shape(scene.pixels.shape, str(args.out_pixels) + ".shape.json")
    uio.save_abundances(scene.truth, args.out_truth, comments)
    picks = {
        "class_names": list(library.names),
        "sampled": [s.tolist() for s in scene.sampled],
        "picks": scene.picks.tolist(),
        "provenance": prov,
    }
    uio.atomic_write_text(args.out_picks, json.dumps(picks, separators=(",", ":")) + "\n")


def _csv_dir(path: str) -> dict[str, Path]:
    files = {p.name: p for p in sorted(Path(path).glob("*.csv"))}
    if not files:
        raise ValidationError(f"no CSV files in {path}")
    return files


def cmd_eval(args) -> None:
    est_files, gt_files = _csv_dir(args.est), _csv_dir(args.truth)
    if set(est_files) != set(gt_files):
        raise ValidationError(
            f"estimate and truth directories hold different files: {sorted(set(est_files) ^ set(gt_files))}"
        )
    names = sorted(est_files)
    est, gt, class_names = [], [], None
    for n in names:
        a, b = uio.load_abundances(est_files[n]), uio.load_abundances(gt_files[n])
        if a.class_names != b.class_names or (class_names and a.class_names != class_names):
            raise ValidationError(f"{n}: class columns differ between files")
        class_names = a.class_names
        est.append(total_abundance(a))
        gt.append(total_abundance(b))
    merge_map = None
    if args.merge:
        with open(args.merge) as fh:
            merge_map = ClassMerge(json.load(fh))
    rep = report(np.array(est), np.array(gt), class_names, merge_map)
    rep["images"] = names
    inputs = {f"est/{n}": sha256_file(est_files[n]) for n in names}
    inputs.update({f"truth/{n}": sha256_file(gt_files[n]) for n in names})
    if args.merge:
        inputs["merge"] = sha256_file(args.merge)
    prov = provenance(inputs)
    if len(names) >= 2:
        ba = bland_altman(np.array(est), np.array(gt))
        rep["bland_altman"] = {
            "mean_diff": ba.mean_diff.tolist(),
            "sd_diff": ba.sd_diff.tolist(),
            "lower": ba.lower.tolist(),
            "upper": ba.upper.tolist(),
        }
    rep["provenance"] = prov
    uio.atomic_write_text(args.out, uio.dumps_json(rep))
    if args.points:
        buf = io.StringIO()
        for c in provenance_comments(prov):
            buf.write(f"# {c}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["image", "class", "truth", "estimate", "difference"])
        for i, n in enumerate(names):
            for j, c in enumerate(class_names):
                w.writerow([n, c, repr(float(gt[i][j])), repr(float(est[i][j])), repr(float(est[i][j] - gt[i][j]))])
        uio.atomic_write_text(args.points, buf.getvalue())


def cmd_pipeline(args) -> None:
    config = load_config(args.config)
    out = args.out_dir or Path(args.config).with_suffix("").name + "_out"
    rep = run_pipeline(config, out, threads=args.threads, base_dir=Path(args.config).parent)
    for name, r in rep["configs"].items():
        log.info("%s: average MAD %.4f", name, r["individual"]["average_mad"])


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="unmix-gmm", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__} ({BACKEND} kernels)")
    common = _Parser(add_help=False)
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: $UNMIX_GMM_THREADS or all cores)")
    common.add_argument("--log-level", default="INFO")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("pca", parents=[common], help="fit the PCA projection")
    s.add_argument("--library", required=True)
    s.add_argument("--dim", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--pixels", help="fit on these pixels instead of the balanced library")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_pca)

    s = sub.add_parser("select", parents=[common], help="choose component counts by CVIC")
    s.add_argument("--library", required=True)
    s.add_argument("--projection", required=True)
    s.add_argument("--threshold", type=float, default=0.0)
    s.add_argument("--folds", type=int, default=5)
    s.add_argument("--candidates", type=_ints, default=(1, 2, 3, 4))
    s.add_argument("--repeats", type=int, default=15)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_select)

    s = sub.add_parser("fit", parents=[common], help="fit the per-class mixtures")
    s.add_argument("--library", required=True)
    s.add_argument("--projection", required=True)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--counts", type=_ints)
    g.add_argument("--cvic", help="take the chosen counts from a 'select' output")
    g.add_argument("--force-k", type=int, help="same component count for every class (1 gives GMM-1)")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit)

    s = sub.add_parser("unmix", parents=[common], help="estimate abundances")
    s.add_argument("--bundle", required=True)
    s.add_argument("--pixels", required=True)
    s.add_argument("--shape", help="sidecar JSON with rows and cols")
    s.add_argument("--out", required=True)
    s.add_argument("--diagnostics")
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--tol", type=float, default=1e-6)
    s.add_argument("--max-combinations", type=int, default=10_000)
    s.set_defaults(func=cmd_unmix)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic scene")
    s.add_argument("--library", required=True)
    s.add_argument("--spec", required=True)
    s.add_argument("--template")
    s.add_argument("--template-shape")
    s.add_argument("--out-pixels", required=True)
    s.add_argument("--out-truth", required=True)
    s.add_argument("--out-picks", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("eval", parents=[common], help="compare estimated and true abundances")
    s.add_argument("--est", required=True)
    s.add_argument("--truth", required=True)
    s.add_argument("--merge")
    s.add_argument("--out", required=True)
    s.add_argument("--points")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("pipeline", parents=[common], help="run the synthetic experiment from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--out-dir")
    s.set_defaults(func=cmd_pipeline)
    return p


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    args.threads = resolve_threads(args.threads)
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "threads", "log_level")}
    log.info(
        "unmix-gmm %s %s (backend=%s, threads=%d, config %s, seed %s)",
        __version__, args.command, BACKEND, args.threads,
        config_digest(json.loads(json.dumps(settings, default=str))), settings.get("seed"),
    )
    try:
        args.func(args)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        log.error("numerical failure: %s", exc)
        return 2
    except (UsageError, ValidationError, ValueError, KeyError, OSError) as exc:
        log.error("%s", exc)
        return 1
    return 0


def main() -> None:
    sys.exit(run())
