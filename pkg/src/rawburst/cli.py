"""Operator-facing command line over the library.

Subcommands mirror the pipeline: synth makes burst directories, register
estimates warps, reconstruct runs the solver, merge is the bracketing
baseline, eval scores results, check-adjoint audits the forward model
against a dense-matrix oracle.

Exit codes: 0 success, 1 validation error (bad flags, bad files,
inconsistent inputs), 2 numerical failure (divergence, adjoint audit).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import formats, report, synth
from .merge import (
    demosaic_bilinear,
    demosaic_malvar,
    hdr_merge_bracket,
    select_nearest_ev,
)
from .metrics import burst_geometric_error, mu_psnr, psnr, ssim
from .model import (
    AffineWarpField,
    BayerPattern,
    BurstMeta,
    BurstOperator,
    SensorConfig,
    saturation_mask,
)
from .register import MTBFeature, PlainLuma, register_burst
from .solver import DivergedError, HqsConfig, IdentityPrior, TvL1Prior, reconstruct


def _extractor(name: str):
    if name == "plain":
        return PlainLuma()
    if name == "mtb":
        return MTBFeature()
    raise ValueError(f"unknown feature extractor '{name}'")


def _print(text: str) -> None:
    sys.stdout.write(text if text.endswith("\n") else text + "\n")


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    doc = {}
    if args.config is not None:
        with open(args.config) as f:
            doc = json.load(f)
    config = synth.config_from_doc(doc)
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def one(index: int) -> None:
        sample = synth.make_burst(config, index)
        synth.save_burst(sample, out / f"burst_{index:03d}")

    indices = list(range(args.count))
    if args.threads > 1:
        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            list(pool.map(one, indices))
    else:
        for i in indices:
            one(i)
    _print(f"wrote {args.count} burst(s) under {out} (seed {config.seed})")
    return 0


# ---------------------------------------------------------------------------
# register
# ---------------------------------------------------------------------------


def cmd_register(args) -> int:
    sample = synth.load_burst(args.burst)
    result = register_burst(
        sample.frames,
        sample.meta,
        _extractor(args.features),
        levels=args.levels,
        iters_per_level=args.iters,
        tile_size=args.tile_size,
    )
    formats.write_warps(
        args.out,
        result.fields,
        sample.meta.k0,
        sample.meta.scale,
        diagnostics=result.diagnostics,
    )
    metrics: dict = {"frames": sample.meta.nframes, "features": args.features}
    geo = None
    if sample.gt_fields is not None:
        geo = burst_geometric_error(result.fields, sample.gt_fields, sample.meta.k0)
        metrics["geometric_error_mean"] = geo["mean"]
        metrics["geometric_error_median"] = geo["median"]
        metrics["geometric_error_per_frame"] = geo["per_frame"]
    text = report.format_report(metrics, "registration")
    _print(text)
    if args.report is not None:
        rep = report.ensure_dir(args.report)
        report.write_metrics_csv(rep / "metrics.csv", metrics)
        report.write_metrics_json(rep / "metrics.json", metrics)
        (rep / "report.txt").write_text(text)
        if geo is not None:
            report.render_error_bars(
                rep / "geometric_error.png",
                dict(zip(geo["frames"], geo["per_frame"])),
            )
    _print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# reconstruct
# ---------------------------------------------------------------------------


def _hqs_config(args) -> HqsConfig:
    stages = args.stages
    prior = IdentityPrior() if args.prior == "none" else TvL1Prior()
    eta = tuple(2.0 ** i for i in range(stages))
    if stages == 3:
        gamma: tuple = (0.05, 0.02, 0.01)
    else:
        gamma = tuple(
            0.05 * (0.2 ** (i / max(stages - 1, 1))) for i in range(stages)
        )
    return HqsConfig(
        stages=stages,
        gd_steps=args.gd_steps,
        eta=eta,
        gamma=gamma,
        prior=prior,
        seed=args.seed,
    )


def cmd_reconstruct(args) -> int:
    sample = synth.load_burst(args.burst)
    meta = sample.meta
    sr = args.sr if args.sr is not None else meta.scale
    if sr != meta.scale:
        meta = dataclasses.replace(meta, scale=sr)

    fields = None
    if args.oracle_warps and args.warps:
        raise ValueError("--oracle-warps and --warps are mutually exclusive")
    if args.oracle_warps:
        fields = formats.gt_fields_from_doc(
            sample.meta_doc, sample.frames[0].shape, scale=sr, tile_size=args.tile_size
        )
        if fields is None:
            raise ValueError("burst sidecar carries no ground-truth warps")
    elif args.warps is not None:
        doc = formats.read_warps(args.warps)
        if int(doc["s"]) != sr:
            raise ValueError(
                f"warps were estimated at scale {doc['s']}, requested --sr {sr}; "
                "re-run register on a burst at the target scale"
            )
        if len(doc["fields"]) != meta.nframes:
            raise ValueError("warps file frame count does not match the burst")
        fields = doc["fields"]

    x, info = reconstruct(
        sample.frames,
        meta,
        _hqs_config(args),
        fields=fields,
        extractor=_extractor(args.features),
        levels=args.levels,
        lk_iters=args.lk_iters,
        tile_size=args.tile_size,
    )
    formats.write_pfm(args.out, x.data.astype(np.float32))
    if args.preview is not None:
        report.write_preview_ppm(args.preview, x.data)

    trace = [v for stage in info["objective_trace"] for v in stage]
    bounds = np.cumsum([len(stage) for stage in info["objective_trace"]]).tolist()
    metrics: dict = {
        "frames": meta.nframes,
        "sr": sr,
        "prior": args.prior,
        "stages": args.stages,
        "step_size": info["delta"],
    }
    if trace:
        metrics["objective_first"] = trace[0]
        metrics["objective_last"] = trace[-1]
    if sample.gt is not None and sample.gt.data.shape == x.data.shape:
        metrics["psnr_db"] = psnr(sample.gt.data, x.data)
        metrics["mu_psnr_db"] = mu_psnr(sample.gt.data, x.data)
    text = report.format_report(metrics, "reconstruction")
    _print(text)
    if args.report is not None:
        rep = report.ensure_dir(args.report)
        report.write_metrics_csv(rep / "metrics.csv", metrics)
        report.write_metrics_json(rep / "metrics.json", metrics)
        (rep / "report.txt").write_text(text)
        if trace:
            report.write_trace_csv(rep / "trace.csv", trace)
            report.render_objective_trace(rep / "objective.png", trace, bounds)
    _print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# merge
# ---------------------------------------------------------------------------


def _parse_frame_selection(spec: str, evs) -> list[int]:
    if spec == "all":
        return list(range(len(evs)))
    if spec.startswith("nearest-ev:"):
        body = spec[len("nearest-ev:"):]
        try:
            targets = [float(t) for t in body.split(",") if t.strip() != ""]
        except ValueError:
            raise ValueError(f"bad EV list in --frames '{spec}'") from None
        if not targets:
            raise ValueError("--frames nearest-ev: needs at least one EV")
        if len(targets) > len(evs):
            raise ValueError(
                f"asked for {len(targets)} frames but burst has {len(evs)}"
            )
        return select_nearest_ev(evs, targets)
    raise ValueError(f"--frames must be 'all' or 'nearest-ev:<evs>', got '{spec}'")


def cmd_merge(args) -> int:
    sample = synth.load_burst(args.burst)
    sel = _parse_frame_selection(args.frames, sample.evs)
    demosaic = {"bilinear": demosaic_bilinear, "malvar": demosaic_malvar}[args.demosaic]
    sensor = sample.meta.sensor
    rgbs = [demosaic(sample.frames[i].data, sensor.pattern) for i in sel]
    masks = [saturation_mask(sample.frames[i].data) for i in sel]
    exposures = [sample.meta.exposures[i] for i in sel]
    merged = hdr_merge_bracket(rgbs, exposures, masks, sample.alpha, sample.beta)
    formats.write_pfm(args.out, merged.data.astype(np.float32))
    if args.preview is not None:
        report.write_preview_ppm(args.preview, merged.data)
    metrics: dict = {
        "frames_used": sel,
        "evs_used": [float(sample.evs[i]) for i in sel],
        "demosaic": args.demosaic,
    }
    if sample.gt is not None and sample.gt.data.shape == merged.data.shape:
        metrics["psnr_db"] = psnr(sample.gt.data, merged.data)
        metrics["mu_psnr_db"] = mu_psnr(sample.gt.data, merged.data)
    _print(report.format_report(metrics, "bracketing merge"))
    _print(f"wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    ref = formats.read_pfm(args.ref).astype(np.float64)
    test = formats.read_pfm(args.test).astype(np.float64)
    if ref.shape != test.shape:
        raise ValueError(f"shape mismatch: ref {ref.shape} vs test {test.shape}")
    metrics: dict = {
        "psnr_db": psnr(ref, test),
        "mu_psnr_db": mu_psnr(ref, test),
        "ssim": ssim(ref, test),
    }
    geo = None
    if (args.warps is None) != (args.gt_warps is None):
        raise ValueError("--warps and --gt-warps must be given together")
    if args.warps is not None:
        doc_est = formats.read_warps(args.warps)
        gt_src = Path(args.gt_warps)
        meta_path = gt_src / "meta.json" if gt_src.is_dir() else gt_src
        doc_gt = formats.read_meta(meta_path)
        est_fields = doc_est["fields"]
        s = int(doc_est["s"])
        hr = est_fields[0].shape
        gt_fields = formats.gt_fields_from_doc(
            doc_gt, (hr[0] // s, hr[1] // s), scale=s,
            tile_size=int(doc_est["tile_size"]),
        )
        if gt_fields is None:
            raise ValueError(f"{meta_path} carries no ground-truth warps")
        if len(gt_fields) != len(est_fields):
            raise ValueError("estimated and ground-truth warp counts differ")
        geo = burst_geometric_error(est_fields, gt_fields, int(doc_est["k0"]))
        metrics["geometric_error_mean"] = geo["mean"]
        metrics["geometric_error_median"] = geo["median"]
        metrics["geometric_error_per_frame"] = geo["per_frame"]
    text = report.format_report(metrics, "evaluation")
    _print(text)
    if args.report is not None:
        rep = report.ensure_dir(args.report)
        report.write_metrics_csv(rep / "metrics.csv", metrics)
        report.write_metrics_json(rep / "metrics.json", metrics)
        (rep / "report.txt").write_text(text)
        report.render_comparison(rep / "comparison.png", ref, test)
        if geo is not None:
            report.render_error_bars(
                rep / "geometric_error.png",
                dict(zip(geo["frames"], geo["per_frame"])),
            )
    return 0


# ---------------------------------------------------------------------------
# check-adjoint
# ---------------------------------------------------------------------------


def _dense_matrix(fn, in_shape: tuple, out_size: int) -> np.ndarray:
    basis = np.zeros(in_shape)
    flat = basis.reshape(-1)
    mat = np.empty((out_size, flat.size))
    for j in range(flat.size):
        flat[j] = 1.0
        mat[:, j] = fn(basis).reshape(-1)
        flat[j] = 0.0
    return mat


def _random_field(rng, shape) -> AffineWarpField:
    theta = math.radians(rng.uniform(-1.0, 1.0))
    tx, ty = rng.uniform(-1.5, 1.5, size=2)
    c, s = math.cos(theta), math.sin(theta)
    m = np.array([[c, -s, tx], [s, c, ty]])
    return AffineWarpField.from_global(m, shape)


def cmd_check_adjoint(args) -> int:
    rng = np.random.default_rng(args.seed)
    scales = [args.sr] if args.sr is not None else [1, 2, 4]
    size = args.size
    for s in scales:
        if size % (2 * s):
            raise ValueError(f"--size {size} must be divisible by 2*sr for sr={s}")
    failed = False
    for s in scales:
        for pattern in BayerPattern:
            hr = (size, size)
            k = 3
            meta = BurstMeta(
                exposures=2.0 ** rng.uniform(-2.0, 2.0, size=k),
                k0=0,
                scale=s,
                sensor=SensorConfig(pattern=pattern),
            )
            fields = [AffineWarpField.identity(hr, reference=True)]
            fields += [_random_field(rng, hr) for _ in range(k - 1)]
            op = BurstOperator(meta, fields)
            worst = 0.0
            for frame in range(k):
                fwd = _dense_matrix(
                    lambda v: op.apply(v, frame), hr + (3,), op.lr_shape[0] * op.lr_shape[1]
                )
                adj = _dense_matrix(
                    lambda v: op.adjoint(v, frame), op.lr_shape, size * size * 3
                )
                scale_ref = max(np.abs(fwd).max(), 1e-12)
                err = np.abs(fwd.T - adj).max() / scale_ref
                x = rng.standard_normal(hr + (3,))
                r = rng.standard_normal(op.lr_shape)
                ax = op.apply(x, frame)
                atr = op.adjoint(r, frame)
                dot_err = abs(np.vdot(ax, r) - np.vdot(x, atr)) / max(
                    np.linalg.norm(ax) * np.linalg.norm(r), 1e-12
                )
                worst = max(worst, err, dot_err)
            ok = worst <= 1e-5
            failed = failed or not ok
            _print(
                f"s={s} pattern={pattern.value}: max relative mismatch "
                f"{worst:.3e} {'ok' if ok else 'FAIL'}"
            )
    if failed:
        _print("adjoint audit FAILED")
        return 2
    _print("adjoint audit passed")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; the contract wants 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="rawburst",
        description="HDR and super-resolution reconstruction from raw bursts.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate synthetic burst directories")
    p.add_argument("--config", help="synthesis config JSON (sidecar dialect)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=1, help="number of bursts")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--threads", type=int, default=1, help="worker cap")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("register", help="estimate per-frame warps for a burst")
    p.add_argument("burst", help="burst directory")
    p.add_argument("--features", choices=("plain", "mtb"), default="plain")
    p.add_argument("--levels", type=int, default=4, help="pyramid levels")
    p.add_argument("--iters", type=int, default=3, help="LK iterations per level")
    p.add_argument("--tile-size", type=int, default=200, help="tile size in HR px")
    p.add_argument("--out", required=True, help="output warps JSON")
    p.add_argument("--report", help="directory for metrics and figures")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("reconstruct", help="joint HDR + super-resolution solve")
    p.add_argument("burst", help="burst directory")
    p.add_argument("--sr", type=int, choices=(1, 2, 4), default=None,
                   help="super-resolution factor (default: sidecar s)")
    p.add_argument("--prior", choices=("none", "tvl1"), default="tvl1")
    p.add_argument("--stages", type=int, default=3, help="penalty stages")
    p.add_argument("--gd-steps", type=int, default=3, help="gradient steps per stage")
    p.add_argument("--out", required=True, help="output PFM")
    p.add_argument("--oracle-warps", action="store_true",
                   help="use ground-truth warps from the sidecar")
    p.add_argument("--warps", help="warps JSON from register")
    p.add_argument("--features", choices=("plain", "mtb"), default="plain")
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--lk-iters", type=int, default=3)
    p.add_argument("--tile-size", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preview", help="write a range-compressed PPM preview here")
    p.add_argument("--report", help="directory for metrics, trace, figures")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("merge", help="exposure-bracketing merge baseline")
    p.add_argument("burst", help="burst directory")
    p.add_argument("--frames", default="all",
                   help="'all' or 'nearest-ev:-2.4,0,2.4'")
    p.add_argument("--demosaic", choices=("bilinear", "malvar"), default="bilinear")
    p.add_argument("--out", required=True, help="output PFM")
    p.add_argument("--preview", help="write a range-compressed PPM preview here")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="score a reconstruction against a reference")
    p.add_argument("--ref", required=True, help="reference PFM")
    p.add_argument("--test", required=True, help="reconstruction PFM")
    p.add_argument("--warps", help="estimated warps JSON")
    p.add_argument("--gt-warps", help="burst dir or meta.json with ground-truth warps")
    p.add_argument("--report", help="directory for metrics and figures")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check-adjoint", help="audit operators against a dense oracle")
    p.add_argument("--size", type=int, default=16, help="high-res test size")
    p.add_argument("--sr", type=int, choices=(1, 2, 4), default=None,
                   help="restrict to one scale (default: all)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_check_adjoint)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except DivergedError as e:
        sys.stderr.write(f"rawburst: numerical failure: {e}\n")
        return 2
    except (ValueError, KeyError, OSError) as e:
        sys.stderr.write(f"rawburst: error: {e}\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
