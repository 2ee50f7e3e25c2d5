"""Command-line interface: ``geodist <command> ...``.

Exit codes: 0 ok, 1 configuration / argument error, 2 file error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from . import autodiff as ad
from . import checkpoint
from .baseline_vf import sample_vf, train_vf
from .config import ConfigError, RunConfig, config_hash, load_config, parse_value
from .denoiser import param_count
from .geometry import IDENTITY, Mesh, MeshError, Normalization, load_mesh, normalization_transform, sample_surface
from .metrics import chamfer, compression_ratio, eval_model, eval_points
from .pointio import read_points, write_ply, write_points
from .sampler import karras_schedule, roundtrip, sample_forward, sample_inverse
from .training import DivergenceError, train

log = logging.getLogger("geodist")

EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED = 1, 2, 3


class UsageError(ValueError):
    """Bad command-line value; reported with exit code 1."""


def provenance(digest: str) -> str:
    return f"geodist {__version__} config {digest}"


# --------------------------------------------------------------------------
# helpers


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        overrides[key] = parse_value(value)
    if getattr(args, "mesh", None):
        overrides["mesh.path"] = args.mesh
    if getattr(args, "epochs", None) is not None:
        overrides["training.epochs"] = args.epochs
        overrides["baseline.epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        for key in ("mesh.seed", "training.seed", "sampler.seed", "eval.seed", "baseline.seed"):
            overrides[key] = args.seed
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_mesh_and_norm(cfg: RunConfig) -> tuple[Mesh, Mesh, Normalization]:
    if not cfg.mesh.path:
        raise ConfigError("mesh.path is not set (use --mesh or the config file)")
    path = Path(cfg.mesh.path)
    if not path.is_file():
        raise FileNotFoundError(f"mesh file not found: {path}")
    mesh = load_mesh(path)
    if not cfg.mesh.normalize:
        return mesh, mesh, IDENTITY
    norm = normalization_transform(mesh, cfg.mesh.n_norm_samples, seed=cfg.mesh.seed)
    normed = Mesh(norm.apply(mesh.vertices), mesh.faces, mesh.colors)
    return mesh, normed, norm


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    model, doc = checkpoint.load(path)
    n = doc.get("normalization") or IDENTITY.to_dict()
    return model, doc, Normalization(float(n["shift"]), float(n["scale"]))


def _doc_digest(doc: dict) -> str:
    return doc.get("config_hash") or config_hash(doc)


def _parse_steps(text: str) -> list[int]:
    try:
        steps = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None
    if not steps or any(s < 1 for s in steps):
        raise UsageError(f"step counts must be >= 1, got {text!r}")
    return steps


def _parse_record(text: str | None, steps: int) -> list[int]:
    if not text:
        return []
    try:
        rec = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--record expects comma-separated step indices, got {text!r}") from None
    bad = [r for r in rec if not 0 <= r <= steps]
    if bad:
        raise UsageError(f"--record indices must lie in [0, {steps}], got {bad}")
    return rec


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    digest = cfg.digest()
    mesh, normed, norm = _load_mesh_and_norm(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"normalization": norm.to_dict(), "run": cfg.to_dict(), "config_hash": digest, "version": __version__}
    _write_json(out / "normalization.json", {**norm.to_dict(), "provenance": provenance(digest)})

    ev = cfg.eval
    ref = sample_surface(mesh, cfg.training.eval_points, seed=np.random.SeedSequence([ev.seed, 0x0EF]))

    def eval_fn(model):
        sched = karras_schedule(cfg.training.eval_steps)
        gen, _ = sample_forward(model, cfg.training.eval_points, sched, init=ev.init, solver=ev.solver,
                                seed=np.random.SeedSequence([ev.seed, 0x0E6]))
        return chamfer(ref[:, :3], norm.invert(gen)[:, :3])

    def checkpoint_fn(model, epoch, _chamfer):
        checkpoint.save(out / f"checkpoint_epoch{epoch + 1:04d}.ckpt", model, {**meta, "epoch": epoch + 1})

    model, report = train(normed, cfg.denoiser, cfg.training, eval_fn=eval_fn, checkpoint_fn=checkpoint_fn)
    checkpoint.save(out / "model.ckpt", model, {**meta, "epoch": cfg.training.epochs})
    report.write_csv(out / "train_report.csv", header_comment=provenance(digest))
    last = report.records[-1] if report.records else None
    print(f"trained {cfg.training.epochs} epochs, {model.param_count()} params"
          + (f", final loss {last.loss:.5f}" if last else "")
          + (f", chamfer {last.chamfer:.5f}" if last and last.chamfer is not None else ""))
    return 0


def cmd_sample(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    model, doc, norm = _load_checkpoint(args.checkpoint)
    if model.kind != "denoiser":
        raise UsageError("sample needs a denoiser checkpoint; use vf-sample for vector fields")
    record = _parse_record(args.record, args.steps)
    sched = karras_schedule(args.steps)
    pts, traj = sample_forward(model, args.n, sched, init=args.init, seed=args.seed, record=record,
                               solver=args.solver)
    comments = [provenance(_doc_digest(doc)), f"sample n={args.n} steps={args.steps} solver={args.solver} "
                f"init={args.init} seed={args.seed}"]
    out = Path(args.out)
    write_points(out, norm.invert(pts), comments)
    if record:
        frames = Path(args.frames_dir) if args.frames_dir else out.with_name(out.stem + "_frames")
        frames.mkdir(parents=True, exist_ok=True)
        for idx, t, x in traj.frames:
            write_ply(frames / f"frame_{idx:03d}.ply", norm.invert(x), comments + [f"step {idx} t={t!r}"])
    print(f"wrote {args.n} points to {out}" + (f" and {len(traj)} frames" if record else ""))
    return 0


def cmd_invert(args) -> int:
    if args.steps < 1:
        raise UsageError("--steps must be >= 1")
    model, doc, norm = _load_checkpoint(args.checkpoint)
    if model.kind != "denoiser":
        raise UsageError("invert needs a denoiser checkpoint")
    if not Path(args.points).is_file():
        raise FileNotFoundError(f"points file not found: {args.points}")
    pts = read_points(args.points)
    if pts.shape[1] != model.config.d_in:
        raise UsageError(f"model expects {model.config.d_in}-channel points, file has {pts.shape[1]}")
    x = norm.apply(pts)
    sched = karras_schedule(args.steps)
    noise, _ = sample_inverse(model, x, sched, solver=args.solver)
    comments = [provenance(_doc_digest(doc)), f"invert steps={args.steps} solver={args.solver}"]
    out = Path(args.out)
    write_points(out, noise, comments)
    corr = Path(args.correspondence) if args.correspondence else out.with_suffix(".csv")
    with open(corr, "w", newline="") as fh:
        fh.write(f"# {comments[0]}\n")
        w = csv.writer(fh)
        cols = ["x", "y", "z", "r", "g", "b"][:pts.shape[1]]
        w.writerow(["index"] + cols + [f"noise_{c}" for c in cols])
        for i in range(len(pts)):
            w.writerow([i] + [repr(float(v)) for v in pts[i]] + [repr(float(v)) for v in noise[i]])
    print(f"inverted {len(pts)} points to {out}")
    return 0


def _roundtrip_rows(model, x: np.ndarray, steps: list[int], solver: str) -> list[tuple[int, float]]:
    rows = []
    for n in steps:
        if len(x) == 0:
            rows.append((n, 0.0))
            continue
        back = roundtrip(model, x, n, solver)
        rows.append((n, float(np.mean(np.sum((back - x) ** 2, axis=1)))))
    return rows


def cmd_roundtrip(args) -> int:
    model, doc, norm = _load_checkpoint(args.checkpoint)
    if model.kind != "denoiser":
        raise UsageError("roundtrip needs a denoiser checkpoint")
    steps = _parse_steps(args.steps)
    if args.points:
        if not Path(args.points).is_file():
            raise FileNotFoundError(f"points file not found: {args.points}")
        x = norm.apply(read_points(args.points))
    else:
        if not args.mesh:
            raise UsageError("roundtrip needs --points or --mesh")
        if not Path(args.mesh).is_file():
            raise FileNotFoundError(f"mesh file not found: {args.mesh}")
        x = norm.apply(sample_surface(load_mesh(args.mesh), args.n, seed=args.seed))
    rows = _roundtrip_rows(model, x, steps, args.solver)
    out = Path(args.out)
    with open(out, "w", newline="") as fh:
        fh.write(f"# {provenance(_doc_digest(doc))}\n")
        w = csv.writer(fh)
        w.writerow(["steps", "mse"])
        for n, mse in rows:
            w.writerow([n, repr(mse)])
    for n, mse in rows:
        print(f"steps {n:4d}  round-trip mse {mse:.6e}")
    return 0


def cmd_eval(args) -> int:
    model, doc, norm = _load_checkpoint(args.checkpoint)
    if not Path(args.mesh).is_file():
        raise FileNotFoundError(f"mesh file not found: {args.mesh}")
    if args.n < 1:
        raise UsageError("--n must be positive")
    mesh = load_mesh(args.mesh)
    if model.kind == "denoiser":
        report = eval_model(model, mesh, n=args.n, n_steps=args.steps, seed=args.seed, solver=args.solver,
                            init=args.init, normalization=norm)
    else:
        ss = np.random.SeedSequence([args.seed, 0xE7A1])
        gen_ss, ref_ss = ss.spawn(2)
        gen = norm.invert(sample_vf(lambda p: model.predict(p), args.n, seed=gen_ss))
        report = eval_points(gen, mesh, sample_surface(mesh, args.n, seed=ref_ss), steps=0,
                             param_count=model.param_count())
    extra: dict = {"model_kind": model.kind}
    for n in args.compression_points:
        extra[f"compression_ratio_{n:g}"] = compression_ratio(model.param_count(), n)
    digest = _doc_digest(doc)
    out = Path(args.out)
    report.write_csv(out, extra, header_comment=provenance(digest))
    if args.heatmap:
        write_ply(args.heatmap, report.points, [provenance(digest), "per-point distance to mesh"],
                  extra={"error": report.errors})
    print(f"chamfer {report.chamfer:.6f}  params {model.param_count()}  "
          + "  ".join(f"{k} {v:.4g}" for k, v in extra.items() if k.startswith("compression")))
    return 0


def cmd_vf_train(args) -> int:
    cfg = _resolve_config(args)
    digest = cfg.digest()
    _mesh, normed, norm = _load_mesh_and_norm(cfg)
    target = cfg.denoiser.to_dict()
    vcfg = cfg.baseline.vf_config(param_count(cfg.denoiser))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, report = train_vf(normed, vcfg, cfg.baseline.train_config())
    meta = {"normalization": norm.to_dict(), "run": cfg.to_dict(), "config_hash": digest, "version": __version__,
            "matched_to": target if cfg.baseline.match_params else None}
    checkpoint.save(out / "vf_model.ckpt", model, meta)
    report.write_csv(out / "vf_train_report.csv", header_comment=provenance(digest))
    _write_json(out / "normalization.json", {**norm.to_dict(), "provenance": provenance(digest)})
    print(f"trained vector field {vcfg.width}x{vcfg.depth} ({model.param_count()} params)")
    return 0


def cmd_vf_sample(args) -> int:
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    model, doc, norm = _load_checkpoint(args.checkpoint)
    if model.kind != "vector_field":
        raise UsageError("vf-sample needs a vector-field checkpoint")
    pts = sample_vf(lambda p: model.predict(p), args.n, seed=args.seed, iterations=args.iterations)
    comments = [provenance(_doc_digest(doc)), f"vf-sample n={args.n} seed={args.seed} iterations={args.iterations}"]
    write_points(args.out, norm.invert(pts), comments)
    print(f"wrote {args.n} points to {args.out}")
    return 0


# --------------------------------------------------------------------------
# argument parsing


def _add_common(p, seed_default: int | None = 0):
    p.add_argument("--seed", type=int, default=seed_default,
                   help="random seed (for training commands, overrides every seed in the config)")
    p.add_argument("--threads", type=int, default=None, help="limit BLAS threads; 1 gives reproducible runs")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="geodist", description="Surfaces as point distributions learned by a denoiser.")
    ap.add_argument("--version", action="version", version=f"geodist {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    for name, fn, out_default in (("train", cmd_train, "run"), ("vf-train", cmd_vf_train, "run_vf")):
        p = sub.add_parser(name)
        p.add_argument("config", nargs="?", help="JSON run config (defaults used when omitted)")
        p.add_argument("--mesh", help="OBJ mesh (overrides mesh.path)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--epochs", type=int)
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config field")
        _add_common(p, seed_default=None)
        p.set_defaults(func=fn)

    p = sub.add_parser("sample")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--solver", choices=["euler", "heun"], default="heun")
    p.add_argument("--init", choices=["gaussian", "uniform"], default="gaussian")
    p.add_argument("--out", default="samples.ply")
    p.add_argument("--record", help="comma-separated step indices to save as frames")
    p.add_argument("--frames-dir")
    _add_common(p)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("invert")
    p.add_argument("checkpoint")
    p.add_argument("points", help="PLY or XYZ file in mesh coordinates")
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--solver", choices=["euler", "heun"], default="euler")
    p.add_argument("--out", default="noise.ply")
    p.add_argument("--correspondence", help="CSV path (default: next to --out)")
    _add_common(p)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("roundtrip")
    p.add_argument("checkpoint")
    p.add_argument("--points")
    p.add_argument("--mesh")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--steps", default="4,8,16,64")
    p.add_argument("--solver", choices=["euler", "heun"], default="euler")
    p.add_argument("--out", default="roundtrip.csv")
    _add_common(p)
    p.set_defaults(func=cmd_roundtrip)

    p = sub.add_parser("eval")
    p.add_argument("checkpoint")
    p.add_argument("mesh")
    p.add_argument("--n", type=int, default=1_000_000)
    p.add_argument("--steps", type=int, default=64)
    p.add_argument("--solver", choices=["euler", "heun"], default="heun")
    p.add_argument("--init", choices=["gaussian", "uniform"], default="gaussian")
    p.add_argument("--out", default="metrics.csv")
    p.add_argument("--heatmap", help="PLY with per-point error column")
    p.add_argument("--compression-points", type=float, nargs="+", default=[1e6, 1e9])
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("vf-sample")
    p.add_argument("checkpoint")
    p.add_argument("--n", type=int, default=100_000)
    p.add_argument("--iterations", type=int, default=1, help="repeated projection (default: single shot)")
    p.add_argument("--out", default="vf_samples.ply")
    _add_common(p)
    p.set_defaults(func=cmd_vf_sample)
    return ap


def _thread_limit(n: int | None):
    if n is None:
        return nullcontext()
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    ad.tune_allocator()
    t0 = time.perf_counter()
    try:
        with _thread_limit(args.threads):
            code = args.func(args)
    except (ConfigError, UsageError) as e:
        print(f"geodist: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, MeshError, checkpoint.CheckpointError) as e:
        print(f"geodist: error: {e}", file=sys.stderr)
        return EXIT_IO
    except DivergenceError as e:
        print(f"geodist: training diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as e:
        print(f"geodist: error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    log.info("done in %.1fs", time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
