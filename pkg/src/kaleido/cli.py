"""Experiment driver: dataset generation, training, sampling, sweeps,
latent editing round-trips, evaluation, and plots.

Every artifact-producing command records what it wrote in the output
directory's manifest. Exit codes: 0 success, 1 contract violation,
2 IO error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    CanvasSpec,
    GmmSpec,
    assign_mode,
    read_dataset,
    sample_canvas_dataset,
    sample_dataset,
    samples_from_csv,
    samples_to_csv,
    toy_gmm_default,
    write_dataset,
)
from .errors import GrammarError, KaleidoError, ContractError
from .latents.codebook import KMeansCodebook, build_codebook
from .latents.codecs import decode_bbox, decode_blob, validate_sequence
from .latents.extract import canvas_patches, extract_latent
from .latents.vocab import LatentSequence
from .manifest import RunManifest
from .metrics import compute_report
from .plotting import emit_plot
from .train import (
    Checkpoint,
    TrainConfig,
    draw_latents,
    sample_from,
    train,
    vocab_for_dataset,
)
from .validation import atomic_write_text, substream

logger = logging.getLogger("kaleido")

DEFAULT_SWEEP_GAMMAS = (1.0, 2.0, 4.0, 8.0)
SAMPLE_GUIDANCE_DEFAULT = 7.0
SWEEP_CSV_HEADER = "gamma,variant,coverage,recall,precision,fd,adherence,n,seed"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as contract violations."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _require_out(args) -> Path:
    if args.out is None:
        raise ContractError("this command needs --out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _guard_overwrite(args, *paths):
    if args.force:
        return
    clashes = [str(p) for p in paths if Path(p).exists()]
    if clashes:
        raise ContractError(
            "refusing to overwrite existing artifacts (use --force): "
            + ", ".join(clashes))


def _fmt_cell(v) -> str:
    return "" if v is None else repr(float(v))


# ---------------------------------------------------------------------------
# dataset directory layout

def _write_latent_file(path, latents: list[LatentSequence]) -> None:
    lines = [f"{i} {z.scheme} {z.surface()}".rstrip() for i, z in enumerate(latents)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def _read_latent_file(path) -> list[tuple[int, LatentSequence]]:
    """Parse 'sample_id scheme payload-tokens...' lines; errors carry
    1-based line numbers and nothing is repaired silently."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for ln, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) < 2:
                raise GrammarError(f"{path}:{ln}: expected 'sample_id scheme payload...'")
            try:
                sample_id = int(parts[0])
            except ValueError:
                raise GrammarError(f"{path}:{ln}: sample_id {parts[0]!r} is not an integer")
            scheme = parts[1]
            try:
                seq = LatentSequence.from_surface(scheme, " ".join(parts[2:]))
            except KaleidoError as exc:
                raise GrammarError(f"{path}:{ln}: {exc}")
            out.append((sample_id, seq))
    if not out:
        raise GrammarError(f"{path}: no latent lines")
    return out


def _load_data_dir(data_dir):
    data_dir = Path(data_dir)
    meta = json.loads((data_dir / "dataset.json").read_text())
    if meta["kind"] == "gmm":
        spec = GmmSpec.from_jsonable(meta["spec"])
        dataset = read_dataset(data_dir / "dataset.csv")
    else:
        spec = CanvasSpec.from_jsonable(meta["spec"])
        dataset = read_dataset(data_dir / "dataset.csv", data_dir / "params.json")
    latents = None
    lat_path = data_dir / "latents.txt"
    if lat_path.exists():
        rows = _read_latent_file(lat_path)
        if [i for i, _ in rows] != list(range(len(dataset))):
            raise ContractError(f"{lat_path}: sample ids must be 0..n-1 in order")
        latents = [z for _, z in rows]
    codebook = None
    cb_path = data_dir / "codebook.json"
    if cb_path.exists():
        codebook = KMeansCodebook.from_jsonable(json.loads(cb_path.read_text()))
    return meta, spec, dataset, latents, codebook


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args) -> int:
    out = _require_out(args)
    paths = [out / "dataset.csv", out / "dataset.json", out / "latents.txt"]
    if args.dataset == "canvas":
        paths.append(out / "params.json")
    if args.scheme in ("voken", "combined"):
        paths.append(out / "codebook.json")
    _guard_overwrite(args, *paths)
    if args.n < 1:
        raise ContractError(f"n must be >= 1, got {args.n}")
    codebook = None
    if args.dataset == "gmm":
        spec = toy_gmm_default(unequal=args.unequal)
        dataset = sample_dataset(spec, args.n, seed=args.seed)
        kind = "gmm"
    else:
        spec = CanvasSpec()
        dataset = sample_canvas_dataset(spec, args.n, seed=args.seed)
        kind = "canvas"
        if args.scheme in ("voken", "combined"):
            # codebook is fit on individual patch vectors, not whole canvases
            patches = np.vstack([
                canvas_patches(s.x.reshape(spec.resolution, spec.resolution))
                for s in dataset])
            codebook = build_codebook(patches, k=args.codebook_size,
                                      seed=int(substream(args.seed, "codebook").integers(2**31)))
    latents = [extract_latent(s.x, s.class_id, args.scheme, spec, codebook=codebook)
               for s in dataset]
    write_dataset(out / "dataset.csv", dataset,
                  sidecar_path=(out / "params.json" if kind == "canvas" else None))
    meta = {"kind": kind, "scheme": args.scheme, "n": args.n, "seed": args.seed,
            "unequal": bool(args.unequal), "spec": spec.to_jsonable()}
    atomic_write_text(out / "dataset.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_latent_file(out / "latents.txt", latents)
    if codebook is not None:
        atomic_write_text(out / "codebook.json",
                          json.dumps(codebook.to_jsonable(), indent=2, sort_keys=True) + "\n")
    man = RunManifest.load_or_create(out)
    man.record("gen-data", meta, args.seed, paths)
    logger.info("wrote %d samples (%s, scheme=%s) to %s", args.n, kind, args.scheme, out)
    return 0


def _train_config_from_args(args, meta) -> TrainConfig:
    if args.config is not None:
        blob = json.loads(Path(args.config).read_text())
        config = TrainConfig.from_jsonable(blob)
    else:
        config = TrainConfig(variant=args.variant, latent_scheme=meta["scheme"])
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if config.latent_scheme != meta["scheme"]:
        raise ContractError(
            f"config latent_scheme {config.latent_scheme!r} does not match "
            f"dataset scheme {meta['scheme']!r}")
    return dataclasses.replace(config, **overrides) if overrides else config


def cmd_train(args) -> int:
    out = _require_out(args)
    paths = [out / "config.json", out / "checkpoint.json", out / "trainlog.csv"]
    _guard_overwrite(args, *paths)
    meta, spec, dataset, latents, codebook = _load_data_dir(args.data)
    config = _train_config_from_args(args, meta)
    ckpt, log = train(config, dataset, spec,
                      latents=latents if config.variant == "kaleido" else None,
                      codebook=codebook, out_dir=out)
    atomic_write_text(out / "config.json",
                      json.dumps(config.to_jsonable(), indent=2, sort_keys=True) + "\n")
    atomic_write_text(out / "trainlog.csv", log.to_csv())
    ckpt.save(out / "checkpoint.json")
    man = RunManifest.load_or_create(out)
    man.record("train", config.to_jsonable(), config.seed, paths)
    logger.info("trained %s for %d steps; final losses %s",
                config.variant, config.steps, ckpt.final_losses)
    return 0


def _sample_meta(ckpt, class_ids, guidance, steps, seed, scheme) -> dict:
    return {"variant": ckpt.config.variant, "guidance": guidance,
            "steps": steps, "seed": seed, "scheme": scheme,
            "class_ids": list(class_ids), "dataset_kind": ckpt.dataset_kind}


def _write_samples(out, args, ckpt, x, class_ids, zs, guidance, steps, seed):
    spec = ckpt.spec()
    if isinstance(spec, GmmSpec):
        modes = list(assign_mode(x, spec))
    else:
        modes = [""] * x.shape[0]
    surfaces = [""] * x.shape[0] if zs is None else [z.surface() for z in zs]
    scheme = ckpt.config.latent_scheme
    paths = [out / "samples.csv", out / "samples.json"]
    _guard_overwrite(args, *paths)
    atomic_write_text(out / "samples.csv", samples_to_csv(x, modes, surfaces))
    meta = _sample_meta(ckpt, class_ids, guidance, steps, seed, scheme)
    atomic_write_text(out / "samples.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    man = RunManifest.load_or_create(out)
    man.record("sample", meta, seed, paths)
    return paths


def cmd_sample(args) -> int:
    out = _require_out(args)
    ckpt = Checkpoint.load(args.ckpt)
    steps = args.steps if args.steps is not None else ckpt.config.sched_steps
    latents = None
    if args.latents is not None:
        rows = _read_latent_file(args.latents)
        vocab = vocab_for_dataset(
            ckpt.config.latent_scheme, ckpt.spec(),
            0 if ckpt.codebook is None else ckpt.codebook.centroids_.shape[0])
        for ln, (sample_id, seq) in enumerate(rows, start=1):
            try:
                validate_sequence(seq, vocab, codebook=ckpt.codebook)
            except KaleidoError as exc:
                raise GrammarError(f"{args.latents}: line {ln}: {exc}")
        latents = [seq for _, seq in rows]
        n = len(latents)
    else:
        n = args.n
        if n is None or n < 1:
            raise ContractError(f"n must be >= 1, got {n}")
    class_ids = [args.class_id] * n
    x, zs = sample_from(ckpt, class_ids, guidance=args.guidance, seed=args.seed,
                        steps=steps, latents=latents, temperature=args.temperature)
    _write_samples(out, args, ckpt, x, class_ids, zs, args.guidance, steps, args.seed)
    logger.info("sampled %d chains (guidance %.3g) to %s", n, args.guidance, out)
    return 0


def cmd_eval(args) -> int:
    out = _require_out(args)
    report_path = out / "report.json"
    _guard_overwrite(args, report_path)
    meta, spec, dataset, _, codebook = _load_data_dir(args.data)
    sdir = Path(args.samples)
    x, modes, surfaces = samples_from_csv((sdir / "samples.csv").read_text())
    smeta = json.loads((sdir / "samples.json").read_text())
    real = np.stack([s.x for s in dataset])
    conditioned = None
    class_ids = smeta["class_ids"]
    if any(surfaces):
        conditioned = [LatentSequence.from_surface(smeta["scheme"], s) for s in surfaces]
    report = compute_report(real, x, spec, guidance=smeta["guidance"],
                            class_ids=class_ids, conditioned=conditioned,
                            codebook=codebook)
    atomic_write_text(report_path, report.to_json() + "\n")
    man = RunManifest.load_or_create(out)
    man.record("eval", smeta, smeta.get("seed", 0), [report_path])
    print(report.to_json())
    return 0


def _sweep_cell(ckpt, spec, real, gamma, n, seed, codebook):
    classes = sorted(spec.class_ids())
    share = [n // len(classes)] * len(classes)
    for i in range(n - sum(share)):
        share[i] += 1
    xs, all_classes, all_zs = [], [], []
    for offset, (cls, cnt) in enumerate(zip(classes, share)):
        if cnt == 0:
            continue
        x, zs = sample_from(ckpt, cls, n=cnt, guidance=gamma,
                            seed=int(substream(seed, "cell", offset).integers(2**31)))
        xs.append(x)
        all_classes += [cls] * cnt
        if zs is not None:
            all_zs += zs
    x = np.vstack(xs)
    conditioned = all_zs if all_zs else None
    return compute_report(real, x, spec, guidance=gamma, class_ids=all_classes,
                          conditioned=conditioned, codebook=codebook)


def cmd_sweep(args) -> int:
    out = _require_out(args)
    paths = [out / "sweep.csv", out / "coverage_vs_gamma.svg", out / "recall_vs_gamma.svg"]
    _guard_overwrite(args, *paths)
    meta, spec, dataset, _, codebook = _load_data_dir(args.data)
    ckpt_b = Checkpoint.load(args.baseline)
    ckpt_k = Checkpoint.load(args.kaleido)
    warnings = []
    if ckpt_b.config.variant != "baseline" or ckpt_k.config.variant != "kaleido":
        raise ContractError("sweep needs --baseline and --kaleido checkpoints of those variants")
    if ckpt_b.config.seed != ckpt_k.config.seed:
        warnings.append(
            f"checkpoint seeds differ (baseline {ckpt_b.config.seed}, "
            f"kaleido {ckpt_k.config.seed}); not a controlled pair")
        logger.warning(warnings[-1])
    gammas = args.gammas
    real = np.stack([s.x for s in dataset])
    rows = []
    series = {"coverage": {}, "recall": {}}
    for variant, ckpt in (("baseline", ckpt_b), ("kaleido", ckpt_k)):
        covs, recs = [], []
        for gamma in gammas:
            rep = _sweep_cell(ckpt, spec, real, gamma, args.n, args.seed, codebook)
            rows.append([repr(float(gamma)), variant, _fmt_cell(rep.mode_coverage),
                         _fmt_cell(rep.recall), _fmt_cell(rep.precision),
                         _fmt_cell(rep.frechet_distance), _fmt_cell(rep.latent_adherence),
                         str(rep.n_gen), str(args.seed)])
            covs.append(np.nan if rep.mode_coverage is None else rep.mode_coverage)
            recs.append(rep.recall)
            logger.info("sweep gamma=%g %s: coverage=%s recall=%.3f fd=%.3f",
                        gamma, variant, rep.mode_coverage, rep.recall,
                        rep.frechet_distance)
        if not any(np.isnan(covs)):
            series["coverage"][variant] = (np.asarray(gammas, dtype=float), np.asarray(covs))
        series["recall"][variant] = (np.asarray(gammas, dtype=float), np.asarray(recs))
    csv_text = SWEEP_CSV_HEADER + "\n" + "\n".join(",".join(r) for r in rows) + "\n"
    atomic_write_text(out / "sweep.csv", csv_text)
    written = [out / "sweep.csv"]
    if series["coverage"]:
        emit_plot(series["coverage"], "line", out / "coverage_vs_gamma.svg",
                  title="Mode coverage vs guidance", xlabel="guidance", ylabel="coverage")
        written.append(out / "coverage_vs_gamma.svg")
    emit_plot(series["recall"], "line", out / "recall_vs_gamma.svg",
              title="Recall vs guidance", xlabel="guidance", ylabel="recall")
    written.append(out / "recall_vs_gamma.svg")
    man = RunManifest.load_or_create(out)
    man.record("sweep", {"gammas": list(gammas), "n": args.n,
                         "baseline": str(args.baseline), "kaleido": str(args.kaleido)},
               args.seed, written, warnings=warnings)
    return 0


def _readable_latent(seq: LatentSequence) -> str:
    from .latents.codecs import split_combined

    def one(scheme, tokens):
        if scheme == "bbox":
            b = decode_bbox(tokens)
            return f"bbox=({b.x1}, {b.y1}, {b.x2}, {b.y2})"
        if scheme == "blob":
            b = decode_blob(tokens)
            return (f"blob=(x={b.x_c:.0f}, y={b.y_c:.0f}, r_major={b.r_major:.0f}, "
                    f"r_minor={b.r_minor:.0f}, theta={b.theta_deg:.1f})")
        return f"{scheme}={' '.join(tokens)}"

    if seq.scheme == "combined":
        text, bbox, voken = split_combined(seq.payload)
        return " | ".join([one("text", text), one("bbox", bbox), one("voken", voken)])
    return one(seq.scheme, seq.payload)


def cmd_edit(args) -> int:
    out = _require_out(args)
    paths = [out / "latents.txt", out / "latents_readable.txt"]
    _guard_overwrite(args, *paths)
    ckpt = Checkpoint.load(args.ckpt)
    zs = draw_latents(ckpt, args.class_id, n=args.n, temperature=args.temperature,
                      seed=args.seed)
    _write_latent_file(out / "latents.txt", zs)
    readable = [f"{i}: class={args.class_id} {_readable_latent(z)}"
                for i, z in enumerate(zs)]
    atomic_write_text(out / "latents_readable.txt", "\n".join(readable) + "\n")
    man = RunManifest.load_or_create(out)
    man.record("edit", {"class_id": args.class_id, "n": args.n,
                        "ckpt": str(args.ckpt)}, args.seed, paths)
    print(f"latent file: {out / 'latents.txt'}")
    print("edit payload tokens in place, then regenerate with:")
    print(f"  kaleido sample --ckpt {args.ckpt} --class-id {args.class_id} "
          f"--latents {out / 'latents.txt'} --guidance {args.guidance} "
          f"--seed {args.seed} --out {out / 'regen'}")
    return 0


def cmd_plot(args) -> int:
    out_path = Path(args.out) if args.out else None
    if out_path is None:
        raise ContractError("plot needs --out pointing at the target .svg")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    if not args.force and out_path.exists():
        raise ContractError(f"refusing to overwrite {out_path} (use --force)")
    if args.kind == "scatter":
        if args.samples is None:
            raise ContractError("scatter needs --samples")
        sdir = Path(args.samples)
        x, modes, _ = samples_from_csv((sdir / "samples.csv").read_text())
        if x.shape[1] != 2:
            raise ContractError("scatter plots need 2-d samples")
        groups = {}
        for mode in sorted(set(modes)):
            pts = x[[i for i, m in enumerate(modes) if m == mode]]
            groups[mode if mode else "(unlabeled)"] = pts
        emit_plot(groups, "scatter", out_path, title=args.title or "Samples by mode",
                  xlabel="x", ylabel="y")
    else:
        if args.sweep is None:
            raise ContractError("line plots need --sweep")
        rows = [r.split(",") for r in
                Path(args.sweep).read_text().strip().split("\n")]
        header = rows[0]
        idx = {name: header.index(name) for name in ("gamma", "variant", args.metric)}
        series = {}
        for r in rows[1:]:
            if r[idx[args.metric]] == "":
                continue
            series.setdefault(r[idx["variant"]], []).append(
                (float(r[idx["gamma"]]), float(r[idx[args.metric]])))
        series = {k: (np.array([p[0] for p in v]), np.array([p[1] for p in v]))
                  for k, v in sorted(series.items())}
        emit_plot(series, "line", out_path,
                  title=args.title or f"{args.metric} vs guidance",
                  xlabel="guidance", ylabel=args.metric)
    man_dir = out_path.parent
    man = RunManifest.load_or_create(man_dir)
    man.record("plot", {"kind": args.kind, "target": out_path.name},
               args.seed or 0, [out_path])
    logger.info("wrote %s", out_path)
    return 0


def cmd_verify_manifest(args) -> int:
    root = Path(args.out) if args.out else Path(".")
    man = RunManifest.load_or_create(root)
    if not man.entries:
        raise ContractError(f"no manifest entries under {root}")
    problems = man.verify()
    for p in problems:
        print(f"PROBLEM: {p}", file=sys.stderr)
    if problems:
        raise ContractError(f"{len(problems)} manifest problem(s) under {root}")
    print(f"manifest ok: {len(man.entries)} entries, "
          f"{sum(len(e.artifacts) for e in man.entries)} artifacts")
    return 0


# ---------------------------------------------------------------------------
# wiring

def build_parser() -> _Parser:
    parser = _Parser(prog="kaleido", description=__doc__)
    parser.add_argument("--version", action="version", version=f"kaleido {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed")
    common.add_argument("--out", type=str, default=None, help="output directory")
    common.add_argument("--force", action="store_true", help="overwrite existing artifacts")
    common.add_argument("--config", type=str, default=None, help="JSON config path")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a labeled dataset + latents")
    p.add_argument("--dataset", choices=("gmm", "canvas"), default="gmm")
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--scheme", choices=("text", "bbox", "blob", "voken", "combined"),
                   default="text")
    p.add_argument("--unequal", action="store_true",
                   help="unequal within-class mode weights (0.7/0.3)")
    p.add_argument("--codebook-size", type=int, default=4)
    p.set_defaults(func=cmd_gen_data, default_seed=0)

    p = sub.add_parser("train", parents=[common], help="train one variant on a dataset dir")
    p.add_argument("--data", required=True, help="gen-data output directory")
    p.add_argument("--variant", choices=("baseline", "kaleido"), default="baseline")
    p.set_defaults(func=cmd_train, default_seed=None)

    p = sub.add_parser("sample", parents=[common], help="two-stage guided sampling")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class-id", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--guidance", type=float, default=SAMPLE_GUIDANCE_DEFAULT)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--latents", type=str, default=None,
                   help="latent file: use these sequences verbatim (editing path)")
    p.set_defaults(func=cmd_sample, default_seed=0)

    p = sub.add_parser("sweep", parents=[common], help="guidance sweep over a trained pair")
    p.add_argument("--data", required=True)
    p.add_argument("--baseline", required=True, help="baseline checkpoint path")
    p.add_argument("--kaleido", required=True, help="kaleido checkpoint path")
    p.add_argument("--gammas", type=lambda s: tuple(float(v) for v in s.split(",")),
                   default=DEFAULT_SWEEP_GAMMAS)
    p.add_argument("--n", type=int, default=1000, help="samples per (gamma, variant) cell")
    p.set_defaults(func=cmd_sweep, default_seed=0)

    p = sub.add_parser("edit", parents=[common], help="emit an editable latent file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--class-id", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--guidance", type=float, default=SAMPLE_GUIDANCE_DEFAULT)
    p.add_argument("--temperature", type=float, default=1.0)
    p.set_defaults(func=cmd_edit, default_seed=0)

    p = sub.add_parser("eval", parents=[common], help="metric report for a sample dir")
    p.add_argument("--samples", required=True, help="sample output directory")
    p.add_argument("--data", required=True, help="dataset directory (real reference)")
    p.set_defaults(func=cmd_eval, default_seed=0)

    p = sub.add_parser("plot", parents=[common], help="render scatter/line SVG figures")
    p.add_argument("--kind", choices=("scatter", "line"), required=True)
    p.add_argument("--samples", type=str, default=None)
    p.add_argument("--sweep", type=str, default=None)
    p.add_argument("--metric", type=str, default="recall")
    p.add_argument("--title", type=str, default=None)
    p.set_defaults(func=cmd_plot, default_seed=0)

    p = sub.add_parser("verify-manifest", parents=[common],
                       help="re-hash artifacts and check manifest reachability")
    p.set_defaults(func=cmd_verify_manifest, default_seed=0)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.seed is None:
        args.seed = getattr(args, "default_seed", 0)
    try:
        return args.func(args)
    except KaleidoError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
