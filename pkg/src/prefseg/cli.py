"""Command-line entry points for the full segmentation pipeline.

Subcommands: gen-data, train, build-prefs, rate-oracle, refine-upo,
finetune, eval, sweep, consistency, serve.  Every run writes an
``effective-config.txt`` manifest of the values actually used (defaults,
then config file, then flags — later wins) into its output directory, and
re-running with the same seed and config reproduces artifacts byte for
byte.  Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import adapt, dpo, levelset, metrics
from . import model as mm
from . import prefs as prefs_mod
from . import service, synth
from .configio import ConfigError, parse_bool, read_kv, write_kv

DEFAULT_THRESHOLDS = "0.3,0.4,0.5,0.6,0.7"
DEFAULT_FRACTIONS = "0,0.15,0.5,1.0"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors instead of exiting with code 2."""

    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# config plumbing


def _coerce(text: str, default):
    if isinstance(default, bool):
        return parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _build_config(cls, config_path: str | None, overrides: dict):
    """defaults < config file < CLI flags; unknown file keys are errors."""
    fields = {f.name: f.default for f in dataclasses.fields(cls)}
    values = dict(fields)
    if config_path:
        mapping, _ = read_kv(config_path)
        unknown = sorted(set(mapping) - set(fields))
        if unknown:
            raise ConfigError(f"{config_path}: unknown config keys {', '.join(unknown)}")
        for key, text in mapping.items():
            values[key] = _coerce(text, fields[key])
    for key, value in overrides.items():
        if value is not None:
            values[key] = value
    return cls(**values)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_effective_config(out_dir: Path, command: str, pairs: list[tuple[str, object]]):
    out_dir.mkdir(parents=True, exist_ok=True)
    rendered = [("command", command)] + [(k, _fmt(v)) for k, v in pairs]
    write_kv(out_dir / "effective-config.txt", rendered, header="effective configuration")


def _config_pairs(cfg) -> list[tuple[str, object]]:
    return [(f.name, getattr(cfg, f.name)) for f in dataclasses.fields(cfg)]


def _load_dataset(path: str) -> synth.DatasetManifest:
    p = Path(path)
    if p.is_dir():
        p = p / synth.MANIFEST_NAME
    return synth.load_manifest(p)


def _parse_floats(text: str, flag: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip() != ""]
    except ValueError as exc:
        raise ConfigError(f"{flag}: {exc}") from exc


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen_data(args) -> int:
    out = Path(args.out)
    cfg = synth.GenConfig.for_domain(
        args.domain,
        count=args.count,
        height=args.height,
        width=args.width,
        blobs_min=args.blobs_min,
        blobs_max=args.blobs_max,
        bias_dilation_px=args.bias_dilation,
    )
    manifest = synth.gen_dataset(cfg, args.seed, out)
    _write_effective_config(
        out,
        "gen-data",
        [("seed", args.seed), ("out", args.out)]
        + [
            (name, getattr(cfg, name))
            for name in (
                "domain",
                "count",
                "height",
                "width",
                "blobs_min",
                "blobs_max",
                "radius_min",
                "radius_max",
                "rim_width",
                "bias_dilation_px",
            )
        ],
    )
    print(f"wrote {len(manifest.entries)} images to {out}")
    return 0


def _cmd_train(args) -> int:
    if args.stage == "adapt" and not args.target_data:
        raise UsageError("train --stage adapt requires --target-data")
    out = Path(args.out)
    cfg = _build_config(
        adapt.Stage1Config,
        args.config,
        {
            "seed": args.seed,
            "iterations": args.iterations,
            "learning_rate": args.learning_rate,
        },
    )
    init = mm.load_params(args.init) if args.init else None
    source = _load_dataset(args.source_data)
    extra: list[tuple[str, object]] = [
        ("stage", args.stage),
        ("source_data", args.source_data),
        ("init", args.init or ""),
        ("out", args.out),
    ]
    out.mkdir(parents=True, exist_ok=True)
    if args.stage == "source":
        snapshot, log = adapt.train_source(source, cfg, init=init)
        mm.save_params(snapshot.params, out / "model.ckpt")
    else:
        target = _load_dataset(args.target_data)
        student, teacher, log = adapt.train_stage1(
            source, target, args.sparse_fraction, cfg, init=init
        )
        mm.save_params(student.params, out / "student.ckpt")
        mm.save_params(teacher.params, out / "teacher.ckpt")
        extra += [
            ("target_data", args.target_data),
            ("sparse_fraction", args.sparse_fraction),
        ]
    (out / "train-log.txt").write_text("\n".join(log) + "\n")
    _write_effective_config(out, "train", extra + _config_pairs(cfg))
    print(f"trained {args.stage} model into {out}")
    return 0


def _cmd_build_prefs(args) -> int:
    out = Path(args.out)
    manifest = _load_dataset(args.data)
    params = mm.load_params(args.model)
    thresholds = _parse_floats(args.thresholds, "--thresholds")
    seed = manifest.seed if args.seed is None else args.seed
    kept: list[str] = []
    saved: list[tuple[prefs_mod.CandidateSet, synth.Points]] = []
    for index, entry_paths in enumerate(manifest.entries):
        entry = manifest.load(entry_paths)
        if args.prompt_fraction > 0.0 and len(entry.points) > 0:
            prompts = synth.sample_sparse_points(
                entry.points, args.prompt_fraction, adapt.sparse_seed(seed, index)
            )
        else:
            prompts = synth.Points.empty()
        prob = mm.forward_seg(params, mm.extract_features(entry.image, prompts))
        try:
            cands = prefs_mod.generate_candidates(prob, thresholds, image_id=entry.image_id)
        except prefs_mod.DegenerateCandidates as exc:
            print(f"warning: skipping {entry.image_id}: {exc}", file=sys.stderr)
            continue
        kept.append(entry.image_id)
        saved.append((cands, prompts))
    if not kept:
        raise ValueError("every image produced a degenerate candidate set")
    cache = prefs_mod.CandidateCache(
        root=out,
        dataset=args.data,
        thresholds=tuple(thresholds),
        grid_level=args.grid_level,
        prompt_fraction=args.prompt_fraction,
        seed=seed,
        image_ids=tuple(kept),
    )
    for cands, prompts in saved:
        cache.save_image(cands, prompts)
    cache.write_index()
    _write_effective_config(
        out,
        "build-prefs",
        [
            ("data", args.data),
            ("model", args.model),
            ("out", args.out),
            ("thresholds", args.thresholds),
            ("grid_level", args.grid_level),
            ("prompt_fraction", args.prompt_fraction),
            ("seed", seed),
        ],
    )
    print(f"cached candidates for {len(kept)} images in {out}")
    return 0


def _cmd_rate_oracle(args) -> int:
    out = Path(args.out)
    manifest = _load_dataset(args.data)
    cache = prefs_mod.load_cache(args.cache)
    entries = {e.image_id: e for e in manifest.entries}
    records: list[prefs_mod.PreferenceRecord] = []
    stamp = prefs_mod.EPOCH_TIMESTAMP
    for image_id in cache.image_ids:
        if image_id not in entries:
            raise ValueError(f"cache image {image_id!r} not in dataset manifest")
        truth = manifest.load(entries[image_id]).eval_mask
        cands, _prompts = cache.load_image(image_id)
        if args.scope in ("global", "both"):
            ranked = prefs_mod.oracle_rank(cands, truth)
            if ranked is not None:
                records.append(
                    prefs_mod.PreferenceRecord(
                        image_id=image_id,
                        patch_index=-1,
                        preferred=ranked[0],
                        dispreferred=ranked[1],
                        rater="oracle",
                        timestamp=stamp,
                    )
                )
        if args.scope in ("local", "both"):
            grid = prefs_mod.partition_patches(*truth.shape, cache.grid_level)
            for patch_index, cell in enumerate(grid.cells):
                ranked = prefs_mod.oracle_rank(cands, truth, region=cell)
                if ranked is None:
                    continue
                records.append(
                    prefs_mod.PreferenceRecord(
                        image_id=image_id,
                        patch_index=patch_index,
                        preferred=ranked[0],
                        dispreferred=ranked[1],
                        rater="oracle",
                        timestamp=stamp,
                    )
                )
    out.mkdir(parents=True, exist_ok=True)
    prefs_path = out / "prefs.jsonl"
    prefs_path.unlink(missing_ok=True)
    prefs_mod.store_preferences(records, prefs_path)
    _write_effective_config(
        out,
        "rate-oracle",
        [
            ("data", args.data),
            ("cache", args.cache),
            ("out", args.out),
            ("scope", args.scope),
        ],
    )
    print(f"wrote {len(records)} oracle records to {prefs_path}")
    return 0


def _cmd_refine_upo(args) -> int:
    out = Path(args.out)
    manifest = _load_dataset(args.data)
    cache = prefs_mod.load_cache(args.cache)
    params = mm.load_params(args.model)
    drlse = _build_config(levelset.DrlseParams, args.config, {})
    entries = {e.image_id: e for e in manifest.entries}
    refined_dir = out / "refined"
    refined_dir.mkdir(parents=True, exist_ok=True)
    records: list[prefs_mod.PreferenceRecord] = []
    for image_id in cache.image_ids:
        if image_id not in entries:
            raise ValueError(f"cache image {image_id!r} not in dataset manifest")
        entry = manifest.load(entries[image_id])
        cands, prompts = cache.load_image(image_id)
        prob = mm.forward_seg(params, mm.extract_features(entry.image, prompts))
        refined = levelset.refine_mask(prob, entry.image, drlse)
        synth.save_mask_png(refined_dir / f"{image_id}.png", refined)
        records.append(levelset.upo_select(cands, refined))
    out.mkdir(parents=True, exist_ok=True)
    prefs_path = out / "prefs.jsonl"
    prefs_path.unlink(missing_ok=True)
    prefs_mod.store_preferences(records, prefs_path)
    _write_effective_config(
        out,
        "refine-upo",
        [
            ("data", args.data),
            ("cache", args.cache),
            ("model", args.model),
            ("out", args.out),
        ]
        + _config_pairs(drlse),
    )
    print(f"wrote {len(records)} self-rated records to {prefs_path}")
    return 0


def _cmd_finetune(args) -> int:
    out = Path(args.out)
    cfg = _build_config(
        dpo.DpoConfig,
        args.config,
        {
            "seed": args.seed,
            "beta": args.beta,
            "iterations": args.iterations,
            "learning_rate": args.learning_rate,
            "normalization": args.normalization,
        },
    )
    manifest = _load_dataset(args.data)
    cache = prefs_mod.load_cache(args.cache)
    records = prefs_mod.load_preferences(args.prefs)
    policy = mm.load_params(args.model)
    ref = mm.load_params(args.ref) if args.ref else policy.copy()
    snapshot, log = dpo.finetune_dpo(
        policy,
        ref,
        records,
        cache,
        manifest,
        args.mode,
        cfg,
        patch_fraction=args.patch_fraction,
    )
    out.mkdir(parents=True, exist_ok=True)
    mm.save_params(snapshot.params, out / "model.ckpt")
    (out / "loss-log.txt").write_text("\n".join(log) + "\n")
    _write_effective_config(
        out,
        "finetune",
        [
            ("data", args.data),
            ("cache", args.cache),
            ("prefs", args.prefs),
            ("model", args.model),
            ("ref", args.ref or ""),
            ("mode", args.mode),
            ("patch_fraction", args.patch_fraction),
            ("out", args.out),
        ]
        + _config_pairs(cfg),
    )
    print(f"fine-tuned ({args.mode}) model written to {out / 'model.ckpt'}")
    return 0


def _cmd_eval(args) -> int:
    out = Path(args.out)
    manifest = _load_dataset(args.data)
    params = mm.load_params(args.model)
    rows = metrics.evaluate_policy(
        params, manifest, prompt_fraction=args.prompt_fraction, seed=args.seed
    )
    report = metrics.format_report(rows)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report)
    metrics.write_report_csv(rows, out / "report.csv")
    _write_effective_config(
        out,
        "eval",
        [
            ("data", args.data),
            ("model", args.model),
            ("out", args.out),
            ("prompt_fraction", args.prompt_fraction),
            ("seed", args.seed),
        ],
    )
    sys.stdout.write(report)
    return 0


def _cmd_sweep(args) -> int:
    out = Path(args.out)
    manifest = _load_dataset(args.data)
    params = mm.load_params(args.model)
    fractions = _parse_floats(args.fractions, "--fractions")
    table = metrics.eval_prompt_sweep(params, manifest, fractions, seed=args.seed)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        fh.write("fraction,dice,aji,pq\n")
        for fraction, d, a, p in table:
            fh.write(f"{fraction:g},{d:.10f},{a:.10f},{p:.10f}\n")
    _write_effective_config(
        out,
        "sweep",
        [
            ("data", args.data),
            ("model", args.model),
            ("out", args.out),
            ("fractions", args.fractions),
            ("seed", args.seed),
        ],
    )
    print(f"{'fraction':>8}  {'dice':>8}  {'aji':>8}  {'pq':>8}")
    for fraction, d, a, p in table:
        print(f"{fraction:8.2f}  {d:8.4f}  {a:8.4f}  {p:8.4f}")
    return 0


def _cmd_consistency(args) -> int:
    out = Path(args.out)
    records = prefs_mod.load_preferences(args.prefs)
    global_recs = [r for r in records if r.patch_index == -1]
    local_recs = [r for r in records if r.patch_index >= 0]
    hist = prefs_mod.consistency_histogram(global_recs, local_recs)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "consistency.csv", "w") as fh:
        fh.write("k,count\n")
        for k, count in enumerate(hist):
            fh.write(f"{k},{int(count)}\n")
    _write_effective_config(
        out, "consistency", [("prefs", args.prefs), ("out", args.out)]
    )
    print(f"{'k':>4}  {'images':>6}")
    for k, count in enumerate(hist):
        print(f"{k:4d}  {int(count):6d}")
    return 0


def _cmd_serve(args) -> int:
    out = Path(args.out)
    manifest = _load_dataset(args.data)
    cache = prefs_mod.load_cache(args.cache)
    out.mkdir(parents=True, exist_ok=True)
    prefs_path = Path(args.prefs) if args.prefs else out / "prefs.jsonl"
    ui_dir = args.ui
    if ui_dir is None:
        bundled = Path(__file__).resolve().parents[2] / "frontend" / "dist"
        ui_dir = str(bundled) if (bundled / "index.html").is_file() else None
    server, svc = service.start_server(
        manifest, cache, prefs_path, host=args.host, port=args.port, ui_dir=ui_dir
    )
    _write_effective_config(
        out,
        "serve",
        [
            ("data", args.data),
            ("cache", args.cache),
            ("prefs", str(prefs_path)),
            ("host", args.host),
            ("port", args.port),
            ("ui", ui_dir or ""),
            ("out", args.out),
        ],
    )
    host, port = server.server_address[:2]
    progress = svc.progress()
    print(f"serving {progress['total']} tasks ({progress['pending']} pending) on http://{host}:{port}/")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


# ---------------------------------------------------------------------------
# parser


def _build_parser() -> _Parser:
    parser = _Parser(prog="prefseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: _Parser, seed_default=0):
        p.add_argument("--seed", type=int, default=seed_default, help="random seed")
        p.add_argument("--config", default=None, help="key=value config file")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(p)
    p.add_argument("--domain", choices=("source", "target"), required=True)
    p.add_argument("--count", type=int, default=12)
    p.add_argument("--height", type=int, default=96)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--blobs-min", type=int, default=3)
    p.add_argument("--blobs-max", type=int, default=8)
    p.add_argument("--bias-dilation", type=int, default=0,
                   help="dilate stored masks by this many pixels (keeps true masks aside)")
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="train the source model or run mean-teacher adaptation")
    common(p, seed_default=None)
    p.add_argument("--stage", choices=("source", "adapt"), required=True)
    p.add_argument("--source-data", required=True, help="source dataset dir or manifest")
    p.add_argument("--target-data", default=None, help="target dataset dir or manifest")
    p.add_argument("--sparse-fraction", type=float, default=0.15,
                   help="share of target points used as sparse annotations (0 = unsupervised)")
    p.add_argument("--init", default=None, help="checkpoint to start from")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("build-prefs", help="cache thresholded candidate masks per image")
    common(p, seed_default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--thresholds", default=DEFAULT_THRESHOLDS)
    p.add_argument("--grid-level", type=int, default=3)
    p.add_argument("--prompt-fraction", type=float, default=0.15)
    p.set_defaults(func=_cmd_build_prefs)

    p = sub.add_parser("rate-oracle", help="rank cached candidates against ground truth")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--scope", choices=("global", "local", "both"), default="both")
    p.set_defaults(func=_cmd_rate_oracle)

    p = sub.add_parser("refine-upo", help="self-rate candidates via level-set refinement")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(func=_cmd_refine_upo)

    p = sub.add_parser("finetune", help="preference fine-tuning (GPO/LPO/SLPO/UPO)")
    common(p, seed_default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--prefs", required=True, help="preference JSONL file")
    p.add_argument("--model", required=True, help="policy checkpoint")
    p.add_argument("--ref", default=None, help="reference checkpoint (default: --model)")
    p.add_argument("--mode", choices=dpo.MODES, required=True)
    p.add_argument("--patch-fraction", type=float, default=0.15)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--normalization", choices=("mean", "sum"), default=None)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--prompt-fraction", type=float, default=0.0)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="evaluate across inference prompt fractions")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--fractions", default=DEFAULT_FRACTIONS)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("consistency", help="k-agreement histogram of global vs local preferences")
    common(p)
    p.add_argument("--prefs", required=True, help="JSONL with both global and patch records")
    p.set_defaults(func=_cmd_consistency)

    p = sub.add_parser("serve", help="run the annotation HTTP service")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--cache", required=True)
    p.add_argument("--prefs", default=None, help="preference JSONL (default <out>/prefs.jsonl)")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8731)
    p.add_argument("--ui", default=None, help="static UI bundle directory")
    p.set_defaults(func=_cmd_serve)

    return parser


def cli_main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, OSError, KeyError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
