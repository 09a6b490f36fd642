"""``psmmlab`` command line: synth, pool, split, train, eval, report, gradcheck.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 incompatible
checkpoint.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import dataset, metrics, pipeline, protocols, rankpool
from .gradcheck import check_model
from .loader import ClipStore, LoaderError, worker_count

EXIT_INPUT, EXIT_NUMERIC, EXIT_CHECKPOINT = 2, 3, 4

# learning rates used when --lr is not given
DEFAULT_LR = {"resnet18": 0.1, "toy": 0.003}


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_INPUT):
        super().__init__(message)
        self.code = code


def _csv_ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _modalities(text: str) -> tuple[str, ...]:
    mods = tuple(m for m in text.split(",") if m)
    bad = [m for m in mods if m not in dataset.MODALITIES]
    if bad or not mods:
        raise argparse.ArgumentTypeError(f"modalities must be drawn from {','.join(dataset.MODALITIES)}")
    return mods


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="psmmlab", description="Multi-modal face anti-spoofing toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, root=True):
        if root:
            sp.add_argument("--root", required=True, help="dataset root")
        sp.add_argument("--seed", type=int, default=0, help="run seed; every random stream derives from it")

    s = sub.add_parser("synth", help="write a synthetic dataset")
    common(s)
    s.add_argument("--subjects", type=int, default=2, help="subjects per ethnicity, numbered from 1")
    s.add_argument("--subject-ids", type=_csv_ints, default=None, help="explicit subject ids, overriding --subjects")
    s.add_argument("--frames", type=int, default=14, help="frames per clip")
    s.add_argument("--side", type=int, default=32, help="frame side in pixels")
    s.add_argument("--mask-subjects", type=int, default=0)
    s.add_argument("--silica-subjects", type=int, default=0)

    s = sub.add_parser("pool", help="write dynamic images next to every clip as <clip>/dyn/frame_%%04d.png")
    common(s)
    s.add_argument("--k", type=int, default=rankpool.DEFAULT_K, help="window length")
    s.add_argument("--stride", type=int, default=None, help="window stride (default: K)")

    s = sub.add_parser("split", help="write train/valid/test manifests for a sub-protocol")
    common(s)
    s.add_argument("--protocol", required=True, help="sub-protocol P_S, e.g. 1_1, or 'all'")
    s.add_argument("--protocol-table", default=None, help="text table overriding the built-in protocols")
    s.add_argument("--out", required=True)

    def model_args(sp):
        sp.add_argument("--protocol", required=True, help="sub-protocol P_S, e.g. 4_1")
        sp.add_argument("--protocol-table", default=None)
        sp.add_argument("--preset", choices=("toy", "resnet18"), default="toy")
        sp.add_argument("--variant", choices=pipeline.VARIANTS, default="psmm")
        sp.add_argument(
            "--modalities", type=_modalities, default=None, help="comma list (default: all three; color for sdnet)"
        )
        sp.add_argument("--k", type=int, default=rankpool.DEFAULT_K, help="dynamic-image window length")
        sp.add_argument("--stride", type=int, default=None, help="window stride (default: K)")
        sp.add_argument("--out", required=True, help="output directory")

    s = sub.add_parser(
        "train",
        help="train a model on a sub-protocol's train split",
        description="Defaults follow the full-scale schedule: 25 epochs, batch 64, lr 0.1 decayed x0.1 "
        "at epochs 15 and 20, K=7. With --preset toy and no --lr, lr defaults to 0.003.",
    )
    common(s)
    model_args(s)
    s.add_argument("--epochs", type=int, default=25)
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--lr", type=float, default=None, help="base learning rate (default 0.1; toy 0.003)")
    s.add_argument("--decay-epochs", type=_csv_ints, default=(15, 20), help="epochs where lr drops x0.1")
    s.add_argument("--no-augment", action="store_true")

    s = sub.add_parser("eval", help="score a split; threshold from the valid split at EER")
    common(s)
    model_args(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--split", choices=protocols.SPLITS, default="test", help="split to score")
    s.add_argument("--worst-pai", action="store_true", help="APCER as the maximum over attack instruments")

    s = sub.add_parser("report", help="aggregate score files of one protocol")
    s.add_argument("scores", nargs="+", help="score files, one per sub-protocol")
    s.add_argument("--out", default=None)
    s.add_argument("--worst-pai", action="store_true")

    s = sub.add_parser("gradcheck", help="finite-difference check of backprop on a toy model")
    common(s, root=False)
    s.add_argument("--variant", choices=pipeline.VARIANTS, default="psmm")
    s.add_argument("--preset", choices=("toy", "resnet18"), default="toy")
    s.add_argument("--modalities", type=_modalities, default=None)
    s.add_argument("--params", type=int, default=100)
    s.add_argument("--batch", type=int, default=2)
    return p


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_synth(args):
    root = dataset.generate_synthetic(
        args.root,
        args.subjects,
        args.frames,
        args.side,
        args.seed,
        args.mask_subjects,
        args.silica_subjects,
        args.subject_ids,
    )
    print(f"clips={len(dataset.scan_catalog(root))} root={root}")


def cmd_pool(args):
    catalog = dataset.scan_catalog(args.root)
    if not catalog:
        raise CLIError(f"no clips under {args.root}")
    store = ClipStore(args.root, args.k)
    store.precompute([r.path for r in catalog], args.stride, worker_count())
    written = 0
    for r in catalog:
        out = Path(args.root) / r.path / "dyn"
        out.mkdir(exist_ok=True)
        for start in rankpool.window_starts(r.frame_count, args.k, args.stride):
            img = np.round(store.dynamic(r.path, start) * 255).astype(np.uint8)
            Image.fromarray(img, "RGB").save(out / f"frame_{start:04d}.png")
            written += 1
    print(f"dynamic_images={written}")


def _table(args):
    if args.protocol_table is None:
        return None
    return protocols.parse_protocol_table(Path(args.protocol_table).read_text(encoding="utf-8"))


def _manifests(args, allow_empty=False):
    spec = protocols.get_protocol(args.protocol, _table(args))
    catalog = dataset.scan_catalog(args.root)
    return spec, protocols.protocol_split(catalog, spec, allow_empty=allow_empty)


def cmd_split(args):
    table = _table(args)
    names = list((table or protocols.BUILTIN_PROTOCOLS)) if args.protocol == "all" else [args.protocol]
    catalog = dataset.scan_catalog(args.root)
    out = Path(args.out)
    for name in names:
        spec = protocols.get_protocol(name, table)
        manifests = protocols.protocol_split(catalog, spec)
        for split, rows in manifests.items():
            protocols.write_manifest(out / name / f"{split}.txt", rows)
        lines = []
        if name in {n for n, _ in protocols.REPORTED_COUNTS}:
            for c in protocols.compare_with_reported(name, manifests):
                lines.append(
                    f"{name} {c.split} derived={'/'.join(map(str, c.derived))} "
                    f"reported={'/'.join(map(str, c.reported))} status={c.status}"
                )
        (out / name / "counts.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
        print("\n".join(lines) if lines else f"{name}: manifests written")


def _model_modalities(args):
    if args.modalities is not None:
        return args.modalities
    return ("color",) if args.variant == "sdnet" else dataset.MODALITIES


def cmd_train(args):
    _, manifests = _manifests(args)
    model = pipeline.build_model(args.variant, args.preset, _model_modalities(args), args.seed)
    lr = args.lr if args.lr is not None else DEFAULT_LR[args.preset]
    cfg = pipeline.TrainConfig(
        args.epochs, args.batch, lr, args.decay_epochs, args.k, args.stride, args.seed, not args.no_augment
    )
    loader = pipeline.make_loader(args.root, manifests["train"], model, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "train.log", "w", encoding="utf-8") as log:
        log.write(f"# started={time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        log.write(
            f"# variant={args.variant} preset={args.preset} modalities={','.join(model.modalities)} "
            f"protocol={args.protocol} seed={args.seed} lr={lr:g} batch={args.batch} epochs={args.epochs}\n"
        )

        def emit(entry):
            log.write(entry.line() + "\n")
            log.flush()
            print(entry.line(), flush=True)

        pipeline.train(model, loader, cfg, emit)
    extra = {"protocol": args.protocol, "seed": str(args.seed), "k": str(args.k)}
    pipeline.save_model(out / "checkpoint", model, args.variant, extra)
    print(f"checkpoint={out / 'checkpoint'}")


def _score_rows(model, args, rows, store):
    scored = pipeline.score_samples(model, args.root, rows, args.k, args.stride, store)
    return [metrics.ScoreRow(p, s, y, args.protocol, pai) for p, s, y, pai in scored]


def cmd_eval(args):
    _, manifests = _manifests(args, allow_empty=True)
    model, _ = pipeline.load_model(args.checkpoint, args.variant, args.preset, args.modalities)
    store = ClipStore(args.root, args.k)
    valid = _score_rows(model, args, manifests["valid"], store)
    if not valid:
        raise CLIError("the valid split has nothing to score, so no threshold can be chosen")
    threshold = metrics.eer_threshold([r.score for r in valid], [r.label for r in valid])
    rows = _score_rows(model, args, manifests[args.split], store)
    if not rows:
        raise CLIError(f"the {args.split} split has nothing to score")
    out = Path(args.out)
    metrics.write_scores(out / "scores_valid.txt", valid)
    score_file = metrics.write_scores(out / f"scores_{args.split}.txt", rows, {"threshold": repr(threshold)})
    report = metrics.evaluate_rows(rows, threshold, worst_pai=args.worst_pai)
    _write_report(out, [report])
    print(f"scores={score_file}")


def _write_report(out, reports):
    table, kv = metrics.format_report(reports)
    print(table, end="")
    print(kv, end="")
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table, encoding="utf-8")
        (out / "metrics.txt").write_text(kv, encoding="utf-8")


def cmd_report(args):
    reports = []
    for path in args.scores:
        rows, meta = metrics.read_scores(path)
        threshold = float(meta["threshold"]) if "threshold" in meta else None
        reports.append(metrics.evaluate_rows(rows, threshold, worst_pai=args.worst_pai))
    _write_report(args.out, reports)


def cmd_gradcheck(args):
    mods = _model_modalities(args)
    model = pipeline.build_model(args.variant, args.preset, mods, args.seed)
    rng = np.random.default_rng(pipeline.derive_seed(args.seed, "gradcheck"))
    size = pipeline.input_size(model)
    shape = (args.batch, 3, size, size)
    inputs = pipeline.as_inputs({m: (rng.random(shape), rng.random(shape)) for m in model.modalities})
    label = (np.arange(args.batch) % 2).reshape(-1, 1).astype(float)
    res = check_model(model, inputs, label, n_params=args.params, seed=args.seed)
    print(f"checked={res.checked} skipped_kinks={res.skipped_kinks} max_rel_error={res.max_rel_error:.3e}")
    if not res.passed():
        raise CLIError(f"gradient check failed at {res.worst[0]}{list(res.worst[1])}", EXIT_NUMERIC)


COMMANDS = {
    "synth": cmd_synth,
    "pool": cmd_pool,
    "split": cmd_split,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        COMMANDS[args.command](args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except pipeline.NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except pipeline.IncompatibleCheckpoint as exc:
        print(f"error: incompatible checkpoint: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (
        dataset.CatalogError,
        protocols.ProtocolError,
        LoaderError,
        metrics.MetricsError,
        FileNotFoundError,
        KeyError,
        ValueError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    return 0


if __name__ == "__main__":
    sys.exit(main())
