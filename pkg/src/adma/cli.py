"""Command-line entry point: ``adma <command> [--config FILE] [--key value ...]``.

Commands
    pretrain          train a source model, write ``source.ckpt``
    adapt             one online adaptation run with ``method``; ``report.csv``, ``losses.csv``
    ablate            all method kinds on identical streams; ``ablation.csv``, ``targets.csv``
    sweep-mask-ratio  adma-dam-hog for every value in ``ratios``; ``sweep.csv``
    divergence        adjacent-domain JS for source-only and ``method``; ``divergence.csv``
    hog-dump          HOG field of ``image`` (or a generated shape) as ``hog.csv``
    gen-data          ``count`` source images plus the stream manifest

Every configuration key is also a flag with the same name, e.g. ``--mask_ratio 30``.
Outputs go to ``out_dir`` together with a ``config.txt`` snapshot that reproduces them.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import harness as H
from . import rng
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig, known_keys, parse_config
from .domains import gen_source, read_image, render, write_image
from .hog import hog_extract, write_hog_csv
from .vit import VisionTransformer

COMMANDS = ("pretrain", "adapt", "ablate", "sweep-mask-ratio", "divergence", "hog-dump", "gen-data")


class CliError(RuntimeError):
    pass


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adma", description="Masked-autoencoding continual test-time adaptation toolkit.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    for key in known_keys():
        p.add_argument(f"--{key}", dest=f"cfg_{key}", metavar="VALUE")
    return p


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    except OSError as e:
        raise CliError(f"cannot write to output directory {out}: {e.strerror or e}") from None
    return out


def _source_model(cfg: RunConfig, seed: int) -> VisionTransformer:
    if cfg.checkpoint:
        path = Path(cfg.checkpoint)
        if not path.is_file():
            raise CliError(f"checkpoint not found: {path}")
        try:
            return VisionTransformer.load(path)
        except (CheckpointError, ValueError) as e:
            raise CliError(f"cannot load checkpoint {path}: {e}") from None
    model, res = H.pretrained_model(cfg, seed)
    print(f"pretrained seed {seed}: clean holdout accuracy {res.accuracy:.4f}")
    return model


def _table(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    cells = [list(map(str, header))] + [[f"{v:.4f}" if isinstance(v, float) else str(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells)


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    model, res = H.pretrained_model(cfg, cfg.seed)
    model.save(out / "source.ckpt")
    with (out / "pretrain.csv").open("w") as fh:
        fh.write("step,loss\n")
        for i, loss in enumerate(res.losses):
            fh.write(f"{i},{loss!r}\n")
    print(_table(["seed", "holdout-accuracy", "final-loss"], [(cfg.seed, res.accuracy, res.losses[-1] if res.losses else float("nan"))]))
    print(f"wrote {out / 'source.ckpt'}")


def cmd_adapt(cfg: RunConfig, out: Path) -> None:
    model = _source_model(cfg, cfg.seed)
    stream = H.make_stream(cfg, cfg.seed)
    stream.write_manifest(out / "manifest.csv")
    method = H.AdaptMethod.from_config(cfg)
    report = H.run_ctta(model, stream, method, cfg.seed, config=cfg.snapshot())
    H.write_report_csv(report, out / "report.csv")
    H.write_loss_csv(report, out / "losses.csv")
    rows = list(zip(report.domains, report.domain_errors)) + [("mean", report.mean_error)]
    print(f"method {report.method}, seed {cfg.seed}")
    print(_table(["domain", "error"], rows))


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    for seed in cfg.seeds:
        H.make_stream(cfg, seed).write_manifest(out / f"manifest-seed{seed}.csv")
    result = H.run_ablation(cfg)
    H.write_ablation_csv(result, out / "ablation.csv")
    H.write_ablation_csv(result, out / "targets.csv", H.target_labels(result))
    print(_table(["method", "mean-error", "gain"], result.summary()))


def cmd_sweep(cfg: RunConfig, out: Path) -> None:
    rows = H.sweep_mask_ratio(cfg)
    H.write_sweep_csv(rows, out / "sweep.csv")
    print(_table(["ratio", "seed", "mean-error"], rows))


def cmd_divergence(cfg: RunConfig, out: Path) -> None:
    kinds = ["source-only"] + ([cfg.method] if cfg.method != "source-only" else [])
    tables = {}
    for seed in cfg.seeds:
        source = _source_model(cfg, seed)
        for kind in kinds:
            method = H.AdaptMethod.from_config(cfg, kind)
            report = H.run_ctta(source.copy(), H.make_stream(cfg, seed), method, seed)
            tables.setdefault(method.label, []).append(H.report_divergence(report))
    H.write_divergence_csv(tables, out / "divergence.csv")
    rows = [(label, sum(t.mean for t in ts) / len(ts)) for label, ts in tables.items()]
    print(_table(["method", "mean-adjacent-js"], rows))


def cmd_hog_dump(cfg: RunConfig, out: Path) -> None:
    if cfg.image:
        path = Path(cfg.image)
        if not path.is_file():
            raise CliError(f"image not found: {path}")
        image = read_image(path)
    else:
        image = render(0, cfg.toy(), rng.stream(cfg.seed, "hog-dump"))
    rows = write_hog_csv(hog_extract(image), out / "hog.csv")
    print(f"wrote {rows} cell rows to {out / 'hog.csv'}")


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    images, labels = gen_source(cfg.toy(), cfg.count, rng.derive_seed(cfg.seed, "gen-data"))
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    with (out / "labels.csv").open("w") as fh:
        fh.write("file,label\n")
        for i, (im, lab) in enumerate(zip(images, labels)):
            name = f"source-{i:05d}.img"
            write_image(img_dir / name, im)
            fh.write(f"{name},{int(lab)}\n")
    stream = H.make_stream(cfg, cfg.seed)
    stream.write_manifest(out / "manifest.csv")
    print(f"wrote {len(images)} source images and a {len(stream)}-sample stream manifest to {out}")


HANDLERS = {
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "ablate": cmd_ablate,
    "sweep-mask-ratio": cmd_sweep,
    "divergence": cmd_divergence,
    "hog-dump": cmd_hog_dump,
    "gen-data": cmd_gen_data,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    try:
        if args.config and not Path(args.config).is_file():
            raise CliError(f"config file not found: {args.config}")
        cfg = parse_config(args.config, overrides)
        out = _out_dir(cfg)
        HANDLERS[args.command](cfg, out)
    except (CliError, ConfigError) as e:
        print(f"adma {args.command}: error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"adma {args.command}: error: {e.filename or ''}: {e.strerror or e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
