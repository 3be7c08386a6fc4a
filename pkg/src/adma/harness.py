"""Source pretraining, the online adaptation loop and the experiment grids."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import rng
from . import tensor as T
from .config import METHOD_KINDS, RunConfig
from .dam import mask_count, select_mask, token_uncertainty
from .divergence import DivergenceTable, divergence_table
from .domains import DomainStream, StreamExhausted, build_stream, gen_source
from .hog import token_targets, target_dim
from .objective import (
    EmptyMaskWarning,
    LossBreakdown,
    consistency_loss,
    cross_entropy,
    entropy_loss,
    reconstruction_loss,
    total_loss,
)
from .optim import Adam
from .tensor import NonFiniteError
from .vit import VisionTransformer, predict

log = logging.getLogger(__name__)


class PretrainDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class AdaptMethod:
    kind: str
    mask_ratio: float = 50.0
    lam: float = 0.5
    target: str = "hog"
    lr: float = 5e-7
    update_scope: str = "all-params"
    passes: int = 10
    stop_gradient: bool = True

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind == "entropy-ln":
            object.__setattr__(self, "update_scope", "layernorm-only")
        if self.update_scope not in ("all-params", "layernorm-only"):
            raise ValueError(f"unknown update scope {self.update_scope!r}")
        if not 0.0 <= self.mask_ratio <= 100.0:
            raise ValueError("mask_ratio must lie in [0, 100]")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")

    @property
    def strategy(self) -> Optional[str]:
        if "-dam" in self.kind:
            return "dam"
        if "-random" in self.kind:
            return "random"
        return None

    @property
    def reconstructs(self) -> bool:
        return self.kind.startswith("adma-")

    @property
    def label(self) -> str:
        if self.reconstructs and self.target != "hog":
            return self.kind.replace("-hog", f"-{self.target}")
        return self.kind

    @classmethod
    def from_config(cls, cfg: RunConfig, kind: Optional[str] = None, **over) -> "AdaptMethod":
        kw = dict(
            kind=kind or cfg.method,
            mask_ratio=cfg.mask_ratio,
            lam=cfg.lam,
            target=cfg.target,
            lr=cfg.lr,
            update_scope=cfg.update_scope or "all-params",
            passes=cfg.mc_passes,
            stop_gradient=cfg.stop_gradient,
        )
        kw.update(over)
        return cls(**kw)


@dataclass
class StepResult:
    prediction: int
    logits: np.ndarray
    losses: LossBreakdown
    pooled_feature: float
    masked: np.ndarray


@dataclass
class AdaptationReport:
    method: str
    seed: int
    domains: list
    domain_errors: list
    predictions: list
    labels: list
    losses: list
    features: list  # per domain, pooled final-layer feature per sample
    wall_clock: float = 0.0
    config: dict = field(default_factory=dict)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.domain_errors))


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class PretrainResult:
    accuracy: float
    losses: list


def accuracy(model: VisionTransformer, images: np.ndarray, labels: np.ndarray, batch: int = 100) -> float:
    preds = np.concatenate([predict(model, images[i:i + batch]) for i in range(0, len(images), batch)])
    return float(np.mean(preds == labels))


def pretrain(
    model: VisionTransformer,
    images: np.ndarray,
    labels: np.ndarray,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 32,
    holdout: Optional[tuple] = None,
    mask_ratio: float = 0.0,
) -> PretrainResult:
    """Supervised cross-entropy training with Adam under a cosine learning-rate decay.

    Block-1 dropout stays active during training.  With ``mask_ratio > 0`` every
    image gets a random share of its tokens, drawn uniformly from
    ``[0, mask_ratio]`` percent, swapped for the mask token.  The mask token itself
    is frozen at its zero initialisation so adaptation starts from zeros.

    Returns the accuracy on ``holdout`` (or on the training set if absent).
    """
    if not 0.0 <= mask_ratio <= 100.0:
        raise ValueError(f"mask_ratio {mask_ratio} outside [0, 100]")
    n = model.cfg.num_tokens
    params = [t for k, t in model.params.items() if k != "mask_token" or mask_ratio == 0.0]
    opt = Adam(params, lr)
    losses = []
    step = 0
    total = epochs * -(-len(images) // batch_size)
    for epoch in range(epochs):
        order = rng.stream(seed, "pretrain-order", epoch).permutation(len(images))
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            opt.lr = 0.5 * lr * (1.0 + math.cos(math.pi * step / total))
            try:
                with T.Graph() as g:
                    dseed = rng.derive_seed(seed, "pretrain-dropout", step)
                    if mask_ratio > 0.0:
                        g_mask = rng.stream(seed, "pretrain-mask", step)
                        plans = [g_mask.permutation(n)[: int(g_mask.integers(0, mask_count(n, mask_ratio) + 1))] for _ in idx]
                        tokens = model.apply_mask(model.embed(images[idx]), plans)
                        out = model.forward(tokens, dropout=True, seed=dseed)
                    else:
                        out = model(images[idx], dropout=True, seed=dseed)
                    loss = cross_entropy(out.logits, labels[idx])
                    g.backward(loss, opt.params)
                opt.step()
            except NonFiniteError as e:
                raise PretrainDiverged(f"pretraining diverged at step {step} (epoch {epoch}): {e}") from e
            losses.append(loss.item())
            step += 1
    evaluation = holdout if holdout is not None else (images, labels)
    return PretrainResult(accuracy(model, *evaluation), losses)


def pretrained_model(cfg: RunConfig, seed: int) -> tuple:
    """Build and pretrain a model for ``seed``; returns (model, PretrainResult)."""
    toy = cfg.toy()
    model = VisionTransformer(cfg.vit(), seed=rng.derive_seed(seed, "model"))
    x, y = gen_source(toy, cfg.source_count, rng.derive_seed(seed, "source"))
    hx, hy = gen_source(toy, cfg.holdout_count, rng.derive_seed(seed, "holdout"))
    res = pretrain(model, x, y, cfg.pretrain_epochs, cfg.pretrain_lr, seed, cfg.batch_size, (hx, hy), cfg.pretrain_mask_ratio)
    return model, res


# ---------------------------------------------------------------------------
# online adaptation


def _scope(model: VisionTransformer, method: AdaptMethod) -> list:
    if method.kind == "source-only":
        return []
    if method.update_scope == "layernorm-only":
        return model.layernorm_parameters()
    return model.parameters()


def _pooled(out) -> float:
    return float(out.token_features.data[0].mean())


def adapt_step(
    model: VisionTransformer,
    image: np.ndarray,
    method: AdaptMethod,
    optimizer: Optional[Adam],
    seed: int,
) -> StepResult:
    """One online step: predict with current weights, then (maybe) update once."""
    x = np.asarray(image, dtype=np.float64)[None]
    n = model.cfg.num_tokens
    no_mask = np.zeros(0, dtype=np.int64)

    if method.kind == "source-only":
        with T.inference():
            out = model(x)
        logits = out.logits.data[0].copy()
        return StepResult(int(np.argmax(logits)), logits, LossBreakdown(0.0, 0.0, 0.0, method.lam), _pooled(out), no_mask)

    if method.kind == "entropy-ln":
        with T.Graph() as g:
            out = model(x)
            logits = out.logits.data[0].copy()
            loss = entropy_loss(T.softmax(out.logits))
            g.backward(loss, optimizer.params)
        optimizer.step()
        ent = loss.item()
        return StepResult(
            int(np.argmax(logits)), logits, LossBreakdown(0.0, 0.0, ent, method.lam, l_ent=ent), _pooled(out), no_mask
        )

    with T.inference():
        tokens0 = model.embed(x)
        out0 = model.forward(tokens0)
    logits = out0.logits.data[0].copy()
    pooled = _pooled(out0)

    if method.strategy == "dam":
        scores = token_uncertainty(model, tokens0, method.passes, rng.derive_seed(seed, "dam"))[0]
        plan = select_mask(scores, method.mask_ratio, "dam")
    else:
        plan = select_mask(np.zeros(n), method.mask_ratio, "random", rng.derive_seed(seed, "random-mask"))

    rec_empty = False
    with T.Graph() as g:
        if method.stop_gradient:
            with T.inference():
                y = T.softmax(out0.logits)
        else:
            y = T.softmax(model(x).logits)
        masked = model.apply_mask(model.embed(x), plan)
        out = model.forward(masked)
        l_con = consistency_loss(y, T.softmax(out.logits), method.stop_gradient)
        if method.reconstructs and len(plan):
            targets = token_targets(image, method.target, model.cfg.patch_size)[plan.selected]
            pred = model.decode(model.masked_features(out, [plan]))
            l_rec = reconstruction_loss(pred, targets)
        else:
            rec_empty = method.reconstructs
            l_rec = T.Tensor(0.0)
        total = total_loss(l_con, l_rec, method.lam)
        g.backward(total, optimizer.params)
    optimizer.step()
    if rec_empty:
        warnings.warn("mask ratio selects no tokens; reconstruction skipped", EmptyMaskWarning, stacklevel=2)
    losses = LossBreakdown(l_con.item(), l_rec.item(), total.item(), method.lam, rec_empty)
    return StepResult(int(np.argmax(logits)), logits, losses, pooled, plan.selected)


def run_ctta(
    model: VisionTransformer,
    stream: DomainStream,
    method: AdaptMethod,
    seed: int,
    before_step: Optional[Callable[[int, VisionTransformer], None]] = None,
    config: Optional[dict] = None,
) -> AdaptationReport:
    """Consume ``stream`` once, adapting ``model`` in place with a fresh optimizer."""
    if stream.remaining != len(stream):
        raise StreamExhausted("run_ctta needs an unconsumed stream")
    if method.reconstructs:
        model.reset_decoder(target_dim(method.target, model.cfg.patch_size), rng.derive_seed(seed, "decoder"))
    params = _scope(model, method)
    optimizer = Adam(params, method.lr) if params else None
    nd = len(stream.domains)
    mistakes = np.zeros(nd)
    sizes = np.zeros(nd)
    features = [[] for _ in range(nd)]
    preds, labels, losses = [], [], []
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EmptyMaskWarning)
        for t, item in enumerate(stream):
            if before_step is not None:
                before_step(t, model)
            res = adapt_step(model, item.image, method, optimizer, rng.derive_seed(seed, "step", t))
            preds.append(res.prediction)
            labels.append(item.label)
            losses.append(res.losses)
            features[item.domain].append(res.pooled_feature)
            mistakes[item.domain] += res.prediction != item.label
            sizes[item.domain] += 1
    if len(preds) != len(stream) or (sizes == 0).any():
        raise StreamExhausted(f"stream ended after {len(preds)} of {len(stream)} samples")
    return AdaptationReport(
        method=method.label,
        seed=seed,
        domains=list(stream.domains),
        domain_errors=(mistakes / sizes).tolist(),
        predictions=preds,
        labels=labels,
        losses=losses,
        features=[np.asarray(f) for f in features],
        wall_clock=time.perf_counter() - t0,
        config=dict(config or {}),
    )


def make_stream(cfg: RunConfig, seed: int) -> DomainStream:
    return build_stream(cfg.toy(), cfg.order(), cfg.per_domain_count, cfg.rounds, rng.derive_seed(seed, "stream"))


def report_divergence(report: AdaptationReport) -> DivergenceTable:
    return divergence_table(report.domains, report.features)


# ---------------------------------------------------------------------------
# experiment grids


ABLATION_KINDS = METHOD_KINDS
TARGET_VARIANTS = ("hog", "rgb", "sobel")


@dataclass
class AblationResult:
    seeds: list
    reports: dict  # (label, seed) -> AdaptationReport
    pretrain_accuracy: dict  # seed -> clean holdout accuracy

    def mean_error(self, label: str, seed: Optional[int] = None) -> float:
        seeds = self.seeds if seed is None else [seed]
        return float(np.mean([self.reports[(label, s)].mean_error for s in seeds]))

    def gain(self, label: str, seed: Optional[int] = None) -> float:
        return self.mean_error("source-only", seed) - self.mean_error(label, seed)

    @property
    def labels(self) -> list:
        seen = []
        for label, _ in self.reports:
            if label not in seen:
                seen.append(label)
        return seen

    def summary(self) -> list:
        return [(label, self.mean_error(label), self.gain(label)) for label in self.labels]


def _model_for_seed(cfg: RunConfig, seed: int) -> tuple:
    if cfg.checkpoint:
        model = VisionTransformer.load(cfg.checkpoint)
        return model, float("nan")
    model, res = pretrained_model(cfg, seed)
    log.info("seed %d: source holdout accuracy %.3f", seed, res.accuracy)
    return model, res.accuracy


def run_ablation(cfg: RunConfig, seeds: Optional[Sequence[int]] = None, targets: Sequence[str] = TARGET_VARIANTS) -> AblationResult:
    """All six method kinds (plus reconstruction-target variants) on identical streams."""
    seeds = list(cfg.seeds if seeds is None else seeds)
    if not seeds:
        raise ValueError("run_ablation needs at least one seed")
    reports, accs = {}, {}
    for seed in seeds:
        source, accs[seed] = _model_for_seed(cfg, seed)
        methods = [AdaptMethod.from_config(cfg, kind, target="hog") for kind in ABLATION_KINDS]
        methods += [AdaptMethod.from_config(cfg, "adma-dam-hog", target=t) for t in targets if t != "hog"]
        for method in methods:
            report = run_ctta(source.copy(), make_stream(cfg, seed), method, seed, config=cfg.snapshot())
            reports[(method.label, seed)] = report
            log.info("seed %d %-20s mean error %.4f", seed, method.label, report.mean_error)
    return AblationResult(seeds, reports, accs)


def sweep_mask_ratio(cfg: RunConfig, ratios: Optional[Sequence[float]] = None, seeds: Optional[Sequence[int]] = None) -> list:
    """adma-dam-hog at each mask ratio; rows of (ratio, seed, mean error)."""
    ratios = list(cfg.ratios if ratios is None else ratios)
    seeds = list(cfg.seeds if seeds is None else seeds)
    for r in ratios:
        if not 0.0 <= r <= 100.0:
            raise ValueError(f"mask ratio {r} outside [0, 100]")
    rows = []
    for seed in seeds:
        source, _ = _model_for_seed(cfg, seed)
        for r in ratios:
            method = AdaptMethod.from_config(cfg, "adma-dam-hog", target="hog", mask_ratio=r)
            report = run_ctta(source.copy(), make_stream(cfg, seed), method, seed)
            rows.append((float(r), seed, report.mean_error))
    return rows


# ---------------------------------------------------------------------------
# CSV emission


def _f(x: float) -> str:
    return repr(float(x))


def write_ablation_csv(result: AblationResult, path, labels: Optional[Sequence[str]] = None) -> None:
    labels = list(labels or [lab for lab in result.labels if lab in ABLATION_KINDS])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "domain", "error", "mean", "gain"])
        for seed in result.seeds:
            for label in labels:
                rep = result.reports[(label, seed)]
                gain = result.gain(label, seed)
                for dom, err in zip(rep.domains, rep.domain_errors):
                    w.writerow([label, seed, dom, _f(err), _f(rep.mean_error), _f(gain)])


def target_labels(result: AblationResult) -> list:
    return [lab for lab in result.labels if lab.startswith("adma-dam-")]


def write_sweep_csv(rows, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["ratio", "seed", "mean-error"])
        for r, seed, err in rows:
            w.writerow([_f(r), seed, _f(err)])


def write_divergence_csv(tables: dict, path) -> None:
    """``tables`` maps method label to a list of per-seed DivergenceTables; JS is seed-averaged."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "pair", "js"])
        for label, per_seed in tables.items():
            for i, (a, b) in enumerate(per_seed[0].pairs):
                w.writerow([label, f"{a}->{b}", _f(np.mean([t.values[i] for t in per_seed]))])
            w.writerow([label, "mean", _f(np.mean([t.mean for t in per_seed]))])


def write_report_csv(report: AdaptationReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "seed", "domain", "error"])
        for dom, err in zip(report.domains, report.domain_errors):
            w.writerow([report.method, report.seed, dom, _f(err)])
        w.writerow([report.method, report.seed, "mean", _f(report.mean_error)])


def write_loss_csv(report: AdaptationReport, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "prediction", "label", "l_con", "l_rec", "l_ent", "l_total"])
        for t, (p, y, lb) in enumerate(zip(report.predictions, report.labels, report.losses)):
            w.writerow([t, p, y, _f(lb.l_con), _f(lb.l_rec), _f(lb.l_ent), _f(lb.l_total)])
