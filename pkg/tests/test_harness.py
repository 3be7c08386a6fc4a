import numpy as np
import pytest

from adma import rng
from adma.domains import StreamExhausted, ToySpec, build_stream, default_order, gen_source
from adma.harness import (
    AdaptMethod,
    adapt_step,
    make_stream,
    pretrain,
    pretrained_model,
    run_ablation,
    run_ctta,
    sweep_mask_ratio,
    write_ablation_csv,
)
from adma.objective import DELTA
from adma.optim import Adam
from adma.vit import VisionTransformer, VitConfig, predict

SMALL = VitConfig(embed_dim=16, depth=1, heads=2, ffn_multiplier=2)


def small_model(seed=0):
    return VisionTransformer(SMALL, seed=seed)


def image(seed=0):
    return gen_source(ToySpec(), 4, seed)[0][seed % 4]


def params_of(model):
    return {k: p.data.copy() for k, p in model.params.items()}


def test_method_validation():
    with pytest.raises(ValueError):
        AdaptMethod("tent")
    with pytest.raises(ValueError):
        AdaptMethod("adma-dam-hog", mask_ratio=120)
    with pytest.raises(ValueError):
        AdaptMethod("adma-dam-hog", lam=-0.1)
    assert AdaptMethod("entropy-ln").update_scope == "layernorm-only"
    assert AdaptMethod("consistency-dam").strategy == "dam"
    assert AdaptMethod("adma-random-hog").strategy == "random"
    assert AdaptMethod("adma-dam-hog", target="rgb").label == "adma-dam-rgb"


def test_source_only_leaves_model_untouched():
    m = small_model()
    before = params_of(m)
    stream = build_stream(ToySpec(), default_order(5, ["fog"]), 4, seed=0)
    run_ctta(m, stream, AdaptMethod("source-only"), seed=0)
    assert all(np.array_equal(before[k], m.params[k].data) for k in before)


def test_zero_mask_ratio_step_losses():
    m = small_model()
    x = image()
    method = AdaptMethod("adma-dam-hog", mask_ratio=0.0, passes=3, lr=1e-3)
    with pytest.warns(Warning):
        res = adapt_step(m.copy(), x, method, Adam(m.copy().parameters(), 1e-3), seed=0)
    y = np.exp(res.logits - res.logits.max())
    y /= y.sum()
    assert res.losses.l_con == pytest.approx(-np.sum(y * np.log(y + DELTA)) / len(y), abs=1e-12)
    assert res.losses.l_rec == 0.0
    assert res.losses.rec_empty


def test_step_updates_parameters_in_scope():
    for kind in ("adma-dam-hog", "entropy-ln"):
        m = small_model()
        m.reset_decoder(27, 0)
        before = params_of(m)
        method = AdaptMethod(kind, passes=3, lr=1e-3)
        scope = m.layernorm_parameters() if kind == "entropy-ln" else m.parameters()
        adapt_step(m, image(), method, Adam(scope, 1e-3), seed=0)
        changed = {k for k in before if not np.array_equal(before[k], m.params[k].data)}
        assert changed
        if kind == "entropy-ln":
            ln = {k for k, p in m.params.items() if any(p is q for q in m.layernorm_parameters())}
            assert changed <= ln


def test_run_is_deterministic():
    def go():
        stream = build_stream(ToySpec(), default_order(5, ["fog", "contrast"]), 3, seed=1)
        rep = run_ctta(small_model(), stream, AdaptMethod("adma-dam-hog", passes=3, lr=1e-3), seed=1)
        return rep.predictions, [(l.l_con, l.l_rec) for l in rep.losses], rep.domain_errors

    assert go() == go()


def test_report_shape_and_invariants():
    stream = build_stream(ToySpec(), default_order(5, ["fog", "contrast"]), 3, seed=1)
    rep = run_ctta(small_model(), stream, AdaptMethod("consistency-random", lr=1e-3), seed=2)
    assert rep.domains == ["r0/fog@5", "r0/contrast@5"]
    assert len(rep.predictions) == 6 and len(rep.losses) == 6
    assert all(0 <= e <= 1 for e in rep.domain_errors)
    assert rep.mean_error == pytest.approx(np.mean(rep.domain_errors))
    assert [len(f) for f in rep.features] == [3, 3]
    mistakes = [p != l for p, l in zip(rep.predictions, rep.labels)]
    assert rep.domain_errors == [sum(mistakes[:3]) / 3, sum(mistakes[3:]) / 3]


def test_prediction_is_recorded_before_update():
    m = small_model()
    stream = build_stream(ToySpec(), default_order(5, ["fog"]), 5, seed=3)
    items = list(build_stream(ToySpec(), default_order(5, ["fog"]), 5, seed=3))
    expected = []

    def snap(t, model):
        expected.append(int(predict(model, items[t].image[None])[0]))

    rep = run_ctta(m, stream, AdaptMethod("adma-dam-hog", passes=3, lr=1e-2), seed=0, before_step=snap)
    assert rep.predictions == expected


def test_consumed_stream_is_rejected():
    stream = build_stream(ToySpec(), default_order(5, ["fog"]), 2, seed=0)
    next(iter(stream))
    with pytest.raises(StreamExhausted):
        run_ctta(small_model(), stream, AdaptMethod("source-only"), seed=0)


def test_perfect_model_on_clean_stream_has_zero_error():
    stream = build_stream(ToySpec(), default_order(0, ["fog"]), 6, seed=0)
    labels = [r.label for r in stream.manifest]
    m = small_model()
    seen = iter(labels)

    def rig(t, model):
        lab = next(seen)
        model.params["head.w"].data[:] = 0.0
        b = np.zeros(4)
        b[lab] = 1.0
        model.params["head.b"].data[:] = b

    rep = run_ctta(m, stream, AdaptMethod("source-only"), seed=0, before_step=rig)
    assert rep.domain_errors == [0.0]


def test_pretrain_without_epochs_is_near_chance():
    x, y = gen_source(ToySpec(), 200, 0)
    res = pretrain(small_model(), x, y, 0, 1e-3, 0, holdout=(x, y))
    assert res.losses == []
    assert 0.1 <= res.accuracy <= 0.5


def test_pretrain_is_reproducible(tiny_cfg):
    a, ra = pretrained_model(tiny_cfg, 0)
    b, rb = pretrained_model(tiny_cfg, 0)
    assert ra.accuracy == rb.accuracy
    assert all(np.array_equal(a.params[k].data, b.params[k].data) for k in a.params)
    with pytest.raises(ValueError):
        pretrain(small_model(), *gen_source(ToySpec(), 8, 0), 1, 1e-3, 0, mask_ratio=150)


def test_ablation_and_sweep_on_tiny_config(tiny_cfg, tmp_path):
    res = run_ablation(tiny_cfg, targets=("hog", "rgb"))
    assert res.labels == [
        "source-only",
        "entropy-ln",
        "consistency-random",
        "consistency-dam",
        "adma-random-hog",
        "adma-dam-hog",
        "adma-dam-rgb",
    ]
    assert res.gain("source-only") == 0.0
    # every method saw the same stream
    labels = {tuple(r.labels) for r in res.reports.values()}
    assert len(labels) == 1
    write_ablation_csv(res, tmp_path / "a.csv")
    assert len((tmp_path / "a.csv").read_text().splitlines()) >= 7
    rows = sweep_mask_ratio(tiny_cfg, ratios=[30, 80])
    assert [(r[0], r[1]) for r in rows] == [(30.0, 0), (80.0, 0)]
    with pytest.raises(ValueError):
        sweep_mask_ratio(tiny_cfg, ratios=[130])


def test_make_stream_follows_config(tiny_cfg):
    s = make_stream(tiny_cfg, 0)
    assert len(s) == 6
    assert s.domains == ["r0/fog@5", "r0/contrast@5"]
    assert rng.derive_seed(0, "stream") != rng.derive_seed(1, "stream")


@pytest.mark.parametrize("over", [{}, {"source_count": 400, "pretrain_epochs": 30}])
def test_pretraining_accuracy_floor(over):
    from adma.config import RunConfig

    _, res = pretrained_model(RunConfig().replace(**over), 0)
    assert res.accuracy >= 0.95
