import csv

import pytest

from adma.cli import main
from adma.config import ConfigError, RunConfig, known_keys, parse_config

from conftest import TINY


def flags(d):
    out = []
    for k, v in d.items():
        out += [f"--{k}", str(v)]
    return out


def test_empty_config_gives_defaults(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("# nothing here\n\n")
    cfg = parse_config(str(p))
    assert cfg == RunConfig()
    assert cfg.lam == 0.5
    assert cfg.mask_ratio == 50.0
    assert cfg.mc_passes == 10


def test_file_then_overrides(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("lambda = 0.25\nmask_ratio = 30 # comment\nseeds = 3,4\n")
    cfg = parse_config(str(p), {"mask_ratio": "40"})
    assert cfg.lam == 0.25 and cfg.mask_ratio == 40.0 and cfg.seeds == [3, 4]


def test_roundtrip_through_text():
    cfg = parse_config(overrides={"corruptions": "fog,pixelate", "stop_gradient": "false", "lr": "3e-5"})
    assert parse_config(text=cfg.to_text()) == cfg


@pytest.mark.parametrize(
    "text, key",
    [
        ("mask_ratio = 130", "mask_ratio"),
        ("lambda = -1", "lambda"),
        ("method = tent", "method"),
        ("colour = blue", "colour"),
        ("mc_passes = 1", "mc_passes"),
        ("corruptions = snow", "corruptions"),
        ("patch_size = 12", "patch_size"),
    ],
)
def test_invalid_values_name_the_key(text, key):
    with pytest.raises(ConfigError, match=key):
        parse_config(text=text)


def test_mask_ratio_message_mentions_range():
    with pytest.raises(ConfigError, match=r"\[0,100\]"):
        parse_config(text="mask_ratio = 130")


def test_every_key_is_a_flag():
    keys = known_keys()
    assert "lambda" in keys and "mask_ratio" in keys and "out_dir" in keys


def test_cli_hog_dump(tmp_path, capsys):
    assert main(["hog-dump", "--out_dir", str(tmp_path)]) == 0
    rows = (tmp_path / "hog.csv").read_text().splitlines()
    assert len(rows) == 49
    assert (tmp_path / "config.txt").exists()


def test_cli_gen_data_and_hog_dump_of_file(tmp_path):
    assert main(["gen-data", "--out_dir", str(tmp_path), "--count", "4", *flags({"corruptions": "fog", "per_domain_count": "2"})]) == 0
    assert len((tmp_path / "labels.csv").read_text().splitlines()) == 5
    img = tmp_path / "images" / "source-00000.img"
    assert main(["hog-dump", "--out_dir", str(tmp_path / "h"), "--image", str(img)]) == 0


def test_cli_adapt_source_only(tmp_path, capsys):
    rc = main(["adapt", "--out_dir", str(tmp_path), "--method", "source-only", *flags(TINY)])
    assert rc == 0
    with (tmp_path / "report.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert [r["domain"] for r in rows] == ["r0/fog@5", "r0/contrast@5", "mean"]
    assert len((tmp_path / "losses.csv").read_text().splitlines()) == 7
    assert "mean" in capsys.readouterr().out


def test_cli_pretrain_then_adapt_from_checkpoint(tmp_path):
    assert main(["pretrain", "--out_dir", str(tmp_path / "p"), *flags(TINY)]) == 0
    ckpt = tmp_path / "p" / "source.ckpt"
    assert ckpt.is_file()
    rc = main(["adapt", "--out_dir", str(tmp_path / "a"), "--checkpoint", str(ckpt), *flags(TINY)])
    assert rc == 0


def test_cli_ablate_writes_all_methods(tmp_path):
    assert main(["ablate", "--out_dir", str(tmp_path), *flags(TINY)]) == 0
    with (tmp_path / "ablation.csv").open() as fh:
        methods = {r["method"] for r in csv.DictReader(fh)}
    assert len(methods) == 6
    with (tmp_path / "targets.csv").open() as fh:
        targets = {r["method"] for r in csv.DictReader(fh)}
    assert targets == {"adma-dam-hog", "adma-dam-rgb", "adma-dam-sobel"}
    assert (tmp_path / "manifest-seed0.csv").is_file()


def test_cli_sweep_and_divergence(tmp_path):
    assert main(["sweep-mask-ratio", "--out_dir", str(tmp_path), "--ratios", "30,80", *flags(TINY)]) == 0
    assert len((tmp_path / "sweep.csv").read_text().splitlines()) == 3
    assert main(["divergence", "--out_dir", str(tmp_path), *flags(TINY)]) == 0
    rows = (tmp_path / "divergence.csv").read_text().splitlines()
    assert rows[0] == "method,pair,js"
    assert len(rows) == 1 + 2 * 2


def test_cli_missing_checkpoint(tmp_path, capsys):
    missing = tmp_path / "nope.ckpt"
    rc = main(["adapt", "--out_dir", str(tmp_path), "--checkpoint", str(missing)])
    assert rc != 0
    assert str(missing) in capsys.readouterr().err


def test_cli_unwritable_output(tmp_path, capsys):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    rc = main(["hog-dump", "--out_dir", str(blocker / "sub")])
    assert rc != 0
    assert str(blocker / "sub") in capsys.readouterr().err


def test_cli_rejects_bad_values(tmp_path, capsys):
    assert main(["adapt", "--out_dir", str(tmp_path), "--mask_ratio", "130"]) == 2
    assert "[0,100]" in capsys.readouterr().err
    assert main(["adapt", "--config", str(tmp_path / "missing.txt")]) == 2
    with pytest.raises(SystemExit):
        main(["adapt", "--no_such_flag", "1"])
