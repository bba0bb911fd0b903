import csv
import io
import json

import numpy as np
import pytest

from nucseg.harness import protocols as P
from nucseg.harness.cli import main
from nucseg.harness.config import RunConfig, dump_config, parse_config
from nucseg.harness.data import (
    BUILTIN_STYLES,
    DomainStyle,
    generate_domain,
    generate_domains,
    load_domain,
    save_domain,
)
from nucseg.harness.train import (
    TrainingError,
    evaluate,
    load_checkpoint,
    load_tensors,
    save_checkpoint,
    save_tensors,
    train,
)
from nucseg.metrics import write_reports_csv
from nucseg.model import ConfigError
from nucseg.prompt import centroids_from_instances


def tiny(**kw):
    base = dict(size=32, d=16, heads=2, blocks=1, c_p=16, r=4, epochs=2, n_images=2, lr=3e-3)
    base.update(kw)
    return RunConfig(**base)


def tiny_domains(names=("S1", "S2"), n=2, seed=0):
    return generate_domains(names, n, seed, (32, 32))


# -- data -------------------------------------------------------------------
def test_generate_is_seed_deterministic():
    a, b = generate_domain("S2", 3, 5), generate_domain("S2", 3, 5)
    for sa, sb in zip(a.samples, b.samples):
        assert sa.image.tobytes() == sb.image.tobytes()
        assert sa.labels.tobytes() == sb.labels.tobytes()
        np.testing.assert_array_equal(sa.points.points, sb.points.points)
    assert generate_domain("S2", 1, 6).samples[0].image.tobytes() != a.samples[0].image.tobytes()


def test_fixed_count_style():
    base = BUILTIN_STYLES["S1"]
    style = DomainStyle("fixed", (5, 5), (4.0, 5.0), base.aspect_range, base.fg_mean, base.fg_std, base.bg_mean,
                        base.bg_std, base.noise, base.texture_freq, base.texture_amp)
    for s in generate_domain(style, 6, 0).samples:
        assert s.labels.max() == 5
        assert len(np.unique(s.labels)) == 6


def test_intensity_means_within_three_sigma():
    for name, style in BUILTIN_STYLES.items():
        ds = generate_domain(name, 2, 0)
        assert len(ds) == 2
        for s in ds.samples:
            assert np.all(np.abs(s.intensities - style.fg_mean) <= 3 * style.fg_std)
            assert abs(s.background - style.bg_mean) <= 3 * style.bg_std


def test_points_are_centroids_and_shapes_shared():
    ds = generate_domain("S3", 4, 1)
    shapes = {s.image.shape for s in ds.samples}
    assert len(shapes) == 1
    for s in ds.samples:
        np.testing.assert_array_equal(s.points.points, centroids_from_instances(s.labels).points)
        assert s.domain == "S3" and s.image_id.startswith("S3_")


def test_domain_round_trip(tmp_path):
    ds = generate_domain("S4", 2, 0, (32, 32))
    save_domain(ds, tmp_path)
    back = load_domain(tmp_path, "S4")
    for a, b in zip(ds.samples, back.samples):
        assert a.image_id == b.image_id
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.points.points, b.points.points)


def test_generate_rejects_empty():
    with pytest.raises(ValueError):
        generate_domain("S1", 0, 0)


# -- training ---------------------------------------------------------------
def test_one_epoch_one_image(tmp_path):
    ds = generate_domain("S1", 1, 0, (32, 32))
    ckpt = train(tiny(epochs=1), [ds], log_path=tmp_path / "log.jsonl")
    assert len(ckpt.losses) == 1 and np.isfinite(ckpt.losses[0])
    rec = json.loads((tmp_path / "log.jsonl").read_text())
    assert set(rec) == {"epoch", "loss", "lr"} and rec["epoch"] == 1


def test_loss_non_increasing_on_single_style():
    ckpt = train(RunConfig(epochs=20), [generate_domain("S1", 4, 0)])
    upticks = int((np.diff(ckpt.losses) > 0).sum())
    assert upticks <= 2
    assert ckpt.losses[-1] < ckpt.losses[0]


def test_frozen_hash_unchanged_and_only_trainables_move():
    cfg = tiny(epochs=3)
    ckpt = train(cfg, tiny_domains())
    assert ckpt.frozen_hash_before == ckpt.frozen_hash_after
    fresh = P.build_model(cfg)
    for name, t in ckpt.model.frozen().items():
        assert t.data.tobytes() == fresh.frozen()[name].data.tobytes()
    moved = [n for n, t in ckpt.model.trainable().items() if t.data.tobytes() != fresh.trainable()[n].data.tobytes()]
    assert moved


def test_training_is_deterministic():
    a = train(tiny(epochs=3), tiny_domains())
    b = train(tiny(epochs=3), tiny_domains())
    assert a.losses == b.losses


def test_non_finite_loss_aborts():
    ds = tiny_domains(("S1",))
    cfg = tiny()
    model = P.build_model(cfg)
    model.decoder.mlp[-1][1].data[...] = np.nan
    with pytest.raises(TrainingError, match="batch 0"):
        train(cfg, ds, model=model)


def test_forbidden_domain_rejected():
    with pytest.raises(AssertionError, match="held-out"):
        train(tiny(), tiny_domains(), forbidden_domains={"S2"})


# -- evaluation -------------------------------------------------------------
def test_oracle_evaluation_is_perfect():
    ds = generate_domain("S2", 3, 0, (32, 32))
    for r in evaluate(tiny(), None, ds, oracle=True):
        assert (r.dice, r.miou, r.f1, r.aji, r.dq, r.sq, r.pq, r.hd) == (100, 100, 100, 100, 100, 100, 100, 0)
    # relabelling the GT foreground keeps the semantic scores; crowded nuclei that touch get merged
    for r in evaluate(tiny(oracle_cc=True), None, ds, oracle=True):
        assert (r.dice, r.miou, r.f1, r.hd) == (100, 100, 100, 0)


def _csv(reports):
    buf = io.StringIO()
    write_reports_csv(buf, reports)
    return buf.getvalue()


def test_untrained_checkpoint_gives_well_formed_csv():
    cfg = tiny()
    model = P.build_model(cfg)
    ds = generate_domain("S3", 2, 0, (32, 32))
    text = _csv(evaluate(cfg, model, ds))
    assert text == _csv(evaluate(cfg, model, ds))
    rows = list(csv.DictReader(io.StringIO(text)))
    assert len(rows) == 2
    for row in rows:
        assert 0.0 <= float(row["dice"]) <= 100.0
        assert row["domain"] == "S3"


def test_dimension_mismatch_is_config_error():
    model = P.build_model(tiny())
    with pytest.raises(ConfigError):
        evaluate(tiny(), model, generate_domain("S1", 1, 0, (64, 64)))


# -- checkpoints and config -------------------------------------------------
def test_checkpoint_round_trip(tmp_path):
    cfg = tiny()
    ckpt = train(cfg, tiny_domains())
    save_checkpoint(tmp_path / "m.nsck", ckpt.model)
    assert (tmp_path / "m.nsck").read_bytes()[:4] == b"NSCK"
    back = load_checkpoint(tmp_path / "m.nsck", cfg)
    for name, t in ckpt.model.state().items():
        assert t.data.tobytes() == back.state()[name].data.tobytes()
    ds = generate_domain("S3", 1, 0, (32, 32))
    assert _csv(evaluate(cfg, ckpt, ds)) == _csv(evaluate(cfg, back, ds))


def test_checkpoint_rejects_foreign_files(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_tensors(tmp_path / "x")
    save_tensors(tmp_path / "y", {"w": np.zeros((2, 3))})
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "y", tiny())


def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.r, cfg.n_spaces, cfg.alpha, cfg.beta, cfg.lr, cfg.lr_decay, cfg.batch_size) == (
        10, 2, 0.8, 0.2, 1e-4, 0.98, 2)


def test_config_round_trip_and_errors():
    cfg = RunConfig(lr=3e-3, hs_adapter=False, domains="S1,S3")
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config("# comment\nepochs = 7  # trailing\n").epochs == 7
    for bad in ("nonsense", "unknown_key=1", "split=maybe", "protocol=kfold"):
        with pytest.raises(ValueError):
            parse_config(bad)


# -- protocols --------------------------------------------------------------
def test_lodo_two_domains():
    cfg = tiny()
    rows = P.run_lodo(cfg, tiny_domains())
    assert [r["target"] for r in rows] == ["S1", "S2"]
    assert [r["train_domains"] for r in rows] == ["S2", "S1"]
    text = P.table_text(rows, P.LODO_FIELDS)
    assert text.splitlines()[0] == ",".join(P.LODO_FIELDS)
    assert text == P.table_text(P.run_lodo(cfg, tiny_domains()), P.LODO_FIELDS)


def test_lodo_preconditions():
    with pytest.raises(ValueError):
        P.run_lodo(tiny(), tiny_domains(("S1",)))
    with pytest.raises(ValueError):
        P.run_lodo(tiny(), tiny_domains(("S1", "S1")))


def test_check_disjoint_catches_leaks():
    ds = tiny_domains()
    ckpt = train(tiny(epochs=1), ds)
    fresh = generate_domain("S1", 1, 99, (32, 32))
    fresh.samples[0].image_id = "S1_fresh"
    with pytest.raises(AssertionError, match="held-out domain"):
        P.check_disjoint(ckpt, fresh)
    with pytest.raises(AssertionError, match="test images"):
        P.check_disjoint(ckpt, ds[0], held_out_domain=False)
    P.check_disjoint(ckpt, generate_domain("S3", 1, 0, (32, 32)))


def test_split_811():
    s = P.split_811(20, 0)
    assert (len(s.train), len(s.val), len(s.test)) == (16, 2, 2)
    assert set(s.train) | set(s.val) | set(s.test) == set(range(20))
    assert not (set(s.train) & set(s.val) or set(s.train) & set(s.test) or set(s.val) & set(s.test))
    assert P.split_811(20, 0) == s
    assert P.split_811(20, 1) != s
    with pytest.raises(ValueError):
        P.split_811(2, 0)


def test_adaptability_rows():
    cfg = tiny()
    rows = P.run_adaptability(cfg, tiny_domains(n=10))
    assert [(r["domain"], r["n_train"], r["n_val"], r["n_test"]) for r in rows] == [("S1", 8, 1, 1), ("S2", 8, 1, 1)]


def test_ablation_grid_and_baseline_row():
    cfg = tiny(epochs=1)
    domains = tiny_domains(("S1", "S2", "S3"))
    rows = P.run_ablation(cfg, domains)
    assert [(r["hs_adapter"], r["gkp_encoder"], r["tsm_decoder"]) for r in rows] == list(P.ABLATION_GRID)
    assert len({r["params_trainable"] for r in rows}) == 8
    _, mean = P.run_single(cfg.replace(hs_adapter=False, gkp_encoder=False, tsm_decoder=False), domains[:2],
                           domains[2])
    baseline = {"row": 1, "hs_adapter": False, "gkp_encoder": False, "tsm_decoder": False, "target": "S3",
                **{m: getattr(mean, m) for m in P.METRIC_NAMES},
                **{k: rows[0][k] for k in P.PARAM_FIELDS}}
    first = P.table_text(rows[:1], P.ABLATION_FIELDS)
    assert first == P.table_text([baseline], P.ABLATION_FIELDS)


def test_parameter_log_toggles():
    logs = P.parameter_log(RunConfig())
    assert len({r["frozen_hash"] for r in logs}) == 1
    assert len({r["trainable"] for r in logs}) == 8
    by_flags = {r["method"]: r for r in logs}
    # the adapter toggle moves only the adapter group
    off, on = by_flags["M2+M3"], by_flags["M1+M2+M3"]
    assert on["adapter"] > 0 == off["adapter"]
    assert (on["gkp"], on["decoder"], on["frozen"]) == (off["gkp"], off["decoder"], off["frozen"])
    for r in logs:
        assert r["trainable"] == r["adapter"] + r["gkp"] + r["decoder"]


def test_sweep_rows():
    rows = P.run_sweep(tiny(epochs=1), tiny_domains(), [2, 4], [1, 2])
    assert [(r["r"], r["n_spaces"]) for r in rows] == [(2, 1), (2, 2), (4, 1), (4, 2)]


# -- command line -----------------------------------------------------------
TINY_FLAGS = ["--size", "32", "--d", "16", "--heads", "2", "--blocks", "1", "--c-p", "16", "--r", "4",
              "--epochs", "1", "--n-images", "2", "--lr", "3e-3"]


def test_cli_generate_train_eval(tmp_path):
    data, ck = tmp_path / "data", tmp_path / "m.nsck"
    assert main(["generate", "--out", str(data), "--domains", "S1,S2", *TINY_FLAGS]) == 0
    assert sorted(p.name for p in data.iterdir()) == ["S1", "S2"]
    assert main(["train", "--data", str(data), "--domains", "S1,S2", "--exclude", "S2", "--out", str(ck),
                 "--log", str(tmp_path / "log.jsonl"), *TINY_FLAGS]) == 0
    assert parse_config((tmp_path / "m.nsck.cfg").read_text()).d == 16
    assert main(["eval", "--checkpoint", str(ck), "--data", str(data), "--domain", "S2", "--out",
                 str(tmp_path / "eval.csv"), "--masks", str(tmp_path / "masks")]) == 0
    rows = list(csv.DictReader(open(tmp_path / "eval.csv")))
    assert [r["image_id"] for r in rows] == ["S2_0000", "S2_0001", "mean"]
    assert (tmp_path / "masks" / "S2_0000_instances.png").exists()


def test_cli_config_file_and_override(tmp_path):
    (tmp_path / "run.cfg").write_text("epochs=5\nd=16\n")
    from nucseg.harness.cli import build_parser, resolve_config

    args = build_parser().parse_args(["lodo", "--config", str(tmp_path / "run.cfg"), "--epochs", "1"])
    cfg = resolve_config(args)
    assert (cfg.epochs, cfg.d) == (1, 16)


def test_cli_lodo_and_metrics(tmp_path):
    out = tmp_path / "lodo.csv"
    assert main(["lodo", "--domains", "S1,S2", "--out", str(out), "--log-dir", str(tmp_path / "logs"),
                 *TINY_FLAGS]) == 0
    assert len(out.read_text().splitlines()) == 3
    assert sorted(p.name for p in (tmp_path / "logs").iterdir()) == ["lodo_S1.jsonl", "lodo_S2.jsonl"]
    data = tmp_path / "data"
    main(["generate", "--out", str(data), "--domains", "S1", *TINY_FLAGS])
    gt = str(data / "S1" / "S1_0000_labels.png")
    assert main(["metrics", "--pred", gt, "--gt", gt, "--out", str(tmp_path / "m.csv")]) == 0
    row = next(csv.DictReader(open(tmp_path / "m.csv")))
    assert float(row["aji"]) == 100 and float(row["hd"]) == 0


def test_cli_density(tmp_path):
    (tmp_path / "p.csv").write_text("x,y\n5,6\n20,20\n")
    assert main(["density", "--points", str(tmp_path / "p.csv"), "--size", "32x32", "--r", "3", "--out",
                 str(tmp_path / "d.f32"), "--preview", str(tmp_path / "d.png")]) == 0
    assert (tmp_path / "d.f32").read_bytes().startswith(b"32 32\n")


def test_cli_errors_return_nonzero(tmp_path):
    assert main(["eval", "--checkpoint", str(tmp_path / "missing"), "--domain", "S1"]) == 2
    with pytest.raises(SystemExit):
        main(["no-such-command"])
