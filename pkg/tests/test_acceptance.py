"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 share one experiment per seed (Dice-CE network, V-Tv ensemble,
hypernetwork; plus a soft-Dice network for seed 0) on 64x64 synthetic data.
The protocol below is the desk-scale setting recorded in the decisions
ledger. It was chosen from pilot runs on seed 0 and then held fixed for
every seed.
"""

from __future__ import annotations

import json
import math
import time

import numpy as np
import pytest
from scipy.stats import spearmanr

from gradutil import check_grads
from hyperens import ops
from hyperens.cli import main
from hyperens.inference import (
    DEFAULT_HYPER_GRID,
    average_probability_maps,
    entropy_map,
    predictor,
    read_map,
    sliding_window_predict,
    write_map,
)
from hyperens.losses import (
    TverskyParams,
    binary_cross_entropy,
    dice_ce_loss,
    soft_dice_loss,
    tversky_loss,
)
from hyperens.metrics import aggregate
from hyperens.models import HyperResUNet, ModelSpec, count_params, load_checkpoint, save_checkpoint
from hyperens.synthdata import DatasetConfig, generate_dataset, split_dataset
from hyperens.tensor import clip, concat, exp, log, matmul, power, tsum
from hyperens.trainer import TrainConfig, train_hypernet, train_single, train_vtv_ensemble

# ---------------------------------------------------------------- protocol for criteria 5-7

SEEDS = (0, 1, 2, 3, 4)
DATASET = dict(n_samples=200, grid_size=64, tau_range=(0.05, 0.95), train_fraction=0.5)
SPEC = ModelSpec()
TRAIN = dict(epochs=60, batch_size=8, patch_size=64, gamma_range=None)
PLAIN_LR, HYPER_LR = 1e-3, 3e-4
BUDGET_S = 30 * 60


# ---------------------------------------------------------------- 1-4, 8-10: fast contracts


def test_c01_loss_identity(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        shape = tuple(rng.integers(1, 9, size=rng.integers(1, 4)))
        p = rng.uniform(size=shape)
        g = (rng.uniform(size=shape) < 0.4).astype(float)
        worst = max(worst, abs(tversky_loss(p, g, TverskyParams(0.5)).item() - soft_dice_loss(p, g).item()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and elapsed < 1.0
    assert criterion(1, "Tversky(0.5) == soft Dice", ok, f"max diff {worst:.1e}, {elapsed:.2f}s")


def test_c02_asymmetry_extremes(criterion):
    t0 = time.perf_counter()
    s = 1e-15
    rng = np.random.default_rng(2)
    under = over = same = 0.0
    for _ in range(20):
        g = (rng.uniform(size=(6, 6)) < 0.5).astype(float)
        g[0, 0], g[0, 1], g[5, 5] = 1.0, 1.0, 0.0
        p_under = g * (rng.uniform(size=g.shape) < 0.5)
        p_under[0, 0], p_under[0, 1] = 1.0, 0.0  # nonempty, strictly inside g
        p_over = np.maximum(g, rng.uniform(size=g.shape) < 0.5)
        p_over[5, 5] = 1.0  # strictly contains g
        under = max(under, abs(tversky_loss(p_under, g, TverskyParams(1.0), s).item()))
        over = max(over, abs(tversky_loss(p_over, g, TverskyParams(0.0), s).item()))
        losses = [tversky_loss(g, g, TverskyParams(a), 1.0).item() for a in np.linspace(0, 1, 11)]
        same = max(same, max(losses) - min(losses))
    elapsed = time.perf_counter() - t0
    ok = under < 1e-12 and over < 1e-12 and same < 1e-12 and elapsed < 1.0
    assert criterion(2, "asymmetry extremes", ok,
                     f"under@a=1 {under:.1e}, over@a=0 {over:.1e}, p==g spread {same:.1e}, {elapsed:.2f}s")


def _grad_suite(rng):
    """(name, build, arrays) triples: five random shapes per differentiable op."""
    cases = []
    for i in range(5):
        shape = tuple(int(v) for v in rng.integers(1, 5, size=int(rng.integers(1, 4))))
        a = rng.normal(size=shape)
        b = rng.uniform(0.5, 2.0, size=shape)
        kinkless = np.where(np.abs(a) < 1e-2, 0.5, a)
        cases += [
            ("add", lambda x, y: x + y, [a, b]),
            ("sub", lambda x, y: x - y, [a, b]),
            ("mul", lambda x, y: x * y, [a, b]),
            ("div", lambda x, y: x / y, [a, b]),
            ("neg", lambda x: -x, [a]),
            ("power", lambda y: power(y, 2.5), [b]),
            ("exp", exp, [a]),
            ("log", log, [b]),
            ("clip", lambda x: clip(x, -0.5, 0.5), [np.where(np.abs(np.abs(a) - 0.5) < 1e-2, 0.1, a)]),
            ("sum", lambda x: tsum(x, axis=0), [a]),
            ("mean", lambda x: x.mean(), [a]),
            ("reshape", lambda x: x.reshape(-1), [a]),
            ("transpose", lambda x: x.transpose(), [a]),
            ("concat", lambda x, y: concat([x, y], axis=0), [a, b]),
            ("broadcast", lambda x, y: x * y, [a, rng.normal(size=shape[-1:])]),
        ]
        m, k, n = (int(v) for v in rng.integers(1, 5, size=3))
        cases.append(("matmul", matmul, [rng.normal(size=(m, k)), rng.normal(size=(k, n))]))
        cin, cout = (int(v) for v in rng.integers(1, 4, size=2))
        ksz, stride, pad = [(3, 1, 1), (3, 2, 1), (1, 1, 0), (5, 2, 2), (3, 1, 0)][i]
        x = rng.normal(size=(2, cin, 6 + i, 5 + i))
        cases.append(("conv2d", lambda x, w, bb, s=stride, p=pad: ops.conv2d(x, w, bb, s, p),
                      [x, rng.normal(size=(cout, cin, ksz, ksz)), rng.normal(size=cout)]))
        tk, ts, tp = [(2, 2, 0), (3, 2, 1), (1, 1, 0), (3, 1, 1), (4, 3, 1)][i]
        cases.append(("conv2d_transposed", lambda x, w, bb, s=ts, p=tp: ops.conv2d_transposed(x, w, bb, s, p),
                      [rng.normal(size=(2, cin, 3 + i, 4)), rng.normal(size=(cin, cout, tk, tk)), rng.normal(size=cout)]))
        din, dout = (int(v) for v in rng.integers(1, 6, size=2))
        cases.append(("dense", ops.dense, [rng.normal(size=(3, din)), rng.normal(size=(dout, din)), rng.normal(size=dout)]))
        c = cin
        act = rng.normal(size=(2, c, 3, 3))
        act[np.abs(act) < 1e-2] = 0.3
        cases += [
            ("sigmoid", ops.sigmoid, [a]),
            ("relu", ops.relu, [kinkless]),
            ("prelu", ops.prelu, [act, rng.uniform(0.05, 0.5, size=c)]),
        ]
        for training in (True, False):
            cases.append((f"batch_norm[{'train' if training else 'eval'}]",
                          lambda x, gg, bb, c=c, t=training: ops.batch_norm(x, gg, bb, np.zeros(c), np.full(c, 2.0), t),
                          [rng.normal(size=(3, c, 3, 2)), rng.normal(size=c), rng.normal(size=c)]))
        seed = int(rng.integers(1 << 30))
        cases.append(("channel_dropout",
                      lambda x, s=seed: ops.channel_dropout(x, 0.3, np.random.default_rng(s), True),
                      [rng.normal(size=(2, c, 3, 3))]))
        pshape = (2, 1, 3 + i, 4)
        p = rng.uniform(0.05, 0.95, size=pshape)
        g = (rng.uniform(size=pshape) < 0.5).astype(float)
        h = TverskyParams(float(rng.uniform(0.05, 0.95)))
        cases += [
            ("tversky_loss", lambda q, g=g, h=h: tversky_loss(q, g, h), [p]),
            ("soft_dice_loss", lambda q, g=g: soft_dice_loss(q, g), [p]),
            ("binary_cross_entropy", lambda q, g=g: binary_cross_entropy(q, g), [p]),
            ("dice_ce_loss", lambda q, g=g: dice_ce_loss(q, g), [p]),
        ]
    return cases


def test_c03_gradient_suite(criterion):
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    counts: dict[str, int] = {}
    for name, build, arrays in _grad_suite(np.random.default_rng(3)):
        err = check_grads(build, arrays, rtol=math.inf)
        worst[name] = max(worst.get(name, 0.0), err)
        counts[name] = counts.get(name, 0) + 1
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-4}
    ok = not bad and min(counts.values()) >= 5 and elapsed < 60
    detail = f"{len(worst)} ops x >=5 shapes, worst {max(worst.values()):.1e}, {elapsed:.1f}s"
    assert criterion(3, "finite-difference gradient suite", ok, detail + (f", failing {bad}" if bad else ""))


def test_c04_hyper_plain_oracle(criterion, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst = 0.0
    for i in range(3):
        spec = ModelSpec(kind="hyper", kernel_depths=(4, 8, 16), hypervector_size=int(rng.integers(4, 17)),
                         mapping_layers=int(rng.integers(1, 4)))
        model = HyperResUNet(spec, seed=int(rng.integers(1 << 30)))
        for k, p in model.params.items():
            p.data = p.data + rng.normal(0, 0.05, p.data.shape)
        for k in model.buffers:
            model.buffers[k] = (rng.normal(0, 0.2, model.buffers[k].shape) if k.endswith("mean")
                                else rng.uniform(0.5, 1.5, model.buffers[k].shape))
        ck = load_checkpoint(save_checkpoint(model, tmp_path / f"h{i}"), kind="hyper").model
        x = rng.uniform(size=(2, 1, 32, 32))
        for a in rng.uniform(0.05, 0.95, size=3):
            h = TverskyParams(float(a))
            worst = max(worst, float(np.max(np.abs(ck.predict(x, h) - ck.export_plain(h).predict(x)))))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-10 and elapsed < 60
    assert criterion(4, "hyper/plain oracle equivalence", ok, f"max abs diff {worst:.1e}, {elapsed:.1f}s")


def test_c08_entropy_contract(criterion):
    t0 = time.perf_counter()
    p = np.linspace(0.0, 1.0, 100_001)
    h = entropy_map(p)
    in_range = h.min() >= 0.0 and h.max() <= 0.7
    half = abs(float(entropy_map(np.array(0.5))) - math.log(2))
    sym = float(np.max(np.abs(h - entropy_map(1.0 - p))))
    elapsed = time.perf_counter() - t0
    ok = in_range and half <= 1e-3 and sym <= 1e-12 and elapsed < 1.0
    assert criterion(8, "entropy contract", ok,
                     f"range [{h.min():.2e}, {h.max():.4f}], |H(0.5)-ln2| {half:.1e}, asym {sym:.1e}")


def test_c09_parameter_scaling(criterion):
    t0 = time.perf_counter()
    ratios = []
    for base in (dict(kernel_depths=(8, 16, 32, 64), mapping_layers=3),
                 dict(kernel_depths=(32, 32, 64, 64, 128), mapping_layers=5)):
        n = [count_params(ModelSpec(kind="hyper", hypervector_size=hv, **base)) for hv in (32, 64, 128)]
        ratios += [n[1] / n[0], n[2] / n[1]]
    elapsed = time.perf_counter() - t0
    ok = all(1.8 <= r <= 2.2 for r in ratios) and elapsed < 1.0
    assert criterion(9, "parameter scaling 32->64->128", ok, "ratios " + ", ".join(f"{r:.3f}" for r in ratios))


def _tree(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_determinism_and_formats(criterion, tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "seed": 10, "dataset": {"n_samples": 12, "grid_size": 32},
        "model": {"kernel_depths": [4, 8]},
        "train": {"epochs": 2, "patch_size": 16, "batch_size": 4, "strategy": "vtv_ensemble"},
        "predict": {"patch_size": 32},
    }))
    checks = {}
    outs = {}
    for run in ("a", "b"):
        d = tmp_path / run
        c = ["--config", str(cfg)]
        codes = [
            main(["generate", *c, "--out", str(d / "data")]),
            main(["train", *c, "--dataset", str(d / "data"), "--out", str(d / "vtv")]),
            main(["train", *c, "--dataset", str(d / "data"), "--out", str(d / "hyp"), "train.strategy=hypernet",
                  "model.kind=hyper"]),
            main(["predict", *c, "--checkpoints", str(d / "vtv"), "--dataset", str(d / "data"), "--out", str(d / "pv"),
                  "--method", "vtv"]),
            main(["predict", *c, "--checkpoints", str(d / "hyp"), "--dataset", str(d / "data"), "--out", str(d / "ph"),
                  "--method", "hyper"]),
            main(["evaluate", *c, "--predictions", str(d / "pv"), str(d / "ph"), "--dataset", str(d / "data"),
                  "--out", str(d / "eval")]),
        ]
        checks[f"exit codes {run}"] = codes == [0] * 6
        outs[run] = d
    for part in ("data", "pv", "ph", "eval"):
        checks[f"{part} identical"] = _tree(outs["a"] / part) == _tree(outs["b"] / part)
    for part in ("vtv", "hyp"):
        a = {k: v for k, v in _tree(outs["a"] / part).items() if not k.endswith(("timing.json", "train.log"))}
        b = {k: v for k, v in _tree(outs["b"] / part).items() if not k.endswith(("timing.json", "train.log"))}
        checks[f"{part} checkpoints identical"] = a == b

    ck_dir = outs["a"] / "vtv" / "member_0.5"
    model = load_checkpoint(ck_dir).model
    again = save_checkpoint(model, tmp_path / "resaved", metadata=json.loads((ck_dir / "manifest").read_text())["metadata"])
    checks["checkpoint round-trip"] = all(
        (ck_dir / f).read_bytes() == (again / f).read_bytes() for f in ("manifest", "weights.bin"))
    p = np.random.default_rng(0).uniform(size=(9, 11))
    checks["map round-trip"] = read_map(write_map(tmp_path / "m", p)).tobytes() == p.tobytes()
    img = np.random.default_rng(1).uniform(size=(32, 32))
    checks["single-window == forward"] = np.array_equal(
        sliding_window_predict(img, model.predict, 32), model.predict(img[None, None])[0, 0])
    elapsed = time.perf_counter() - t0
    ok = all(checks.values()) and elapsed < 300
    failed = [k for k, v in checks.items() if not v]
    assert criterion(10, "determinism and formats", ok,
                     f"{len(checks)} checks, {elapsed:.1f}s" + (f", failing {failed}" if failed else ""))


# ---------------------------------------------------------------- 5-7: trained comparison


def _maps(model, images, h=None):
    f = predictor(model, h)
    return [sliding_window_predict(im, f, im.shape[0]) for im in images]


def _summary(maps, val):
    rep = aggregate([(m, s.annotation, s.p_true) for m, s in zip(maps, val)])
    return {"mae": rep.prob_mae, "pol": rep.polarization_fraction, "drange": rep.dice_range, "dice": rep.dice}


def run_experiment(seed: int, with_vanilla: bool = False) -> dict:
    data = generate_dataset(DatasetConfig(seed=seed, **DATASET))
    train_set, val = split_dataset(data, DATASET["train_fraction"], seed)
    images = [s.image for s in val]
    out = {"seed": seed, "n_val": len(val)}

    dce = train_single(train_set, SPEC, TrainConfig(strategy="single_dice_ce", seed=seed, lr=PLAIN_LR, **TRAIN))
    out["dice_ce"] = _summary(_maps(dce.model, images), val)
    if with_vanilla:
        van = train_single(train_set, SPEC, TrainConfig(strategy="single_dice", seed=seed, lr=PLAIN_LR, **TRAIN))
        out["vanilla"] = _summary(_maps(van.model, images), val)

    members = train_vtv_ensemble(train_set, SPEC, TrainConfig(strategy="vtv_ensemble", seed=seed, lr=PLAIN_LR, **TRAIN))
    member_maps = [_maps(m.model, images) for m in members]
    out["vtv_areas"] = [float(np.mean([m.mean() for m in maps])) for maps in member_maps]
    out["vtv_alphas"] = [m.alpha for m in members]
    out["vtv_time"] = sum(m.report.wall_time for m in members)
    out["vtv"] = _summary([average_probability_maps(list(z)) for z in zip(*member_maps)], val)

    hyper = train_hypernet(train_set, SPEC, TrainConfig(strategy="hypernet", seed=seed, lr=HYPER_LR, **TRAIN))
    grid_maps = [_maps(hyper.model, images, TverskyParams(a)) for a in DEFAULT_HYPER_GRID]
    out["hyper_areas"] = [float(np.mean([m.mean() for m in maps])) for maps in grid_maps]
    out["hyper_time"] = hyper.report.wall_time
    out["hyper"] = _summary([average_probability_maps(list(z)) for z in zip(*grid_maps)], val)
    return out


@pytest.fixture(scope="module")
def experiments():
    return {s: run_experiment(s, with_vanilla=(s == SEEDS[0])) for s in SEEDS}


def test_c05_monotone_segmentation_area(criterion, experiments):
    r = experiments[SEEDS[0]]
    rho_v = spearmanr(r["vtv_alphas"], r["vtv_areas"])[0]
    rho_h = spearmanr(DEFAULT_HYPER_GRID, r["hyper_areas"])[0]
    ok = rho_v <= -0.8 and rho_h <= -0.8 and r["vtv_time"] <= BUDGET_S and r["hyper_time"] <= BUDGET_S
    detail = (f"n_val {r['n_val']}, V-Tv rho {rho_v:.2f} in {r['vtv_time']:.0f}s, "
              f"hyper rho {rho_h:.2f} in {r['hyper_time']:.0f}s")
    assert criterion(5, "foreground area decreases with alpha", ok, detail)


def test_c06_probability_map_recovery(criterion, experiments):
    lines, passed = [], 0
    for s in SEEDS:
        r = experiments[s]
        base = r["dice_ce"]
        ok = all(r[m]["mae"] <= 0.8 * base["mae"] and r[m]["pol"] >= 2.0 * base["pol"] for m in ("vtv", "hyper"))
        passed += ok
        lines.append(
            f"seed {s}: mae dce/vtv/hyp {base['mae']:.4f}/{r['vtv']['mae']:.4f}/{r['hyper']['mae']:.4f}, "
            f"pol {base['pol']:.4f}/{r['vtv']['pol']:.4f}/{r['hyper']['pol']:.4f} -> {'ok' if ok else 'miss'}")
    for line in lines:
        print("   ", line)
    assert criterion(6, "probability-map recovery vs Dice-CE", passed >= 4, f"{passed}/5 seeds; " + "; ".join(lines))


def test_c07_threshold_smoothness(criterion, experiments):
    r = experiments[SEEDS[0]]
    van = r["vanilla"]["drange"]
    ratios = {m: r[m]["drange"] / van if van > 0 else math.inf for m in ("vtv", "hyper")}
    ok = all(v >= 3.0 for v in ratios.values())
    assert criterion(7, "Dice-vs-tau range vs vanilla", ok,
                     f"vanilla {van:.4f}, V-Tv {r['vtv']['drange']:.4f} (x{ratios['vtv']:.1f}), "
                     f"hyper {r['hyper']['drange']:.4f} (x{ratios['hyper']:.1f})")
