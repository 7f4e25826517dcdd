"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run on its own with ``pytest tests/test_acceptance.py -v``; criteria 6 and 7
train real models and take most of the suite's runtime.
"""
import csv
import time

import numpy as np
import pytest

from kdauth import evaluate as ev
from kdauth.cli import main
from kdauth.evaluate import assemble, cross_validate, eer
from kdauth.features import CutoutSpec, Subsequence, apply_cutout, build_kdi, featurize, timing_features
from kdauth.ingest import Keystroke, pair_events, synthesize
from kdauth.models import CnnConfig, CnnRnnConfig, build_cnn, build_cnn_rnn
from kdauth.nnengine import Network, OptimizerSpec, StepLR, TrainConfig, grad_check
from oracles import eer_grid_oracle, kdi_oracle

pytestmark = pytest.mark.slow

# training settings used by the end-to-end criteria; see README
CNN_TRAIN = TrainConfig(6, 32, OptimizerSpec("Adam", 0.001, schedule=StepLR(0.1, 6)))
GRU_TRAIN = TrainConfig(12, 32, OptimizerSpec("Adam", 0.01, schedule=StepLR(0.1, 12)))


def verdict(capsys, number, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def random_window(rng, length):
    keys = rng.integers(0, 42, length)
    press = np.cumsum(rng.integers(0, 900, length))
    holds = rng.integers(1, 400, length)
    return [Keystroke(int(k), int(p), int(p + h)) for k, p, h in zip(keys, press, holds)]


@pytest.fixture(scope="module")
def synthetic_streams():
    return list(pair_events(synthesize(7, 4, 20000)).streams.values())


# 1 ----------------------------------------------------------------------


def test_criterion_1_kdi_oracle(capsys):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        ks = random_window(rng, (50, 75, 100)[i % 3])
        worst = max(worst, float(np.abs(build_kdi(Subsequence("u", ks)) - kdi_oracle(ks)).max()))
    elapsed = time.perf_counter() - t0
    verdict(capsys, 1, worst <= 1e-9 and elapsed < 10,
            f"max |kdi - oracle| = {worst:.2e} (tol 1e-9) over 1000 windows, {elapsed:.2f} s (limit 10 s)")


# 2 ----------------------------------------------------------------------


def test_criterion_2_timing_identities(capsys):
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(10_000):
        pa, ha, gap, hb = (int(v) for v in rng.integers(0, 10**6, 4))
        a = Keystroke(0, pa, pa + ha)
        b = Keystroke(1, pa + gap, pa + gap + hb)
        t = timing_features(a, b)
        bad += (t.du - t.dd != t.duration_b) or (t.uu - t.ud != t.duration_b)
    verdict(capsys, 2, bad == 0, f"{bad} violations in 10000 random pairs")


# 3 ----------------------------------------------------------------------


def layer_cases():
    conv = {"kind": "Conv2d", "in_channels": 2, "out_channels": 3, "kernel": 3}
    return {
        "Conv2d": ([conv], (2, 5, 6)),
        "Conv2d(shifted)": ([dict(conv, in_channels=16)], (16, 4, 4)),
        "Conv2d(strided)": ([{"kind": "Conv2d", "in_channels": 1, "out_channels": 3, "kernel": [2, 4],
                              "stride": [1, 4], "padding": [0, 0, 0, 2]}], (1, 5, 10)),
        "MaxPool2d": ([conv, {"kind": "MaxPool2d", "size": 2}], (2, 5, 5)),
        "Flatten": ([conv, {"kind": "Flatten"}, {"kind": "Dense", "in_features": 48, "units": 2}], (2, 4, 4)),
        "Dense": ([{"kind": "Dense", "in_features": 5, "units": 3}], (5,)),
        "ReLU": ([{"kind": "Dense", "in_features": 4, "units": 6}, {"kind": "ReLU"}], (4,)),
        "Sigmoid": ([{"kind": "Dense", "in_features": 4, "units": 3}, {"kind": "Sigmoid"}], (4,)),
        "Dropout": ([{"kind": "Dense", "in_features": 4, "units": 6}, {"kind": "Dropout", "rate": 0.4}], (4,)),
        "Unsqueeze+ToSequence": ([{"kind": "Unsqueeze"},
                                  {"kind": "Conv2d", "in_channels": 1, "out_channels": 2, "kernel": [2, 2],
                                   "stride": [1, 2], "padding": "valid"},
                                  {"kind": "ToSequence"},
                                  {"kind": "GRUCellStack", "input_size": 4, "hidden_size": 3,
                                   "num_layers": 1}], (4, 4)),
        "RNNCellStack": ([{"kind": "RNNCellStack", "input_size": 3, "hidden_size": 4}], (5, 3)),
        "GRUCellStack": ([{"kind": "GRUCellStack", "input_size": 3, "hidden_size": 4}], (5, 3)),
        "LSTMCellStack": ([{"kind": "LSTMCellStack", "input_size": 3, "hidden_size": 4}], (5, 3)),
    }


def test_criterion_3_gradient_checks(capsys):
    t0 = time.perf_counter()
    results = {}
    rng = np.random.default_rng(3)
    y = np.array([[1], [0], [1]])
    for name, (specs, shape) in layer_cases().items():
        net = Network(specs, shape, seed=0, dtype=np.float64)
        results[name] = grad_check(net, rng.uniform(-1, 1, (3,) + shape), loss="linear",
                                   epsilon=1e-3, tolerance=1e-4)
    cnn = build_cnn(CnnConfig(stage_channels=(2, 3), fc_sizes=(6, 1)), seed=1, input_shape=(5, 8, 8),
                    dtype="float64")
    results["CNN"] = grad_check(cnn, rng.uniform(-1, 1, (3, 5, 8, 8)), y, epsilon=1e-3, tolerance=1e-4)
    for kind in ("rnn", "gru", "lstm"):
        cfg = CnnRnnConfig(conv_kernel=(2, 4), conv_filters=3, rnn_kind=kind, rnn_hidden=4)
        net = build_cnn_rnn(cfg, 6, 10, seed=1, dtype="float64")
        results[f"CNN-RNN({kind})"] = grad_check(net, rng.uniform(-1, 1, (3, 6, 10)), y,
                                                 epsilon=1e-3, tolerance=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_rel_error for r in results.values())
    failed = [k for k, r in results.items() if not r.passed]
    with capsys.disabled():
        for k, r in results.items():
            print(f"\n  {k:22s} max rel err {r.max_rel_error:.2e} ({r.n_checked} checked, {r.n_kinked} kinked)",
                  end="")
    verdict(capsys, 3, not failed and elapsed < 120,
            f"{len(results)} checks, worst rel err {worst:.2e} (tol 1e-4), failed {failed}, "
            f"{elapsed:.1f} s (limit 120 s)")


# 4 ----------------------------------------------------------------------


def test_criterion_4_eer_oracle(capsys):
    rng = np.random.default_rng(4)
    worst_oracle = worst_cube = 0.0
    for _ in range(1000):
        n = int(rng.integers(4, 200))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 1001, n) / 1000
        rate = eer(scores, labels)[0]
        worst_oracle = max(worst_oracle, abs(rate - eer_grid_oracle(scores, labels)))
        worst_cube = max(worst_cube, abs(rate - eer(scores ** 3, labels)[0]))
    verdict(capsys, 4, worst_oracle <= 1e-3 and worst_cube <= 1e-9,
            f"max |eer - grid oracle| = {worst_oracle:.2e} (tol 1e-3), "
            f"max |eer(s) - eer(s^3)| = {worst_cube:.2e} (tol 1e-9) over 1000 score sets")


# 5 ----------------------------------------------------------------------


def test_criterion_5_cutout_contract(capsys):
    rng = np.random.default_rng(5)
    spec = CutoutSpec()
    problems = []
    for _ in range(200):
        kdi = rng.uniform(0.01, 1.0, (5, 42, 42))
        r, c = (int(v) for v in rng.integers(0, 42 - spec.kdi_size + 1, 2))
        changed = apply_cutout(kdi, spec, at=(r, c)) != kdi
        expect = np.zeros_like(changed)
        expect[:, r:r + spec.kdi_size, c:c + spec.kdi_size] = True
        if changed.sum() != spec.kdi_size ** 2 * 5 or not np.array_equal(changed, expect):
            problems.append(f"kdi at {(r, c)}")
        width = int(rng.choice([7, 48]))
        kds = rng.uniform(0.01, 1.0, (100, width))
        s = int(rng.integers(0, 100 - spec.kds_span + 1))
        changed = apply_cutout(kds, spec, at=s) != kds
        if changed.sum() != spec.kds_span * width or not changed[s:s + spec.kds_span].all():
            problems.append(f"kds at {s}")
        for x in (kdi, kds):
            if not np.array_equal(apply_cutout(x, CutoutSpec(probability=0.0), rng), x):
                problems.append("probability 0 changed input")
        seeded = CutoutSpec(probability=0.5, rng_seed=int(rng.integers(1 << 30)))
        if apply_cutout(kdi, seeded).tobytes() != apply_cutout(kdi, seeded).tobytes():
            problems.append("seeded runs differ")
    verdict(capsys, 5, not problems, f"200 random placements per layout, problems: {problems[:3]}")


# 6 ----------------------------------------------------------------------


def run_users(streams, mode, model_cfg, train_cfg, encoding="onehot", cutout=True, users=None, seed=0,
              windows=None):
    fs = featurize(streams, mode, 100, encoding)
    per_user = fs.by_user()
    if windows:
        per_user = {u: x[:windows] for u, x in per_user.items()}
    out = {}
    for u in users or sorted(per_user):
        ls = assemble(u, per_user, seed=seed)
        out[u] = cross_validate(ls, model_cfg, train_cfg, seed=seed, cutout=CutoutSpec(enabled=cutout))
    return out


def test_criterion_6_end_to_end(capsys, synthetic_streams):
    t0 = time.perf_counter()
    cnn = run_users(synthetic_streams, "kdi", CnnConfig(), CNN_TRAIN)
    gru = run_users(synthetic_streams, "kds", CnnRnnConfig(rnn_kind="gru"), GRU_TRAIN)
    elapsed = time.perf_counter() - t0
    lines = [f"{u}: CNN eer {r.mean_eer:.4f} acc {r.mean_accuracy:.4f} | CNN-RNN eer {gru[u].mean_eer:.4f}"
             for u, r in cnn.items()]
    with capsys.disabled():
        print("\n  " + "\n  ".join(lines), end="")
    cnn_ok = all(r.mean_eer <= 0.15 and r.mean_accuracy >= 0.85 for r in cnn.values())
    gru_mean = float(np.mean([r.mean_eer for r in gru.values()]))
    verdict(capsys, 6, cnn_ok and gru_mean <= 0.25 and elapsed < 900,
            f"CNN per-user eer <= 0.15 and acc >= 0.85: {cnn_ok}; CNN-RNN mean eer {gru_mean:.4f} (<= 0.25); "
            f"{elapsed:.0f} s (limit 900 s)")


# 7 ----------------------------------------------------------------------

ABLATION_REPS = 5
ABLATION_WINDOWS = 100  # per user for the CNN cutout runs


def test_criterion_7_ablation_direction(capsys, synthetic_streams):
    users = sorted({s.user_id for s in synthetic_streams})
    enc = {"onehot": [], "index": []}
    cut = {"on": [], "off": []}
    for rep in range(ABLATION_REPS):
        target = [users[rep % len(users)]]
        for encoding in enc:
            res = run_users(synthetic_streams, "kds", CnnRnnConfig(), GRU_TRAIN, encoding=encoding,
                            users=target, seed=rep)
            enc[encoding].append(res[target[0]].mean_eer)
        for state in cut:
            res = run_users(synthetic_streams, "kdi", CnnConfig(), CNN_TRAIN, cutout=state == "on",
                            users=target, seed=rep, windows=ABLATION_WINDOWS)
            cut[state].append(res[target[0]].mean_eer)
    m = {k: float(np.mean(v)) for k, v in {**enc, **cut}.items()}
    with capsys.disabled():
        for k, v in {**enc, **cut}.items():
            print(f"\n  {k:7s} per-rep eer {np.round(v, 4).tolist()} mean {m[k]:.4f}", end="")
    enc_ok = m["onehot"] <= m["index"]
    cut_ok = m["on"] <= m["off"] + 0.02
    verdict(capsys, 7, enc_ok and cut_ok,
            f"one-hot {m['onehot']:.4f} <= index {m['index']:.4f}: {enc_ok}; "
            f"cutout on {m['on']:.4f} <= off {m['off']:.4f} + 0.02: {cut_ok}")


# 8 ----------------------------------------------------------------------


def pipeline(root):
    root.mkdir()
    steps = [
        ["synth", "--users", "3", "--keystrokes", "1200", "--seed", "11", "--out", str(root / "events.csv")],
        ["ingest", "--in", str(root / "events.csv"), "--out", str(root / "canon.csv")],
        ["featurize", "--in", str(root / "canon.csv"), "--out", str(root / "f.kdf"), "--mode", "kds",
         "--length", "50", "--min-keystrokes", "1000"],
        ["train", "--features", str(root / "f.kdf"), "--model", "cnn-rnn", "--epochs", "3", "--batch-size", "8",
         "--seed", "3", "--out-dir", str(root / "run")],
        ["eval", "--run-dir", str(root / "run")],
    ]
    return [main(s) for s in steps]


def test_criterion_8_reproducibility(capsys, tmp_path):
    codes = [pipeline(tmp_path / name) for name in ("a", "b")]
    files = ["run/metrics.csv", "run/eval_metrics.csv"]
    same = [(tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files]
    rows = len(list(csv.DictReader(open(tmp_path / "a" / files[0]))))
    verdict(capsys, 8, all(c == 0 for run in codes for c in run) and all(same) and rows == 15,
            f"exit codes {codes}; {rows} fold rows; byte-identical {dict(zip(files, same))}")


# 9 ----------------------------------------------------------------------


def test_criterion_9_grid_enumeration(capsys, tmp_path, monkeypatch):
    main(["synth", "--users", "2", "--keystrokes", "600", "--out", str(tmp_path / "ev.csv")])
    main(["featurize", "--in", str(tmp_path / "ev.csv"), "--out", str(tmp_path / "f.kdf"), "--mode", "kds",
          "--length", "50", "--min-keystrokes", "0"])
    seen = []

    def cheap_cv(ls, model_cfg, cfg, seed=0, cutout=None, jobs=1):
        # every cell goes through the real grid loop; only the training itself is skipped
        opt = cfg.optimizer
        seen.append((cfg.epochs, opt.learning_rate, opt.kind, opt.schedule.label()))
        m = ev.Metrics(0.5, 0.5, 0.5, [])
        return ev.CVResult(ls.user_id, [ev.FoldResult(0, m)])

    monkeypatch.setattr(ev, "cross_validate", cheap_cv)
    out = tmp_path / "grid.csv"
    code = main(["gridsearch", "--features", str(tmp_path / "f.kdf"), "--model", "cnn-rnn", "--user", "user000",
                 "--grid", "paper", "--out", str(out)])
    rows = list(csv.DictReader(open(out)))
    n_cells = len(set(seen))
    verdict(capsys, 9, code == 0 and len(seen) == 48 and n_cells == 48 and len(rows) == 48,
            f"{len(seen)} cells evaluated ({n_cells} distinct), {len(rows)} rows written (expected 48)")
