"""Acceptance suite. Each test records one PASS/FAIL line, shown in the terminal summary.

Criteria 5 to 7 share the three default-benchmark runs built by the
``seed_runs`` fixture, so the expensive pixel phase is trained once per seed.
"""

import json
import time

import numpy as np
import pytest

from jpfa import autodiff as ad
from jpfa import cli, pipeline
from jpfa import evaluation as ev
from jpfa import losses as L
from jpfa.autodiff import Tensor, gradient_check
from jpfa.evaluation import ScoreSet
from jpfa.losses import KernelFamily, LossWeights
from jpfa.pipeline import ExperimentConfig, Run

from .oracles import brute_eer, brute_mmd
from .test_autodiff import PRIMITIVE_BUILDERS

SEEDS = (41, 42, 43)
SNAPSHOTS = ("pretrain.weights", "pixel.weights", "feature.weights", "fake_images.npy")


def val(t):
    return float(np.asarray(t.data).reshape(()))


def _cpu():
    return time.process_time()


# ---------------------------------------------------------------------------
# shared runs


@pytest.fixture(scope="module")
def seed_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_benchmark")
    cfg = ExperimentConfig()
    t0 = _cpu()
    results = {s: pipeline.full_run(Run(cfg.with_seed(s), root / f"seed_{s}")) for s in SEEDS}
    return root, results, _cpu() - t0


# ---------------------------------------------------------------------------
# 1


def _loss_checks(rng):
    """(builder, point) pairs covering every differentiable loss term."""
    n, k = 5, 4
    labels = rng.integers(0, 2, size=n)
    rel = (labels[:, None] == labels[None, :]).astype(float)
    codes = rng.uniform(-0.9, 0.9, size=(n, k))
    other = rng.uniform(-0.9, 0.9, size=k)
    y = rng.normal(size=(7, k))
    fam = KernelFamily((0.5, 1.0, 2.0))
    cf = codes + rng.choice([-0.3, 0.3], size=codes.shape)
    img = rng.uniform(-1, 1, size=(2, 1, 3, 3))
    rec = img + rng.choice([-0.2, 0.2], size=img.shape)
    d_fake = rng.normal(size=4) * 0 + 0.2
    w = LossWeights(margin_m=3.0)
    return {
        "dhn": (lambda t: L.dhn_batch_loss(t, rel, w), codes),
        "hashing_similar": (lambda t: L.hashing_loss(t, other, 1, 3.0), codes[0]),
        "hashing_dissimilar": (lambda t: L.hashing_loss(t, other, 0, 50.0), codes[0]),
        "quantization": (L.quantization_loss, codes[0]),
        "mk_mmd": (lambda t: L.mk_mmd(t, y, fam), codes),
        "consistency": (lambda t: L.consistency_loss(t, cf), codes),
        "identity": (lambda t: L.identity_loss(cf, t), codes),
        "cycle": (lambda t: L.cycle_loss(img, t), rec),
        "gan_generator": (lambda t: L.gan_losses(np.ones(4), t)[0], rng.normal(size=4)),
        "gan_discriminator": (lambda t: L.gan_losses(t, d_fake)[1], rng.normal(size=4)),
        "pixel_objective": (lambda t: L.pixel_objective(*[ad.take_rows(t, [i]) for i in range(4)]),
                            rng.uniform(0, 3, size=4)),
        "joint_objective": (lambda t: L.joint_objective(*[ad.take_rows(t, [i]) for i in range(5)]),
                            rng.uniform(0, 3, size=5)),
    }


def test_criterion_1_gradient_checks(acceptance):
    t0 = _cpu()
    worst, where = 0.0, ""
    for name in sorted(PRIMITIVE_BUILDERS):
        rng = np.random.default_rng(abs(hash(name)) % 2**32)
        for _ in range(10):
            err = gradient_check(*PRIMITIVE_BUILDERS[name](rng), 1e-4)
            if err > worst:
                worst, where = err, name
    rng = np.random.default_rng(101)
    n_losses = 0
    for _ in range(10):
        checks = _loss_checks(rng)
        n_losses = len(checks)
        for name, (fn, point) in checks.items():
            err = gradient_check(fn, point, 1e-4)
            if err > worst:
                worst, where = err, name
    elapsed = _cpu() - t0
    ok = worst < 1e-4 and elapsed < 60
    acceptance(1, ok, f"{len(PRIMITIVE_BUILDERS)} primitives + {n_losses} losses x 10 points, "
                      f"max rel err {worst:.2e} ({where}), {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2


def test_criterion_2_mk_mmd_oracle(acceptance):
    t0 = _cpu()
    rng = np.random.default_rng(202)
    worst_oracle = worst_linear = 0.0
    for _ in range(100):
        n, m, d = rng.integers(1, 33), rng.integers(1, 33), rng.integers(1, 65)
        x = rng.normal(size=(n, d))
        y = rng.normal(size=(m, d)) + rng.uniform(0, 1)
        bws = tuple(rng.uniform(0.5, 3.0, size=rng.integers(1, 6)) * np.sqrt(d))
        wts = tuple(rng.dirichlet(np.ones(len(bws))))
        got = val(L.mk_mmd(x, y, KernelFamily(bws, wts)))
        worst_oracle = max(worst_oracle, abs(got - brute_mmd(x, y, bws, wts)))
        single = sum(w * val(L.mmd(x, y, b)) for b, w in zip(bws, wts))
        worst_linear = max(worst_linear, abs(got - single))
    elapsed = _cpu() - t0
    ok = worst_oracle < 1e-10 and worst_linear < 1e-12 and elapsed < 60
    acceptance(2, ok, f"100 set pairs, oracle err {worst_oracle:.1e}, linearity err {worst_linear:.1e}, "
                      f"{elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 3


def test_criterion_3_loss_fixtures(acceptance):
    fixtures = [
        (L.hashing_loss([0.5, -0.5], [0.5, -0.5], 1, 3.0), 0.0),
        (L.hashing_loss([1.0, 1.0], [-1.0, 1.0], 1, 4.0), 2.0),
        (L.hashing_loss([1.0, 1.0], [-1.0, 1.0], 0, 4.0), 0.0),
        (L.hashing_loss([1.0, 1.0], [-1.0, 1.0], 0, 10.0), 3.0),
        (L.quantization_loss([1.0, -1.0, -1.0, 1.0]), 0.0),
        (L.quantization_loss([0.0, 0.0]), 0.5 * np.sqrt(2.0)),
        (L.consistency_loss([0.2, 0.4], [0.2, 0.4]), 0.0),
        (L.consistency_loss([1.0, -1.0], [-1.0, -1.0]), 1.0),
        (L.identity_loss([[1.0, 2.0]], [[1.0, 2.0]]), 0.0),
        (L.identity_loss([[1.0, 1.0]], [[1.0, -1.0]]), 2.0),
        (L.joint_objective(0, 0, 0, 0, 0), 0.0),
        (L.joint_objective(1, 2, 3, 4, 5, LossWeights(beta=1.5)), 17.5),
        (L.joint_objective(1, 2, 3, 4, 5, LossWeights(beta=0.0)), 10.0),
    ]
    worst = max(abs(val(t) - want) for t, want in fixtures)
    w = LossWeights()
    ok = worst < 1e-12 and w.alpha == 0.5 and w.beta == 1.5
    acceptance(3, ok, f"{len(fixtures)} fixtures, max err {worst:.1e}, alpha={w.alpha}, beta={w.beta}")
    assert ok


# ---------------------------------------------------------------------------
# 4


def _random_scoreset(rng):
    ng, ni = rng.integers(1, 40), rng.integers(1, 60)
    kind = rng.integers(3)
    if kind == 0:
        return ScoreSet(rng.integers(0, 20, size=ng).astype(float), rng.integers(5, 40, size=ni).astype(float))
    if kind == 1:
        return ScoreSet(rng.normal(size=ng), rng.normal(rng.uniform(-1, 3), 1.0, size=ni))
    return ScoreSet(rng.uniform(size=ng), rng.uniform(size=ni))


def test_criterion_4_eer_oracle(acceptance):
    rng = np.random.default_rng(404)
    worst = 0.0
    for _ in range(1000):
        s = _random_scoreset(rng)
        worst = max(worst, abs(ev.compute_eer(s)[0] - brute_eer(s.genuine, s.imposter)))
    separated = ev.compute_eer(ScoreSet([0.0, 1.0, 2.0], [5.0, 7.0]))[0]
    same = rng.integers(0, 20, size=25).astype(float)
    identical = ev.compute_eer(ScoreSet(same, same.copy()))[0]
    ok = worst < 1e-9 and separated == 0.0 and identical == 0.5
    acceptance(4, ok, f"1000 sets, max err {worst:.1e}, separated={separated}, identical={identical}")
    assert ok


# ---------------------------------------------------------------------------
# 5


def test_criterion_5_cross_dataset_improvement(seed_runs, acceptance):
    _, results, elapsed = seed_runs
    jp_acc = np.mean([r["jpfa"]["accuracy"] for r in results.values()])
    so_acc = np.mean([r["source_only"]["accuracy"] for r in results.values()])
    jp_eer = np.mean([r["jpfa"]["eer"] for r in results.values()])
    so_eer = np.mean([r["source_only"]["eer"] for r in results.values()])
    ok = jp_acc - so_acc >= 0.10 and jp_eer < so_eer and elapsed <= 20 * 60
    acceptance(5, ok, f"accuracy {so_acc:.3f} -> {jp_acc:.3f}, EER {so_eer:.4f} -> {jp_eer:.4f}, "
                      f"{elapsed / 60:.1f} min CPU")
    assert ok


# ---------------------------------------------------------------------------
# 6


def test_criterion_6_ablation_trend(seed_runs, acceptance):
    root, _, _ = seed_runs
    t0 = _cpu()
    path = pipeline.ablate(ExperimentConfig(), root, "losses", seeds=SEEDS)
    elapsed = _cpu() - t0
    mean = {r["cell"]: r["accuracy"] for r in pipeline.read_ablation(path) if r["seed"] == "mean"}
    singles = max(mean["t-s"], mean["t-f"])
    ok = (mean["t-s+t-f+consistency"] >= singles - 0.01
          and mean["t-s+t-f"] >= mean["t-s"] - 0.01
          and mean["t-s+t-f"] >= mean["t-f"] - 0.01
          and elapsed <= 45 * 60)
    cells = ", ".join(f"{c} {a:.3f}" for c, a in mean.items())
    acceptance(6, ok, f"{cells}, {elapsed / 60:.1f} min CPU")
    assert ok


# ---------------------------------------------------------------------------
# 7


def test_criterion_7_target_label_firewall(seed_runs, tmp_path, acceptance):
    root, _, _ = seed_runs
    cfg = ExperimentConfig().with_seed(42)
    src, tgt = pipeline.load_splits(cfg)
    garbage = tgt.with_labels(np.random.default_rng(7).integers(-10**6, 10**6, size=len(tgt)))
    t0 = _cpu()
    pipeline.run_phases(Run(cfg, tmp_path), splits=(src, garbage))
    elapsed = _cpu() - t0
    same = [(tmp_path / f).read_bytes() == (root / "seed_42" / f).read_bytes() for f in SNAPSHOTS]
    ok = all(same) and elapsed <= 10 * 60
    acceptance(7, ok, f"{sum(same)}/{len(same)} snapshots bit-identical under garbage target labels, "
                      f"{elapsed / 60:.1f} min CPU")
    assert ok


# ---------------------------------------------------------------------------
# 8

# all phases, evaluation and one ablation grid; epochs trimmed so two runs stay cheap
DETERMINISM_CONFIG = {
    "pretrain": {"epochs": 4},
    "pixel": {"epochs": 1},
    "feature": {"epochs": 3},
    "ablation_seeds": [42],
}


def _pipeline_bytes(out, cfg_file):
    for argv in (["run"], ["eval", "--mode", "both"], ["ablate", "--grid", "losses"]):
        assert cli.main(argv[:1] + ["--config", str(cfg_file), "--out", str(out)] + argv[1:]) == 0
    names = SNAPSHOTS + ("report.json", "source_only.json", "report_roc.csv", "ablation_losses.csv")
    return {n: (out / n).read_bytes() for n in names}


def test_criterion_8_determinism(tmp_path, acceptance, capsys):
    cfg_file = tmp_path / "config.json"
    cfg_file.write_text(json.dumps(DETERMINISM_CONFIG))
    a = _pipeline_bytes(tmp_path / "a", cfg_file)
    b = _pipeline_bytes(tmp_path / "b", cfg_file)
    capsys.readouterr()
    same = [n for n in a if a[n] == b[n]]
    ok = len(same) == len(a)
    acceptance(8, ok, f"{len(same)}/{len(a)} artifacts byte-identical across two pipeline runs")
    assert ok
