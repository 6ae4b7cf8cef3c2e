"""Acceptance criteria A1 to A6, one pass/fail line each.

Run with ``pytest tests/test_acceptance.py`` (lines appear in the terminal
summary) or ``python tests/test_acceptance.py``.
"""

import time

import numpy as np
import pytest

from equigat import autodiff as ad
from equigat.audit import (
    RULE_CASES,
    count_paths_brute_force,
    equivariance_audit,
    forces_audit,
    gradcheck_audit,
    paths_audit,
)
from equigat.data import make_toy_dataset
from equigat.model import EquivariantTransformer, build_model, model_config_from_preset
from equigat.operations import build_dtp_plan
from equigat.so3 import clebsch_gordan, quaternion_multiply, random_quaternion, wigner_d
from equigat.training import TrainConfig, train

RESULTS: dict[str, str] = {}
VARIANTS = [(a, m) for a in ("mlp", "dot") for m in ("linear", "nonlinear")]

A1_SECONDS, A2_SECONDS, A4_SECONDS = 120.0, 300.0, 600.0
A4_FORCE_WEIGHT = 80.0


def _record(key: str, ok: bool, detail: str) -> None:
    RESULTS[key] = f"{key} {'PASS' if ok else 'FAIL'}  {detail}"
    print(RESULTS[key])


def _fails(report) -> str:
    return "; ".join(f"{c.name}={c.value:.2e}" for c in report.failures())


# ---------------------------------------------------------------------------


def run_a1(attn_kind="mlp", message_kind="nonlinear"):
    """QM9 preset, SE(3) and E(3) layouts, 20 rotations each."""
    start = time.process_time()
    reports = []
    for preset in ("qm9", "qm9-e3"):
        cfg = model_config_from_preset(preset, attn_kind=attn_kind, message_kind=message_kind)
        reports.append(equivariance_audit(cfg, seed=0, rotations=20))
    seconds = time.process_time() - start
    return reports, seconds


def test_a1_equivariance_suite():
    reports, seconds = run_a1()
    se3, e3 = reports
    rot = max(c.value for r in reports for c in r.checks if c.name.startswith("rotation/"))
    trans = max(c.value for r in reports for c in r.checks if c.name == "translation/energy change")
    inv = max(c.value for c in e3.checks if c.name.startswith("inversion/"))
    ok = se3.passed and e3.passed and seconds < A1_SECONDS
    _record("A1", ok, f"rotation max err {rot:.2e} (<= 1e-8), translation dE {trans:.1e} (== 0), "
                      f"inversion max err {inv:.2e} (<= 1e-8), {seconds:.0f}s CPU (< {A1_SECONDS:.0f}s)")
    assert se3.passed, _fails(se3)
    assert e3.passed, _fails(e3)
    assert seconds < A1_SECONDS


def run_a2(attn_kind="mlp", message_kind="nonlinear", rules=True):
    """Full gradient audit on the toy preset plus finite-difference forces on the QM9 preset."""
    start = time.process_time()
    toy = model_config_from_preset("toy", attn_kind=attn_kind, message_kind=message_kind)
    grad = gradcheck_audit(toy, seed=0, rules=rules)
    forces = forces_audit(model_config_from_preset("qm9", attn_kind=attn_kind, message_kind=message_kind), seed=0)
    return grad, forces, time.process_time() - start


def test_a2_gradient_suite():
    grad, forces, seconds = run_a2()
    rules = {c.name.split("/")[1].split(" ")[0] for c in grad.checks if c.name.startswith("rule/")}
    worst = max(c.value for c in grad.checks if not c.exact and c.name != "net force")
    f_err = next(c.value for c in forces.checks if c.name.startswith("forces vs"))
    net = max(c.value for r in (grad, forces) for c in r.checks if c.name == "net force")
    ok = grad.passed and forces.passed and rules == set(ad.RULES) == set(RULE_CASES) and seconds < A2_SECONDS
    _record("A2", ok, f"{len(rules)} rules + double backward + end to end, worst rel err {worst:.2e} (<= 1e-4), "
                      f"QM9 forces rel err {f_err:.2e}, net force {net:.1e} (<= 1e-8), "
                      f"{seconds:.0f}s CPU (< {A2_SECONDS:.0f}s)")
    assert grad.passed, _fails(grad)
    assert forces.passed, _fails(forces)
    assert rules == set(ad.RULES)
    assert seconds < A2_SECONDS


def test_a3_algebra_oracles():
    rng = np.random.default_rng(3)
    inter = 0.0
    triples = [(a, b, c) for a in range(4) for b in range(4) for c in range(abs(a - b), min(a + b, 3) + 1)]
    for l1, l2, l3 in triples:
        C = clebsch_gordan(l1, l2, l3)
        q = random_quaternion(rng)
        lhs = np.einsum("ijk,ia,jb->abk", C, wigner_d(l1, q), wigner_d(l2, q))
        rhs = np.einsum("abl,kl->abk", C, wigner_d(l3, q))
        inter = max(inter, float(np.max(np.abs(lhs - rhs))))
    anchor = float(clebsch_gordan(0, 0, 0)[0, 0, 0] ** 2)
    ortho = 0.0
    for l1 in range(4):
        for l2 in range(4):
            M = np.concatenate([clebsch_gordan(l1, l2, l3).reshape(-1, 2 * l3 + 1)
                                for l3 in range(abs(l1 - l2), l1 + l2 + 1)], axis=1)
            ortho = max(ortho, float(np.max(np.abs(M.T @ M - anchor * np.eye(M.shape[1])))))
    comp = dorth = 0.0
    for _ in range(100):
        q1, q2 = random_quaternion(rng), random_quaternion(rng)
        for L in range(5):
            D1 = wigner_d(L, q1)
            comp = max(comp, float(np.max(np.abs(D1 @ wigner_d(L, q2) - wigner_d(L, quaternion_multiply(q1, q2))))))
            dorth = max(dorth, float(np.max(np.abs(D1.T @ D1 - np.eye(2 * L + 1)))))
    mismatched = 0
    for _ in range(50):
        in1 = [(int(rng.integers(1, 4)), int(L)) for L in rng.choice(4, size=rng.integers(1, 4), replace=False)]
        in2 = [(int(rng.integers(1, 3)), int(L)) for L in rng.choice(4, size=rng.integers(1, 4), replace=False)]
        lmax = int(rng.integers(0, 4))
        mismatched += build_dtp_plan(in1, in2, lmax).weight_count != count_paths_brute_force(in1, in2, lmax)
    ok = inter <= 1e-9 and ortho <= 1e-10 and comp <= 1e-10 and dorth <= 1e-10 and mismatched == 0
    _record("A3", ok, f"intertwiner {inter:.1e} over {len(triples)} triples (<= 1e-9), CG orthogonality {ortho:.1e} "
                      f"(constant {anchor:g}), D composition {comp:.1e}, D orthogonality {dorth:.1e}, "
                      f"path counts {50 - mismatched}/50 match")
    assert ok


def window_means(values, width=10):
    values = np.asarray(values, dtype=float)
    n = len(values) // width
    return values[: n * width].reshape(n, width).mean(axis=1)


def run_a4(force_weight=A4_FORCE_WEIGHT):
    ds = make_toy_dataset("pairwise-morse", 50, seed=0)
    stats = ds.stats(5.0)
    cfg = model_config_from_preset("toy", avg_degree=stats.avg_degree, avg_atom_count=stats.avg_atom_count)
    model, params = build_model(cfg, 0)
    train_cfg = TrainConfig.from_dict({**_toy_train(), "force_weight": force_weight})
    start = time.process_time()
    _, hist = train(model, params, ds, train_cfg, stats)
    return ds, hist, time.process_time() - start


def _toy_train():
    from equigat.model import PRESETS

    return dict(PRESETS["toy"]["train"])


def test_a4_desk_scale_learning():
    ds, hist, seconds = run_a4()
    target = 0.05 * float(ds.energies.std())
    best = min(r["train_energy_mae"] for r in hist)
    reached = next((r["epoch"] for r in hist if r["train_energy_mae"] < target), None)
    windows = window_means([r["train_force_mae"] for r in hist])
    rises = [(i, windows[i], windows[i + 1]) for i in range(len(windows) - 1) if windows[i + 1] > windows[i]]
    energy_ok = reached is not None and seconds < A4_SECONDS
    windows_ok = not rises
    _record("A4", energy_ok and windows_ok,
            f"energy MAE {best:.2e} eV < {target:.2e} (5% std) at epoch {reached}, {seconds:.0f}s CPU "
            f"(< {A4_SECONDS:.0f}s); force MAE 10-epoch windows {windows[0]:.3f} -> {windows[-1]:.4f}, "
            f"{len(rises)} rises")
    assert reached is not None
    assert seconds < A4_SECONDS
    assert windows_ok, f"force MAE window means rise at {rises}"


def test_a5_variant_matrix():
    lines = []
    ok = True
    for attn_kind, message_kind in VARIANTS:
        reports, s1 = run_a1(attn_kind, message_kind)
        # rule checks do not depend on the variant; they run once in A2
        grad, forces, s2 = run_a2(attn_kind, message_kind, rules=False)
        model = EquivariantTransformer(model_config_from_preset("qm9", attn_kind=attn_kind, message_kind=message_kind))
        tps = model.tensor_products_per_block()
        passed = all(r.passed for r in reports) and grad.passed and forces.passed
        ok = ok and passed and tps == (2 if message_kind == "nonlinear" else 1)
        lines.append(f"{attn_kind}/{message_kind}: {'pass' if passed else 'FAIL'} {tps} TP/block")
    _record("A5", ok, ", ".join(lines))
    assert ok, lines


def test_a6_structural_parity():
    _, store = build_model(model_config_from_preset("qm9"), 0)
    count = store.count()
    rel = abs(count - 3.53e6) / 3.53e6
    report, _ = paths_audit("[(128,0),(64,1),(32,2)]", "[(1,0),(1,1),(1,2)]", 2, verbose=False)
    plan = build_dtp_plan("[(128,0),(64,1),(32,2)]", "[(1,0),(1,1),(1,2)]", 2)
    # independent enumeration: per channel of degree l1, the degrees reachable with each SH degree
    expected = sum(mul * sum(1 for l2 in (0, 1, 2) for l3 in range(3) if abs(l1 - l2) <= l3 <= l1 + l2)
                   for mul, l1 in ((128, 0), (64, 1), (32, 2)))
    ok = rel <= 0.05 and report.passed and plan.weight_count == expected
    _record("A6", ok, f"QM9 parameters {count:,} vs 3.53M ({100 * rel:.1f}% off, <= 5%); "
                      f"paths {plan.weight_count} == enumeration {expected}")
    assert rel <= 0.05
    assert report.passed and plan.weight_count == expected


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
