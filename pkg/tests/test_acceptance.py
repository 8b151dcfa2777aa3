"""Acceptance suite: one PASS/FAIL line per criterion, echoed in the pytest summary.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import csv
import json
import math
import time

import numpy as np
import pytest

import conftest
from moe_erc import tensor as T
from moe_erc.cli import main
from moe_erc.context_net import CanConfig
from moe_erc.dataset import SynthConfig, collate, generate
from moe_erc.fusion_net import FusionConfig
from moe_erc.gate import ExpertLogits, Gate, fuse, gate_forward
from moe_erc.losses import LossConfig, contrastive_loss, cross_entropy, focal_loss, kl_consistency
from moe_erc.metrics import weighted_f1
from moe_erc.model import ModelConfig, build_variant
from moe_erc.tensor import ParameterSet, Value
from moe_erc.trainer import TrainConfig, evaluate, run_grad_check, tiny_model_config, train

from test_losses import brute_contrastive
from test_metrics import brute_weighted_f1


def record(n: int, ok: bool, detail: str) -> None:
    conftest.ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}")
    assert ok, detail


# Desk-scale benchmark shared by the gate-behaviour and ablation criteria.
BENCH_DIM = 16


def bench_data(speech_snr: float, text_snr: float = 4.0, seed: int = 0):
    return generate(SynthConfig(class_count=4, d_s=BENCH_DIM, d_t=BENCH_DIM, conversations_per_split=(64, 48, 32),
                                utterance_count_range=(6, 10), speech_snr=speech_snr, text_snr=text_snr,
                                seed=seed))


BENCH_MODEL = ModelConfig(d_s=BENCH_DIM, d_t=BENCH_DIM, class_count=4,
                          can=CanConfig(input_dim=BENCH_DIM, gru_hidden=16, gru_layers=1, fc_hidden=16,
                                        fc_dropout=0.2),
                          fusion=FusionConfig(model_dim=16, heads=2, layers=1, dropout=0.1))
BENCH_TRAIN = TrainConfig(learning_rate=3e-3, batch_size=8, epochs=60, seed=0)


# ------------------------------------------------------------------ 1

def test_criterion_1_gradcheck_full_variant():
    cfg = tiny_model_config()
    assert max(cfg.d_s, cfg.d_t, cfg.fusion.model_dim, cfg.can.gru_hidden) <= 8
    t0 = time.perf_counter()
    rep = run_grad_check(cfg, LossConfig(gamma=3.0, lam=1.0, alpha=0.1, tau=1.0), seed=0, variant="full",
                         lengths=(3, 2))
    dt = time.perf_counter() - t0
    ok = rep.passed and rep.checked == build_variant("full", cfg).parameter_count() and dt < 60
    record(1, ok, f"{rep.checked} scalars, {len(rep.failures)} failures, max rel err "
                  f"{max(rep.max_rel_error.values()):.2e} (tol 1e-4), {dt:.1f}s (< 60s)")


# ------------------------------------------------------------------ 2

def _focal_at(p_true: float, gamma: float) -> float:
    logits = np.array([[math.log(p_true), math.log(1 - p_true)]])
    return focal_loss(Value(logits), [0], gamma).item()


def test_criterion_2_loss_oracles():
    checks = []
    # focal: exact closed forms at 1e-9; the quoted six-figure constants at their printed precision
    one_hot = focal_loss(Value(np.array([[0.0, -800.0]])), [0], 3.0).item()
    checks.append(("focal p=1", abs(one_hot) <= 1e-9))
    ce_half = _focal_at(0.5, 0.0)
    checks.append(("focal g=0 p=.5", abs(ce_half - math.log(2)) <= 1e-9 and abs(ce_half - 0.693147) < 5e-7))
    g3 = _focal_at(0.9, 3.0)
    exact_g3 = 0.1 ** 3 * -math.log(0.9)
    checks.append(("focal g=3 p=.9", abs(g3 - exact_g3) <= 1e-9 and abs(g3 - 1.05361e-4) < 5e-10))

    e = np.eye(3)
    n1 = contrastive_loss(Value(e[:1]), Value(e[:1]), [0], 1.0).item()
    checks.append(("contrastive N=1", n1 == 0.0))
    m = np.stack([e[0], e[1]])
    n2 = contrastive_loss(Value(m), Value(m), [0, 1], 1.0).item()
    brute = brute_contrastive(m, m, np.array([0, 1]), 1.0)
    checks.append(("contrastive N=2", abs(n2 - brute) <= 1e-6 and abs(n2 - 2.205781) <= 5e-6))

    pm, ps = np.array([[0.75, 0.25]]), np.array([[0.5, 0.5]])
    kl = kl_consistency(Value(pm), Value(ps), Value(pm)).item()
    exact_kl = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    checks.append(("kl", abs(kl - exact_kl) <= 1e-9 and abs(kl - 0.130812) < 5e-7))

    bad = [name for name, ok in checks if not ok]
    record(2, not bad, f"focal {g3:.6e}, contrastive N=2 {n2:.7f} (brute {brute:.7f}), kl {kl:.7f}"
                       + (f"; failing: {bad}" if bad else ""))


# ------------------------------------------------------------------ 3

def test_criterion_3_moe_algebra():
    rng = np.random.default_rng(3)
    n, k = 10_000, 5
    ps = ParameterSet()
    gate = Gate(ps, "gate", 3 * k, rng)
    for v in ps.values():
        v.data[...] = rng.normal(size=v.shape) * 3
    ys, yt, ym = (rng.normal(size=(n, k)) * rng.uniform(0.1, 50, size=(n, 1)) for _ in range(3))
    logits = ExpertLogits(Value(ys), Value(yt), Value(ym))
    beta = gate_forward(gate, logits).data
    simplex = bool((beta >= 0).all() and np.abs(beta.sum(-1) - 1).max() <= 1e-6)

    onehot_ok = True
    for j, y in enumerate((ys, yt, ym)):
        oh = np.zeros_like(beta)
        oh[:, j] = 1.0
        onehot_ok &= fuse(logits, oh).data.tobytes() == y.tobytes()

    fused = fuse(logits, beta).data
    stack = np.stack([ys, yt, ym])
    convex = bool((fused >= stack.min(0)).all() and (fused <= stack.max(0)).all())

    same = ExpertLogits(Value(ys), Value(ys), Value(ys))
    fixed = fuse(same, beta).data.tobytes() == ys.tobytes()
    record(3, simplex and onehot_ok and convex and fixed,
           f"{n} instances: simplex={simplex} one-hot bitwise={onehot_ok} convex={convex} fixed point={fixed}")


# ------------------------------------------------------------------ 4

def test_criterion_4_gamma_zero_is_cross_entropy():
    rng = np.random.default_rng(4)
    worst = 0.0
    for _ in range(10_000):
        k = int(rng.integers(2, 8))
        z = rng.normal(size=k) * rng.uniform(0.1, 20)
        y = int(rng.integers(0, k))
        p_true = math.exp(z[y] - z.max() - math.log(np.exp(z - z.max()).sum()))
        ce = -math.log(max(p_true, 1e-12))  # same 1e-12 probability floor as every loss log
        fl = focal_loss(Value(z[None]), [y], 0.0).item()
        worst = max(worst, abs(fl - ce), abs(cross_entropy(Value(z[None]), [y]).item() - fl))
    record(4, worst <= 1e-12, f"max |FL_0 - CE| over 10^4 pairs = {worst:.1e} (tol 1e-12)")


# ------------------------------------------------------------------ 5

def test_criterion_5_overfit():
    t0 = time.perf_counter()
    tr, _, _ = generate(SynthConfig(class_count=4, d_s=16, d_t=16, conversations_per_split=(8, 1, 1),
                                    utterance_count_range=(8, 12), speech_snr=20, text_snr=20, seed=0))
    cfg = TrainConfig(learning_rate=1e-3, batch_size=8, epochs=60, seed=0)
    model, rep = train(tr, tr, cfg, BENCH_MODEL)
    f1 = evaluate(model, tr).weighted_f1
    reached = next((r["epoch"] + 1 for r in rep.history if r["val_f1"] >= 0.99), None)
    dt = time.perf_counter() - t0
    ok = f1 >= 0.99 and reached is not None and reached <= 200 and dt < 300
    record(5, ok, f"train weighted F1 {f1:.4f} (>= 0.99) first reached at epoch {reached} (<= 200), {dt:.1f}s")


# ------------------------------------------------------------------ 6

@pytest.mark.slow
def test_criterion_6_gate_tracks_modality_strength():
    tr, va, te = bench_data(speech_snr=0.0)
    model, _ = train(tr, va, BENCH_TRAIN, BENCH_MODEL)
    bs, bt, _ = evaluate(model, te).betas.mean(0)
    imb_gap = bt - bs

    tr, va, te = bench_data(speech_snr=4.0)
    model, _ = train(tr, va, BENCH_TRAIN, BENCH_MODEL)
    ev = evaluate(model, te)
    s_bs, s_bt, _ = ev.betas.mean(0)
    f1 = ev.expert_f1()
    sym_ok = abs(s_bt - s_bs) <= 0.2 and f1["multimodal"] >= max(f1["speech"], f1["text"]) - 0.02
    record(6, imb_gap >= 0.1 and sym_ok,
           f"imbalanced mean beta_t - beta_s = {imb_gap:.3f} (>= 0.1); symmetric |gap| = {abs(s_bt - s_bs):.3f} "
           f"(<= 0.2), expert F1 multimodal {f1['multimodal']:.3f} vs speech {f1['speech']:.3f} "
           f"text {f1['text']:.3f} (-0.02 slack)")


# ------------------------------------------------------------------ 7

@pytest.mark.slow
def test_criterion_7_ablation_parity(tmp_path):
    doc = {
        "data": {"synth": {"class_count": 4, "d_s": BENCH_DIM, "d_t": BENCH_DIM,
                           "conversations_per_split": [64, 48, 32], "utterance_count_range": [6, 10],
                           "speech_snr": 0.0, "text_snr": 4.0, "seed": 0}},
        "model": {"can": {"gru_hidden": 16, "gru_layers": 1, "fc_hidden": 16, "fc_dropout": 0.2},
                  "fusion": {"model_dim": 16, "heads": 2, "layers": 1, "dropout": 0.1}},
        "train": {"learning_rate": 3e-3, "batch_size": 8, "epochs": 60},
        "output_dir": str(tmp_path / "runs"),
    }
    (tmp_path / "run.json").write_text(json.dumps(doc))
    cells = [{"variant": v, "seed": s} for v in ("full", "monolithic") for s in (0, 1, 2)]
    cells += [{"variant": v, "seed": 0} for v in ("feat_moe", "no_loss_moe", "text_only")]
    (tmp_path / "sweep.json").write_text(json.dumps({"cells": cells}))
    out = tmp_path / "sweep.csv"
    code = main(["ablate", str(tmp_path / "run.json"), str(tmp_path / "sweep.json"), "--jobs", "4",
                 "--out", str(out)])
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    ok_rows = [r for r in rows if r["status"] == "ok" and math.isfinite(float(r["test_weighted_f1"]))]
    produced = {r["variant"] for r in ok_rows}

    def mean_f1(variant):
        return float(np.mean([float(r["test_weighted_f1"]) for r in ok_rows if r["variant"] == variant]))

    full, mono = mean_f1("full"), mean_f1("monolithic")
    need = {"feat_moe", "no_loss_moe", "monolithic", "text_only"}
    ok = code == 0 and len(ok_rows) == len(cells) and need <= produced and full >= mono - 0.01
    others = ", ".join(f"{v} {mean_f1(v):.3f}" for v in ("feat_moe", "no_loss_moe", "text_only") if v in produced)
    record(7, ok, f"{len(ok_rows)}/{len(cells)} rows ok; mean test F1 over 3 seeds full {full:.3f} vs "
                  f"monolithic {mono:.3f} (>= -0.01); {others}")


# ------------------------------------------------------------------ 8

def test_criterion_8_metric_oracle():
    rng = np.random.default_rng(8)
    worst = 0.0
    for _ in range(1000):
        k = int(rng.integers(2, 7))
        n = int(rng.integers(1, 60))
        y, p = rng.integers(0, k, size=n), rng.integers(0, k, size=n)
        worst = max(worst, abs(weighted_f1(y, p, k) - brute_weighted_f1(y, p, k)))
    example = weighted_f1([0, 0, 1], [0, 1, 1], 2)
    ok = worst <= 1e-12 and abs(example - 2 / 3) <= 1e-12
    record(8, ok, f"max deviation over 1000 instances {worst:.1e} (tol 1e-12); [0,0,1]/[0,1,1] -> {example:.12f}")


# ------------------------------------------------------------------ 9

def test_criterion_9_determinism(tmp_path):
    doc = {
        "data": {"synth": {"class_count": 3, "d_s": 8, "d_t": 8, "conversations_per_split": [8, 4, 4],
                           "utterance_count_range": [3, 6], "seed": 9}},
        "model": {"can": {"gru_hidden": 6, "gru_layers": 1, "fc_hidden": 8},
                  "fusion": {"model_dim": 8, "heads": 2, "layers": 1, "dropout": 0.1}},
        "train": {"learning_rate": 3e-3, "epochs": 4, "batch_size": 4, "seed": 5},
    }
    (tmp_path / "run.json").write_text(json.dumps(doc))
    dirs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["train", str(tmp_path / "run.json"), f"--output_dir={out}"]) == 0
        (run_dir,) = [p for p in out.iterdir() if p.is_dir()]
        dirs.append(run_dir)
    same = {f: (dirs[0] / f).read_bytes() == (dirs[1] / f).read_bytes() for f in ("train_log.jsonl", "best.ckpt")}
    record(9, all(same.values()), f"byte-identical across two train runs: {same}")


# ------------------------------------------------------------------ 10

def test_criterion_10_padding_invariance():
    cfg = tiny_model_config(class_count=4, dim=6)
    model = build_variant("full", cfg, seed=10)
    loss_cfg = LossConfig()
    rng = np.random.default_rng(10)
    worst_loss = worst_logit = worst_f1 = 0.0
    for i in range(10):
        synth = SynthConfig(class_count=4, d_s=6, d_t=6, conversations_per_split=(int(rng.integers(2, 6)), 1, 1),
                            utterance_count_range=(1, 9), seed=100 + i)
        convs = generate(synth)[0].conversations
        if len({len(c) for c in convs}) == 1:  # force mixed lengths
            convs = convs[:-1] + (type(convs[-1])(convs[-1].id, convs[-1].utterances[:1]),)
        b = collate(convs)
        with T.no_grad():
            out = model(b.speech, b.text, b.mask)
            batched = model.loss(out, b.labels, loss_cfg, b.mask).floats()
            singles, preds, labels = [], [], []
            for j, c in enumerate(convs):
                s = collate([c])
                o = model(s.speech, s.text, s.mask)
                singles.append(model.loss(o, s.labels, loss_cfg, s.mask).floats())
                n = len(c)
                worst_logit = max(worst_logit, float(np.abs(o.final.data[0] - out.final.data[j, :n]).max()))
                preds.append(o.final.data[0].argmax(-1))
                labels.append(s.labels[0])
        for key in batched:
            worst_loss = max(worst_loss, abs(batched[key] - np.mean([x[key] for x in singles])))
        y, p_single = np.concatenate(labels), np.concatenate(preds)
        p_batched = np.concatenate([out.final.data[j, :len(c)].argmax(-1) for j, c in enumerate(convs)])
        worst_f1 = max(worst_f1, abs(weighted_f1(y, p_batched, 4) - weighted_f1(y, p_single, 4)))
    ok = worst_loss <= 1e-9 and worst_logit <= 1e-9 and worst_f1 <= 1e-9
    record(10, ok, f"10 mixed batches: max loss gap {worst_loss:.1e}, logit gap {worst_logit:.1e}, "
                   f"weighted F1 gap {worst_f1:.1e} (tol 1e-9)")
