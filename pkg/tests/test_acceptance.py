"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import time
from pathlib import Path

import numpy as np
import pytest
from scipy import signal as sps

from mvp import autodiff as ad
from mvp.autodiff import Tensor
from mvp.backbones import conv_features, init_backbone, physio_config, reduce_time, video_backbone, video_config
from mvp.cli import run
from mvp.data import binarize_label, make_folds
from mvp.dsp import design_butterworth, design_notch, channel_filter
from mvp.fusion import ModelConfig, cross_attention, desk_config, fusion_forward, init_fusion
from mvp.gradcheck import check_mvp, check_ops
from mvp.synthetic import generate_synthetic
from mvp.train import RunConfig, cross_validate, weighted_f1

from test_fusion import brute_force_attention
from test_train import confusion_oracle

RESULTS: dict[int, str] = {}

# end-to-end run settings
E2E_EPOCHS = 10
E2E_LR = 1e-3


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n:>2}: {title} ({detail})"
    RESULTS[n] = line
    print(line)
    assert ok, line


def test_01_autodiff_finite_differences():
    t0 = time.perf_counter()
    ops = check_ops(seed=0, eps=1e-5)
    net = {}
    for mode in ("fused", "video_only", "physio_only"):
        net.update({f"{mode}:{k}": v for k, v in check_mvp(seed=0, eps=1e-5, n_coords=20, mode=mode).items()})
    elapsed = time.perf_counter() - t0
    worst = max(max(ops.values()), max(net.values()))
    record(1, "autodiff vs central differences", worst <= 1e-3 and elapsed < 60, f"{len(ops)} ops, {len(net)} network params, max rel err {worst:.2e}, {elapsed:.1f} s")


def test_02_attention_scalar_oracle():
    cfg = ModelConfig(n_heads=1, n_layers=1, model_dim=2, ffn_dim=2, token_count=2)
    p = {
        "a.wq": Tensor([[1.0, 0.5], [-0.5, 2.0]]),
        "a.bq": Tensor([0.1, -0.2]),
        "a.wk": Tensor([[0.3, -1.0], [1.5, 0.2]]),
        "a.bk": Tensor([0.0, 0.4]),
        "a.wv": Tensor([[2.0, 0.0], [0.0, -1.0]]),
        "a.bv": Tensor([0.5, 0.5]),
        "a.wo": Tensor([[1.0, 1.0], [0.0, 1.0]]),
        "a.bo": Tensor([-0.3, 0.0]),
    }
    xq = [[0.2, -1.0], [1.3, 0.7]]
    xkv = [[1.0, 0.0], [-0.4, 0.9], [0.6, -1.2]]
    out = cross_attention(Tensor(xq), Tensor(xkv), p, cfg, "a").data
    err = float(np.max(np.abs(out - brute_force_attention(xq, xkv, p, 1))))
    record(2, "2-query/3-key attention vs scalar brute force", err <= 1e-10, f"max abs err {err:.1e}")


def test_03_attention_rows_sum_to_one():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1_000):
        h = int(rng.integers(1, 4))
        d = h * int(rng.integers(1, 5))
        cfg = ModelConfig(n_heads=h, n_layers=1, model_dim=d, ffn_dim=2, token_count=2)
        params = {}
        for proj in "qkvo":
            params[f"a.w{proj}"] = Tensor(rng.standard_normal((d, d)) * rng.uniform(0.1, 5))
            params[f"a.b{proj}"] = Tensor(rng.standard_normal(d))
        w = []
        cross_attention(Tensor(rng.standard_normal((int(rng.integers(1, 9)), d))), Tensor(rng.standard_normal((int(rng.integers(1, 9)), d))), params, cfg, "a", weights_out=w)
        worst = max(worst, float(np.max(np.abs(w[0].sum(axis=-1) - 1.0))))
    record(3, "attention rows sum to 1", worst <= 1e-10, f"1000 instances, max deviation {worst:.1e}")


def test_04_key_value_permutation_invariance():
    cfg = ModelConfig(n_heads=4, n_layers=3, model_dim=16, ffn_dim=32, token_count=10, use_positional_encoding=False, dropout=0.0)
    rng = np.random.default_rng(1)
    params = init_fusion(cfg, rng)
    video, physio = rng.standard_normal((10, 16)), rng.standard_normal((10, 16))
    base = fusion_forward(Tensor(video), Tensor(physio), params, cfg).data
    worst = 0.0
    for _ in range(20):
        perm = rng.permutation(10)
        worst = max(worst, float(np.max(np.abs(fusion_forward(Tensor(video[perm]), Tensor(physio), params, cfg).data - base))))
    record(4, "logits invariant to video token permutation", worst <= 1e-9, f"20 permutations, max diff {worst:.1e}")


def test_05_filter_responses():
    fs = 128.0
    lines = []
    ok = True
    for ch in ("PPG", "ECG", "EDA"):
        spec = channel_filter(ch, fs)
        chain = design_butterworth(spec)
        # independent evaluation of the cascade's frequency response
        _, h = sps.sosfreqz(chain.sos, worN=np.asarray(spec.cutoff_hz), fs=fs)
        gains = 20 * np.log10(np.abs(h))
        ok &= bool(np.all(np.abs(gains + 3.0103) <= 0.2))
        lines.append(f"{spec.kind}{spec.order} " + "/".join(f"{g:.3f}" for g in gains) + " dB")
    _, h = sps.sosfreqz(design_notch(50.0, fs).sos, worN=np.array([40.0, 50.0, 60.0]), fs=fs)
    n40, n50, n60 = 20 * np.log10(np.abs(h))
    ok &= bool(n50 <= -20 and n40 >= -1 and n60 >= -1)
    lines.append(f"notch 40/50/60 Hz {n40:.2f}/{n50:.0f}/{n60:.2f} dB")
    record(5, "Butterworth -3 dB cutoffs and 50 Hz notch", ok, "; ".join(lines))


def test_06_shape_pipeline():
    rng = np.random.default_rng(0)
    pcfg, vcfg = physio_config(), video_config()
    pparams = init_backbone(pcfg, "physio", rng)
    h = conv_features(Tensor(rng.standard_normal((19_900, 2))), pparams, "physio", pcfg)
    z = reduce_time(h, pparams, "physio", pcfg)
    del h
    vparams = init_backbone(vcfg, "video", rng)
    v = video_backbone(Tensor(rng.standard_normal((2_800, 42))), vparams, vcfg)
    ok = z.shape == (100, 512) and v.shape == (100, 512)
    record(6, "backbone shapes", ok, f"physio [19900, 2] -> [19900, 512] -> {list(z.shape)}; video [2800, 42] -> {list(v.shape)}")


def test_07_protocol_integrity():
    ok = True
    detail = []
    for n, sizes in ((40, [8] * 5), (32, [7, 7, 6, 6, 6])):
        subjects = [f"S{i:02d}" for i in range(n)]
        plan = make_folds(subjects, 5, seed=0)
        ok &= [len(f) for f in plan.folds] == sizes
        ok &= plan == make_folds(subjects, 5, seed=0)
        for i in range(5):
            train, test = plan.split(i)
            ok &= not (train & test) and (train | test) == set(subjects)
        detail.append(f"{n} subjects -> {[len(f) for f in plan.folds]}")
    cases = [(4.5, 4.5, 0), (4.500001, 4.5, 1), (5.0, 5.0, 0), (5.000001, 5.0, 1), (9.0, 5.0, 1), (1.0, 4.5, 0)]
    ok &= all(binarize_label(r, t) == e for r, t, e in cases)
    detail.append(f"{len(cases)} binarization boundary cases")
    record(7, "fold plans and label binarization", bool(ok), "; ".join(detail))


def test_08_weighted_f1_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(500):
        n = int(rng.integers(1, 60))
        t = (rng.random(n) < rng.random()).astype(int)
        p = (rng.random(n) < rng.random()).astype(int)
        worst = max(worst, abs(weighted_f1(p, t) - confusion_oracle(p, t)))
    record(8, "weighted F1 vs confusion-matrix oracle", worst <= 1e-12, f"500 pairs, max diff {worst:.1e}")


@pytest.mark.slow
def test_09_end_to_end_learning():
    trials = generate_synthetic(20, 16, seed=7)
    t0 = time.perf_counter()
    summaries = {}
    for mode in ("fused", "video_only", "physio_only"):
        cfg = RunConfig(seed=0, epochs=E2E_EPOCHS, lr=E2E_LR, mode=mode, model=desk_config(0, 0))
        summaries[mode] = cross_validate(trials, cfg)
        print(summaries[mode].to_text())
    elapsed = time.perf_counter() - t0
    f = summaries["fused"]
    ok = f.mean_arousal >= 0.90 and f.mean_valence >= 0.85 and elapsed < 20 * 60
    for m in ("video_only", "physio_only"):
        ok &= f.mean_valence >= summaries[m].mean_valence - 0.02
        ok &= f.mean_arousal >= summaries[m].mean_arousal - 0.02
    detail = ", ".join(f"{m} V {s.mean_valence:.3f} A {s.mean_arousal:.3f}" for m, s in summaries.items())
    record(9, "synthetic end-to-end learning and fusion non-inferiority", bool(ok), f"{detail}; {E2E_EPOCHS} epochs, {elapsed / 60:.1f} min")


def test_10_determinism(tmp_path):
    def tree(root: Path) -> dict:
        return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}

    assert run(["--workdir", str(tmp_path), "synth", "--subjects", "5", "--trials", "2", "--seed", "3", "--out", "corpus"]) == 0
    outs = []
    for name in ("run_a", "run_b"):
        args = ["--workdir", str(tmp_path), "train", "--corpus", "corpus/manifest.jsonl", "--out", name]
        args += ["--set", "model.preset=desk", "--set", "run.epochs=2", "--set", "run.lr=1e-3", "--set", "run.seed=5"]
        assert run(args) == 0
        outs.append(tree(tmp_path / name))
    n_ckpt = sum(k.endswith(".ckpt") for k in outs[0])
    ok = outs[0] == outs[1] and n_ckpt == 5
    record(10, "identical seeds give bit-identical outputs", ok, f"{len(outs[0])} files compared, {n_ckpt} checkpoints")
